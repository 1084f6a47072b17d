"""Decoder network: content codes + speaker embedding → mel spectrogram."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import ModelConfig
from .content import upsample_content
from .errors import ValidationError
from .nn_ops import LSTM, BatchNorm, ConvBlock, ConvTime


@dataclass
class DecoderOutput:
    pre_mel: torch.Tensor
    post_mel: torch.Tensor


class Postnet(nn.Module):
    def __init__(self, n_mels: int, channels: int):
        super().__init__()
        self.blocks = nn.Sequential(
            ConvBlock(n_mels, channels, activation="tanh"),
            ConvBlock(channels, channels, activation="tanh"),
            ConvBlock(channels, channels, activation="tanh"),
            ConvBlock(channels, channels, activation="tanh"),
        )
        self.out = ConvTime(channels, n_mels)
        self.out_norm = BatchNorm(n_mels)

    def forward(self, x):
        return self.out_norm(self.out(self.blocks(x)))


class Decoder(nn.Module):
    """upsample ⊕ speaker → 3 conv blocks → stacked LSTM → linear → postnet residual."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.dec_channels
        self.convs = nn.Sequential(
            ConvBlock(2 * cfg.d_c + cfg.d_spk, ch),
            ConvBlock(ch, ch),
            ConvBlock(ch, ch),
        )
        self.lstm = LSTM(ch, cfg.dec_hidden, layers=cfg.dec_layers)
        self.proj = nn.Linear(cfg.dec_hidden, cfg.n_mels)
        with torch.no_grad():
            self.proj.bias.fill_(cfg.mel_mean / cfg.mel_std)
        self.postnet = Postnet(cfg.n_mels, cfg.postnet_channels)

    def forward(self, codes: torch.Tensor, spk: torch.Tensor, length: int) -> DecoderOutput:
        if length < 1:
            raise ValidationError("output length must be >= 1")
        up = upsample_content(codes, self.cfg.pool, length)
        cond = spk[:, None, :].expand(-1, length, -1)
        h = self.lstm(self.convs(torch.cat([up, cond], dim=-1)))
        # output layer works in standardized units
        pre = self.proj(h) * self.cfg.mel_std
        return DecoderOutput(pre, pre + self.postnet(pre))
