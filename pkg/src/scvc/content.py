"""Content encoder with the attentive max-pooling bottleneck."""
from __future__ import annotations

import torch
from torch import nn

from .audio import MelSpectrogram
from .config import ModelConfig
from .errors import TooShortError, ValidationError
from .nn_ops import LSTM, ConvBlock, SelfAttention, max_pool_time, repeat_time


class ContentEncoder(nn.Module):
    """mel ⊕ speaker → 3 conv blocks → 2 BLSTM layers → self-attention → max-pool.

    Output codes are ``(B, T // pool, 2 * d_c)``. With ``bottleneck="sample"``
    the attention and pooling are replaced by strided frame sampling of the
    forward and backward streams at opposite window ends.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.enc_channels
        self.convs = nn.Sequential(
            ConvBlock(cfg.n_mels + cfg.d_spk, ch),
            ConvBlock(ch, ch),
            ConvBlock(ch, ch),
        )
        self.blstm = LSTM(ch, cfg.d_c, layers=2, bidirectional=True)
        self.attention = SelfAttention(2 * cfg.d_c, residual=cfg.attention_residual)

    def trunk(self, mels: torch.Tensor, spk: torch.Tensor) -> torch.Tensor:
        x = (mels - self.cfg.mel_mean) / self.cfg.mel_std
        cond = spk[:, None, :].expand(-1, x.shape[1], -1)
        return self.blstm(self.convs(torch.cat([x, cond], dim=-1)))

    def forward(self, mels: torch.Tensor, spk: torch.Tensor,
                attn_weights: torch.Tensor | None = None) -> torch.Tensor:
        f = self.cfg.pool
        if mels.shape[1] < f:
            raise TooShortError(f"utterance too short: {mels.shape[1]} frames < pool factor {f}")
        if spk.shape[0] != mels.shape[0]:
            raise ValidationError("batch sizes of mels and speaker embeddings differ")
        h = self.trunk(mels, spk)
        if self.cfg.bottleneck == "sample":
            d = self.cfg.d_c
            n = h.shape[1] // f
            fwd = h[:, f - 1:n * f:f, :d]
            bwd = h[:, 0:n * f:f, d:]
            return torch.cat([fwd, bwd], dim=-1)
        h = self.attention(h, attn_weights).context
        return max_pool_time(h, f, f)


def encode_content(encoder: ContentEncoder, m: MelSpectrogram, s: torch.Tensor) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        mel = torch.as_tensor(m.frames, dtype=dtype)[None]
        return encoder(mel, s.to(dtype)[None])[0]


def upsample_content(codes: torch.Tensor, factor: int, length: int) -> torch.Tensor:
    """Repeat each code ``factor`` times along time and fit to ``length`` frames."""
    if codes.shape[-2] == 0:
        raise ValidationError("empty content")
    if length > factor * codes.shape[-2] + factor - 1:
        raise ValidationError(
            f"length {length} too long for {codes.shape[-2]} codes at factor {factor}")
    return repeat_time(codes, factor, length)
