"""The full conversion model: speaker encoder, content encoder and decoder."""
from __future__ import annotations

import torch
from torch import nn
from torch.func import functional_call

from .audio import MelSpectrogram
from .config import ModelConfig
from .content import ContentEncoder
from .decoder import Decoder, DecoderOutput
from .errors import ValidationError
from .speaker import GE2ELoss, SpeakerEncoder, freeze

GROUPS = ("speaker_encoder", "ge2e", "content_encoder", "decoder")


def call_frozen(module: nn.Module, *args, **kwargs):
    """Run ``module`` with its parameters detached.

    Gradients still reach the inputs, but never the module's own parameters,
    whatever their ``requires_grad`` flags say. The stand-ins are fresh leaves
    that keep each flag, since ``nn.LSTM`` picks a different CPU kernel (off by
    an ulp) when its weights do not require grad.
    """
    state = {name: p.detach().requires_grad_(p.requires_grad)
             for name, p in module.named_parameters()}
    state.update(dict(module.named_buffers()))
    return functional_call(module, state, args, kwargs)


class VoiceConverter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.speaker_encoder = SpeakerEncoder(cfg)
        self.ge2e = GE2ELoss()
        self.content_encoder = ContentEncoder(cfg)
        self.decoder = Decoder(cfg)
        self.trained_steps = 0
        self.loaded_groups: tuple[str, ...] = ()

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0) -> "VoiceConverter":
        torch.manual_seed(seed)
        model = cls(cfg)
        freeze(model.speaker_encoder)
        freeze(model.ge2e)
        return model

    def conversion_parameters(self):
        return list(self.content_encoder.parameters()) + list(self.decoder.parameters())

    def embed(self, mels: torch.Tensor) -> torch.Tensor:
        """Speaker embeddings; the encoder's parameters never receive gradient."""
        return call_frozen(self.speaker_encoder, mels)

    def _mel_tensor(self, m: MelSpectrogram) -> torch.Tensor:
        return torch.as_tensor(m.frames, dtype=self.dtype)[None]

    @property
    def dtype(self):
        return next(self.decoder.parameters()).dtype

    def embed_utterance(self, m: MelSpectrogram) -> torch.Tensor:
        with torch.no_grad():
            return self.embed(self._mel_tensor(m))[0]

    def reconstruct(self, mels, src_spk, tgt_spk) -> DecoderOutput:
        codes = self.content_encoder(mels, src_spk)
        return self.decoder(codes, tgt_spk, mels.shape[1])

    def convert(self, source: MelSpectrogram, src_s: torch.Tensor,
                tgt_s: torch.Tensor) -> MelSpectrogram:
        if self.trained_steps <= 0:
            raise ValidationError("model is untrained: load or train a checkpoint first")
        return self.convert_unchecked(source, src_s, tgt_s)

    def convert_unchecked(self, source: MelSpectrogram, src_s, tgt_s) -> MelSpectrogram:
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                out = self.reconstruct(self._mel_tensor(source), src_s.to(self.dtype)[None],
                                       tgt_s.to(self.dtype)[None])
        finally:
            self.train(was_training)
            freeze(self.speaker_encoder)
            freeze(self.ge2e)
        return MelSpectrogram(out.post_mel[0].double().numpy(), sample_rate=source.sample_rate)
