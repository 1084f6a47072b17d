"""Self-reconstruction and speaker-consistency training.

One optimizer step per batch minimizes ``L_SRL + λ·L_SCL``:

* self-reconstruction: encode ``x_iA`` conditioned on ``S_jA``, decode with
  ``S_jA``, compare the output with ``x_iA`` (mean squared) and the content
  re-extracted from the output with the original codes (mean absolute);
* speaker consistency: decode the same codes with another speaker's
  ``S_B``, then require the re-extracted content to match the codes and the
  re-extracted speaker embedding to match ``S_B``. The content encoder acts
  as a fixed feature extractor on this path.

The speaker encoder is pretrained and never receives gradient.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .audio import MelSpectrogram
from .config import ModelConfig, TrainingConfig
from .data import Corpus, TrainTriple, TripleSampler
from .errors import ValidationError
from .model import VoiceConverter, call_frozen
from .nn_ops import frozen_bn_stats, l1, mse

log = logging.getLogger(__name__)


@dataclass
class Batch:
    """Tensors for a batch of triples: source crops and the two identities."""

    x_iA: torch.Tensor  # (B, T, 80)
    s_A: torch.Tensor  # (B, d_spk) embedding of x_jA
    s_B: torch.Tensor  # (B, d_spk) embedding of x_B


@dataclass
class LossTerms:
    srl: torch.Tensor
    scl: torch.Tensor
    total: torch.Tensor


def self_reconstruction_terms(model: VoiceConverter, batch: Batch, pre_mel_loss: bool = False):
    """Returns (loss, codes) for the self-reconstruction pass."""
    codes = model.content_encoder(batch.x_iA, batch.s_A)
    out = model.decoder(codes, batch.s_A, batch.x_iA.shape[1])
    with frozen_bn_stats(model.content_encoder):
        recoded = model.content_encoder(out.post_mel, batch.s_A)
    loss = mse(out.post_mel, batch.x_iA) + l1(recoded, codes)
    if pre_mel_loss:
        loss = loss + mse(out.pre_mel, batch.x_iA)
    return loss, codes


def consistency_from_codes(model: VoiceConverter, batch: Batch, codes: torch.Tensor):
    """Speaker-consistency loss given the (constant) source codes."""
    codes = codes.detach()
    converted = model.decoder(codes, batch.s_B, batch.x_iA.shape[1]).post_mel
    with frozen_bn_stats(model.content_encoder):
        recoded = call_frozen(model.content_encoder, converted, batch.s_A)
    s_hat = model.embed(converted)
    return l1(recoded, codes) + l1(s_hat, batch.s_B)


def self_reconstruction_loss(model: VoiceConverter, batch: Batch,
                             pre_mel_loss: bool = False) -> torch.Tensor:
    return self_reconstruction_terms(model, batch, pre_mel_loss)[0]


def speaker_consistency_loss(model: VoiceConverter, batch: Batch) -> torch.Tensor:
    with frozen_bn_stats(model.content_encoder):
        codes = call_frozen(model.content_encoder, batch.x_iA, batch.s_A)
    return consistency_from_codes(model, batch, codes)


def combine(srl: torch.Tensor, scl: torch.Tensor, lambda_scl: float) -> torch.Tensor:
    if lambda_scl == 0:
        return srl
    return srl + lambda_scl * scl


def total_loss(model: VoiceConverter, batch: Batch, cfg: TrainingConfig) -> LossTerms:
    """Both terms on the same batch. The consistency pass reuses the codes of
    the reconstruction pass (detached), which equal a fresh re-encoding."""
    srl, codes = self_reconstruction_terms(model, batch, cfg.pre_mel_loss)
    if cfg.lambda_scl == 0:
        # logged only: no gradient and no batch-norm statistics updates
        with torch.no_grad(), frozen_bn_stats(model.decoder):
            scl = consistency_from_codes(model, batch, codes)
    else:
        scl = consistency_from_codes(model, batch, codes)
    return LossTerms(srl, scl, combine(srl, scl, cfg.lambda_scl))


# --- trainer -----------------------------------------------------------------

def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class StepMetrics:
    step: int
    srl: float
    scl: float
    total: float

    def line(self) -> str:
        return f"{self.step}\t{self.srl:.6f}\t{self.scl:.6f}\t{self.total:.6f}"


@dataclass
class Trainer:
    model: VoiceConverter
    corpus: Corpus
    cfg: TrainingConfig
    history: list[StepMetrics] = field(default_factory=list)

    def __post_init__(self):
        if len(self.corpus.train_speakers) < 2:
            raise ValidationError("training needs a corpus with >= 2 speakers")
        self.sampler = TripleSampler(self.corpus, self.cfg.seed)
        self.rng = np.random.default_rng([self.cfg.seed, 1])
        self._emb_cache: dict[str, torch.Tensor] = {}
        groups = []
        if not self.cfg.freeze_content_encoder:
            groups += list(self.model.content_encoder.parameters())
        else:
            self.model.content_encoder.requires_grad_(False)
        if not self.cfg.freeze_decoder:
            groups += list(self.model.decoder.parameters())
        else:
            self.model.decoder.requires_grad_(False)
        self.params = groups
        self.optimizer = (torch.optim.Adam(groups, lr=self.cfg.learning_rate,
                                           betas=(self.cfg.beta1, self.cfg.beta2))
                          if groups else None)
        self._spk_digest = parameter_digest(self.model.speaker_encoder)

    def embedding(self, uid: str, mel: MelSpectrogram) -> torch.Tensor:
        # the speaker encoder is frozen, so whole-utterance embeddings are constants
        emb = self._emb_cache.get(uid)
        if emb is None:
            emb = self._emb_cache[uid] = self.model.embed_utterance(mel)
        return emb

    def crop(self, mel: MelSpectrogram) -> np.ndarray:
        frames = self.cfg.crop_frames
        if len(mel) < frames:
            raise ValidationError(f"utterance of {len(mel)} frames shorter than crop {frames}")
        start = int(self.rng.integers(0, len(mel) - frames + 1))
        return mel.frames[start:start + frames]

    def make_batch(self, triples: list[TrainTriple]) -> Batch:
        x = np.stack([self.crop(t.x_iA) for t in triples])
        s_a = torch.stack([self.embedding(t.uid_j, t.x_jA) for t in triples])
        s_b = torch.stack([self.embedding(t.uid_B, t.x_B) for t in triples])
        return Batch(torch.as_tensor(x, dtype=self.model.dtype), s_a, s_b)

    def next_batch(self) -> Batch:
        return self.make_batch([self.sampler() for _ in range(self.cfg.batch_size)])

    def step(self) -> StepMetrics:
        self.model.train()
        batch = self.next_batch()
        terms = total_loss(self.model, batch, self.cfg)
        if self.cfg.debug_checks:
            self._check_gradient_stops(batch)
        if self.optimizer is not None:
            self.optimizer.zero_grad(set_to_none=True)
            terms.total.backward()
            if self.cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
            self.optimizer.step()
        metrics = StepMetrics(len(self.history), terms.srl.item(), terms.scl.item(),
                              terms.total.item())
        self.history.append(metrics)
        self.model.trained_steps += 1
        return metrics

    def _check_gradient_stops(self, batch: Batch):
        content = [p for p in self.model.content_encoder.parameters() if p.requires_grad]
        if content:
            grads = torch.autograd.grad(speaker_consistency_loss(self.model, batch), content,
                                        allow_unused=True)
            if any(g is not None and torch.any(g != 0) for g in grads):
                raise AssertionError("consistency loss reached content-encoder parameters")
        if parameter_digest(self.model.speaker_encoder) != self._spk_digest:
            raise AssertionError("speaker-encoder parameters changed during training")

    def run(self, steps: int | None = None, log_fn=None) -> list[StepMetrics]:
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            m = self.step()
            if log_fn is not None:
                log_fn(m)
            if m.step % 100 == 0:
                log.info("step %d srl %.4f scl %.4f total %.4f", m.step, m.srl, m.scl, m.total)
        return self.history


def train(corpus: Corpus, model: VoiceConverter, cfg: TrainingConfig,
          log_fn=None) -> tuple[VoiceConverter, list[StepMetrics]]:
    """Train content encoder and decoder of ``model`` in place.

    ``model`` must already carry a pretrained speaker encoder.
    """
    torch.manual_seed(cfg.seed)
    trainer = Trainer(model, corpus, cfg)
    history = trainer.run(log_fn=log_fn)
    model.eval()
    return model, history


def new_model(model_cfg: ModelConfig, seed: int, speaker_state: dict | None = None) -> VoiceConverter:
    """Fresh conversion model, optionally seeded with pretrained speaker-encoder weights."""
    model = VoiceConverter.build(model_cfg, seed)
    if speaker_state is not None:
        model.speaker_encoder.load_state_dict(speaker_state)
    return model


def write_metrics(path, history: list[StepMetrics]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in history:
            fh.write(m.line() + "\n")


def read_metrics(path) -> list[StepMetrics]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            step, srl, scl, tot = line.rstrip("\n").split("\t")
            out.append(StepMetrics(int(step), float(srl), float(scl), float(tot)))
    return out
