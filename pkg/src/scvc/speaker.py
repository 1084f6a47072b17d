"""Speaker encoder, generalized end-to-end (GE2E) loss and pretraining."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import MelSpectrogram
from .config import ModelConfig, TrainingConfig
from .data import Corpus
from .errors import TooShortError, ValidationError
from .nn_ops import LSTM

log = logging.getLogger(__name__)


class SpeakerEncoder(nn.Module):
    """Two stacked LSTMs; the last hidden state is projected and L2-normalized."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.lstm = LSTM(cfg.n_mels, cfg.spk_hidden, layers=2)
        self.proj = nn.Linear(cfg.spk_hidden, cfg.d_spk)

    def forward(self, mels: torch.Tensor) -> torch.Tensor:
        if mels.shape[1] < 1:
            raise TooShortError("empty spectrogram")
        x = (mels - self.cfg.mel_mean) / self.cfg.mel_std
        h = self.lstm(x)[:, -1]
        return F.normalize(self.proj(h), dim=-1, eps=1e-12)


def embed_utterance(encoder: SpeakerEncoder, m: MelSpectrogram) -> torch.Tensor:
    dtype = next(encoder.parameters()).dtype
    with torch.no_grad():
        mel = torch.as_tensor(m.frames, dtype=dtype)[None]
        return encoder(mel)[0]


class GE2ELoss(nn.Module):
    """Softmax GE2E: similarity ``w·cos + b`` against speaker centroids.

    An utterance is compared with its own speaker's centroid computed
    without that utterance. ``w`` is clamped positive.

    Every reduction runs over sorted operands, so reordering speakers or
    utterances leaves the loss bit-identical rather than equal up to rounding.
    """

    def __init__(self, w: float = 10.0, b: float = -5.0):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(float(w)))
        self.b = nn.Parameter(torch.tensor(float(b)))

    def similarity(self, emb: torch.Tensor) -> torch.Tensor:
        n, m, _ = emb.shape
        if n < 2 or m < 2:
            raise ValidationError(f"GE2E needs N >= 2 speakers and M >= 2 utterances, got {n}x{m}")
        total = emb.sort(dim=1).values.sum(dim=1)
        centroids = F.normalize(total / m, dim=-1, eps=1e-12)
        # (N, M, N) cosine against every full centroid
        cos = torch.einsum("jid,kd->jik", emb, centroids)
        loo = F.normalize((total[:, None, :] - emb) / (m - 1), dim=-1, eps=1e-12)
        own = (emb * loo).sum(-1)
        mask = torch.eye(n, dtype=torch.bool)[:, None, :].expand(n, m, n)
        cos = torch.where(mask, own[:, :, None].expand(n, m, n), cos)
        return self.w.clamp(min=1e-6) * cos + self.b

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        sim = self.similarity(emb)
        n, m, _ = sim.shape
        own = torch.diagonal(sim, dim1=0, dim2=2).T  # (N, M): sim[j, i, j]
        log_z = torch.logsumexp(sim.sort(dim=-1).values, dim=-1)
        return (log_z - own).flatten().sort().values.sum()


def ge2e_loss(emb: torch.Tensor, w: float | torch.Tensor = 10.0,
              b: float | torch.Tensor = -5.0) -> torch.Tensor:
    loss = GE2ELoss()
    with torch.no_grad():
        loss.w.copy_(torch.as_tensor(w))
        loss.b.copy_(torch.as_tensor(b))
    return loss.to(emb.dtype)(emb)


def _crop_batch(corpus: Corpus, utts, frames: int, rng: np.random.Generator) -> torch.Tensor:
    crops = []
    for u in utts:
        mel = corpus.mel(u).frames
        start = int(rng.integers(0, mel.shape[0] - frames + 1))
        crops.append(mel[start:start + frames])
    return torch.as_tensor(np.stack(crops), dtype=torch.float32)


def pretrain_speaker_encoder(corpus: Corpus, cfg: ModelConfig, tcfg: TrainingConfig,
                             encoder: SpeakerEncoder | None = None, log_fn=None):
    """Train a speaker encoder with GE2E on N x M batches of random crops.

    Returns ``(encoder, ge2e, losses)``; the encoder comes back frozen.
    """
    n, m = tcfg.spk_speakers, tcfg.spk_utterances
    speakers = [s for s in corpus.train_speakers if len(corpus.train_utterances(s)) >= m]
    if len(speakers) < n:
        raise ValidationError(
            f"need {n} speakers with >= {m} training utterances, corpus has {len(speakers)}")
    torch.manual_seed(tcfg.seed)
    if encoder is None:
        encoder = SpeakerEncoder(cfg)
    ge2e = GE2ELoss()
    encoder.train()
    params = list(encoder.parameters()) + list(ge2e.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=tcfg.spk_learning_rate)
    rng = np.random.default_rng(tcfg.seed)
    shortest = min(len(corpus.mel(u)) for s in speakers for u in corpus.train_utterances(s))
    losses = []
    for step in range(tcfg.spk_steps):
        chosen = rng.choice(len(speakers), size=n, replace=False)
        utts = []
        for k in chosen:
            pool = corpus.train_utterances(speakers[k])
            utts += [pool[i] for i in rng.choice(len(pool), size=m, replace=False)]
        frames = int(rng.integers(min(32, shortest), shortest + 1))
        batch = _crop_batch(corpus, utts, frames, rng)
        emb = encoder(batch).reshape(n, m, -1)
        loss = ge2e(emb)
        opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(encoder.parameters(), 3.0)
        opt.step()
        losses.append(loss.item())
        if log_fn is not None:
            log_fn(step, loss.item())
        if step % 100 == 0:
            log.info("ge2e step %d loss %.4f", step, loss.item())
    freeze(encoder)
    return encoder, ge2e, losses


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module
