"""Objective evaluation: probe leakage and conversion-direction metrics.

A probe is a linear softmax classifier (optionally a one-hidden-layer MLP)
trained on frozen features. Leakage of speaker identity into the content
codes is measured by how well a probe recovers the speaker from
time-averaged codes; conversion quality by how often a probe trained on
real utterances recognizes the *target* speaker in converted speech.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import Corpus, Utterance
from .errors import ValidationError
from .model import VoiceConverter


@dataclass(frozen=True)
class ProbeReport:
    accuracy: float
    chance: float
    num_eval: int

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValidationError("accuracy must lie in [0, 1]")
        if self.num_eval <= 0:
            raise ValidationError("num_eval must be positive")

    def summary(self, prefix: str) -> dict[str, float]:
        return {f"{prefix}_accuracy": self.accuracy, f"{prefix}_chance": self.chance,
                f"{prefix}_num_eval": self.num_eval}


class Probe:
    """Standardize → (linear | MLP) → softmax over the training classes."""

    def __init__(self, classes, mean, std, net: nn.Module):
        self.classes = list(classes)
        self.mean = mean
        self.std = std
        self.net = net

    def logits(self, features) -> torch.Tensor:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        with torch.no_grad():
            return self.net(torch.as_tensor(x, dtype=torch.float64))

    def predict(self, features) -> list:
        idx = self.logits(features).argmax(dim=-1).tolist()
        return [self.classes[i] for i in idx]

    def report(self, features, labels) -> ProbeReport:
        labels = list(labels)
        if not labels:
            raise ValidationError("empty evaluation set")
        pred = self.predict(features)
        acc = float(np.mean([p == y for p, y in zip(pred, labels)]))
        return ProbeReport(acc, 1.0 / len(self.classes), len(labels))


def stratified_split(labels, holdout_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (train, held_out); every class keeps >= 1 training example."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    train, held = [], []
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_held = min(int(round(holdout_fraction * idx.size)), idx.size - 1)
        held += idx[:n_held].tolist()
        train += idx[n_held:].tolist()
    return np.array(sorted(train), dtype=int), np.array(sorted(held), dtype=int)


def fit_probe(features, labels, *, steps: int = 300, kind: str = "linear",
              weight_decay: float = 1e-2, lr: float = 0.05, hidden: int = 64,
              seed: int = 0) -> Probe:
    """Full-batch Adam on the cross-entropy of all given examples."""
    x = np.asarray(features, dtype=np.float64)
    labels = list(labels)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValidationError("probe needs at least two classes")
    mean = x.mean(axis=0)
    std = x.std(axis=0) + 1e-8
    xt = torch.as_tensor((x - mean) / std, dtype=torch.float64)
    y = torch.as_tensor([classes.index(v) for v in labels])
    torch.manual_seed(seed)
    if kind == "linear":
        net = nn.Linear(x.shape[1], len(classes))
    elif kind == "mlp":
        net = nn.Sequential(nn.Linear(x.shape[1], hidden), nn.ReLU(),
                            nn.Linear(hidden, len(classes)))
    else:
        raise ValidationError(f"unknown probe kind {kind!r}")
    net = net.double()
    opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(steps):
        opt.zero_grad()
        loss = nn.functional.cross_entropy(net(xt), y)
        loss.backward()
        opt.step()
    net.eval()
    return Probe(classes, mean, std, net)


def train_probe(features, labels, steps: int = 300, *, holdout_fraction: float = 0.5,
                seed: int = 0, **kwargs) -> tuple[Probe, ProbeReport]:
    """Reserve a stratified held-out split, fit on the rest, report held-out accuracy."""
    labels = list(labels)
    if len(set(labels)) < 2:
        raise ValidationError("probe needs at least two classes")
    features = np.asarray(features, dtype=np.float64)
    tr, ho = stratified_split(labels, holdout_fraction, seed)
    if ho.size == 0:
        raise ValidationError("held-out split is empty")
    probe = fit_probe(features[tr], [labels[i] for i in tr], steps=steps, seed=seed, **kwargs)
    return probe, probe.report(features[ho], [labels[i] for i in ho])


# --- feature extraction ------------------------------------------------------

def seen_utterances(corpus: Corpus) -> list[Utterance]:
    return [u for s in corpus.train_speakers for u in corpus.utterances[s]]


def speaker_features(model: VoiceConverter, corpus: Corpus, utts) -> np.ndarray:
    return np.stack([model.embed_utterance(corpus.mel(u)).double().numpy() for u in utts])


def content_features(model: VoiceConverter, corpus: Corpus, utts) -> np.ndarray:
    """Time-averaged content codes, each conditioned on its own utterance's embedding."""
    model.eval()
    feats = []
    with torch.no_grad():
        for u in utts:
            mel = model._mel_tensor(corpus.mel(u))
            spk = model.embed(mel)
            codes = model.content_encoder(mel, spk)[0]
            feats.append(codes.mean(dim=0).double().numpy())
    return np.stack(feats)


def speaker_probe(model, corpus, *, steps=300, seed=0, holdout_fraction=0.5, kind="linear"):
    utts = seen_utterances(corpus)
    return train_probe(speaker_features(model, corpus, utts), [u.speaker for u in utts],
                       steps, holdout_fraction=holdout_fraction, seed=seed, kind=kind)


def content_probe(model, corpus, *, steps=300, seed=0, holdout_fraction=0.5, kind="linear"):
    utts = seen_utterances(corpus)
    return train_probe(content_features(model, corpus, utts), [u.speaker for u in utts],
                       steps, holdout_fraction=holdout_fraction, seed=seed, kind=kind)


def mel_mean_probe(corpus, *, steps=300, seed=0, holdout_fraction=0.5):
    """Probe on raw per-utterance mean log-mel vectors (are speakers separable at all?)."""
    utts = seen_utterances(corpus)
    feats = np.stack([corpus.mel(u).frames.mean(axis=0) for u in utts])
    return train_probe(feats, [u.speaker for u in utts], steps,
                       holdout_fraction=holdout_fraction, seed=seed)


# --- conversion evaluation ----------------------------------------------------

@dataclass(frozen=True)
class ConversionPair:
    source: Utterance
    target_ref: Utterance

    @property
    def source_speaker(self):
        return self.source.speaker

    @property
    def target_speaker(self):
        return self.target_ref.speaker


def conversion_pairs(corpus: Corpus, *, identity: bool = False, seed: int = 0,
                     max_pairs: int | None = None) -> list[ConversionPair]:
    """Held-out sources of seen speakers paired with a reference of every other
    seen speaker (or of their own speaker when ``identity``)."""
    rng = np.random.default_rng(seed)
    speakers = corpus.train_speakers
    pairs = []
    for src_spk in speakers:
        for src in corpus.eval_utterances(src_spk):
            targets = [src_spk] if identity else [s for s in speakers if s != src_spk]
            for tgt_spk in targets:
                if identity:
                    ref = src
                else:
                    pool = corpus.eval_utterances(tgt_spk) or corpus.train_utterances(tgt_spk)
                    ref = pool[int(rng.integers(len(pool)))]
                pairs.append(ConversionPair(src, ref))
    if max_pairs is not None and len(pairs) > max_pairs:
        keep = sorted(rng.choice(len(pairs), size=max_pairs, replace=False))
        pairs = [pairs[i] for i in keep]
    return pairs


@dataclass
class PairResult:
    source_uid: str
    target_uid: str
    source_speaker: str
    target_speaker: str
    cos_source: float
    cos_target: float
    predicted: str


@dataclass
class ConversionReport:
    rows: list[PairResult]
    recognition: ProbeReport

    @property
    def direction_fraction(self) -> float:
        return float(np.mean([r.cos_target > r.cos_source for r in self.rows]))

    def table(self) -> str:
        head = "source\ttarget\tsource_speaker\ttarget_speaker\tcos_source\tcos_target\tpredicted"
        lines = [head] + [
            f"{r.source_uid}\t{r.target_uid}\t{r.source_speaker}\t{r.target_speaker}\t"
            f"{r.cos_source:.6f}\t{r.cos_target:.6f}\t{r.predicted}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def summary(self) -> dict[str, float]:
        out = self.recognition.summary("conversion")
        out["direction_fraction"] = self.direction_fraction
        out["num_pairs"] = len(self.rows)
        return out


def reference_probe(model: VoiceConverter, corpus: Corpus, *, steps=300, seed=0) -> Probe:
    """Speaker probe fit on embeddings of real training utterances."""
    utts = [u for s in corpus.train_speakers for u in corpus.train_utterances(s)]
    return fit_probe(speaker_features(model, corpus, utts), [u.speaker for u in utts],
                     steps=steps, seed=seed)


def evaluate_conversions(model: VoiceConverter, corpus: Corpus, pairs, probe: Probe | None = None,
                         *, check_trained: bool = True) -> ConversionReport:
    if not pairs:
        raise ValidationError("empty evaluation set")
    if probe is None:
        probe = reference_probe(model, corpus)
    rows, feats = [], []
    for pair in pairs:
        src_mel = corpus.mel(pair.source)
        src_s = model.embed_utterance(src_mel)
        tgt_s = model.embed_utterance(corpus.mel(pair.target_ref))
        conv = (model.convert(src_mel, src_s, tgt_s) if check_trained
                else model.convert_unchecked(src_mel, src_s, tgt_s))
        out_s = model.embed_utterance(conv)
        feats.append(out_s.double().numpy())
        rows.append(PairResult(pair.source.uid, pair.target_ref.uid, pair.source_speaker,
                               pair.target_speaker, float(out_s @ src_s), float(out_s @ tgt_s), ""))
    predicted = probe.predict(np.stack(feats))
    for row, p in zip(rows, predicted):
        row.predicted = p
    report = probe.report(np.stack(feats), [r.target_speaker for r in rows])
    return ConversionReport(rows, report)


def conversion_speaker_accuracy(model, corpus, pairs, probe=None, **kwargs) -> ProbeReport:
    return evaluate_conversions(model, corpus, pairs, probe, **kwargs).recognition


def embedding_similarity_report(model, corpus, pairs, probe=None, **kwargs) -> ConversionReport:
    return evaluate_conversions(model, corpus, pairs, probe, **kwargs)
