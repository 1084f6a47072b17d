"""Corpus ingestion, the synthetic two-factor corpus, and triple sampling.

The synthetic corpus gives every speaker a fixed spectral envelope made of
two resonance peaks, while each utterance carries a random sequence of
"content" symbols rendered as harmonic tones. Speaker and content are drawn
from separate random streams, so the two factors are independent by
construction and the content sequence of a given utterance slot does not
depend on which speaker it is rendered for.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import (SAMPLE_RATE, MelSpectrogram, Waveform, mel_spectrogram,
                    read_wav, write_wav)
from .errors import ValidationError

log = logging.getLogger(__name__)

NUM_SYMBOLS = 12
F0_LOW, F0_HIGH = 110.0, 440.0
FADE_SEC = 0.005
NOISE_STD = 1e-3
TARGET_RMS = 0.1


def symbol_f0(symbol: int) -> float:
    """Fundamental (Hz) of a content symbol; 12 steps on a log grid 110-440 Hz."""
    return F0_LOW * (F0_HIGH / F0_LOW) ** (symbol / (NUM_SYMBOLS - 1))


@dataclass(frozen=True)
class SpeakerVoice:
    formants: tuple[float, float]
    bandwidths: tuple[float, float]
    gains: tuple[float, float]
    floor: float = 0.03

    def envelope(self, freqs) -> np.ndarray:
        freqs = np.asarray(freqs, dtype=np.float64)
        env = np.full(freqs.shape, self.floor)
        for fc, bw, g in zip(self.formants, self.bandwidths, self.gains):
            env = env + g / (1.0 + ((freqs - fc) / bw) ** 2)
        return env


@dataclass(frozen=True)
class Utterance:
    uid: str
    speaker: str
    path: Path | None = None
    waveform: Waveform | None = field(default=None, repr=False, compare=False)
    content: tuple[int, ...] | None = None
    boundaries: tuple[int, ...] | None = None

    def load(self) -> Waveform:
        if self.waveform is not None:
            return self.waveform
        if self.path is None:
            raise ValidationError(f"utterance {self.uid} has neither audio nor a path")
        return read_wav(self.path)


@dataclass
class Corpus:
    """Speakers, their utterances, and the train/eval assignment.

    ``unseen`` speakers are excluded from training entirely; ``eval_uids``
    are held-out utterances of the seen speakers.
    """

    speakers: list[str]
    utterances: dict[str, list[Utterance]]
    unseen: frozenset[str] = frozenset()
    eval_uids: frozenset[str] = frozenset()
    voices: dict[str, SpeakerVoice] | None = None
    _mels: dict[str, MelSpectrogram] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if len(self.speakers) == 0:
            raise ValidationError("no speakers")
        for spk in self.train_speakers:
            if len(self.train_utterances(spk)) < 2:
                raise ValidationError(
                    f"speaker {spk} has fewer than 2 training utterances")

    @property
    def train_speakers(self) -> list[str]:
        return [s for s in self.speakers if s not in self.unseen]

    def train_utterances(self, speaker: str) -> list[Utterance]:
        if speaker in self.unseen:
            return []
        return [u for u in self.utterances[speaker] if u.uid not in self.eval_uids]

    def eval_utterances(self, speaker: str) -> list[Utterance]:
        if speaker in self.unseen:
            return list(self.utterances[speaker])
        return [u for u in self.utterances[speaker] if u.uid in self.eval_uids]

    def all_utterances(self) -> list[Utterance]:
        return [u for s in self.speakers for u in self.utterances[s]]

    def mel(self, utt: Utterance) -> MelSpectrogram:
        cached = self._mels.get(utt.uid)
        if cached is None:
            cached = self._mels[utt.uid] = mel_spectrogram(utt.load())
        return cached


@dataclass(frozen=True)
class TrainTriple:
    x_iA: MelSpectrogram
    x_jA: MelSpectrogram
    x_B: MelSpectrogram
    speaker_A: str
    speaker_B: str
    uid_i: str = ""
    uid_j: str = ""
    uid_B: str = ""

    def __post_init__(self):
        if self.speaker_A == self.speaker_B:
            raise ValidationError("x_B must come from a different speaker than x_iA")
        if self.uid_i and self.uid_i == self.uid_j:
            raise ValidationError("x_iA and x_jA must be distinct utterances")


# --- splitting ---------------------------------------------------------------

def split_corpus(speakers, utterances, *, unseen_speakers: int, eval_fraction: float,
                 seed: int) -> tuple[frozenset, frozenset]:
    rng = np.random.default_rng(seed)
    if unseen_speakers < 0 or unseen_speakers > len(speakers) - 2:
        raise ValidationError(
            f"cannot hold out {unseen_speakers} of {len(speakers)} speakers "
            "and keep at least 2 for training")
    picked = rng.choice(len(speakers), size=unseen_speakers, replace=False)
    unseen = frozenset(speakers[i] for i in sorted(picked))
    eval_uids = set()
    for spk in speakers:
        if spk in unseen:
            continue
        utts = utterances[spk]
        n_eval = min(int(round(eval_fraction * len(utts))), max(len(utts) - 2, 0))
        for k in sorted(rng.choice(len(utts), size=n_eval, replace=False)):
            eval_uids.add(utts[k].uid)
    return unseen, frozenset(eval_uids)


@dataclass
class RejectionReport:
    rejected: list[tuple[str, str]] = field(default_factory=list)

    def __bool__(self):
        return bool(self.rejected)

    def __str__(self):
        return "\n".join(f"{path}\t{reason}" for path, reason in self.rejected)


def load_corpus(root, *, unseen_speakers: int = 10, eval_fraction: float = 0.1,
                seed: int = 0, strict: bool = False) -> tuple[Corpus, RejectionReport]:
    """Read ``root/<speaker>/*.wav``.

    Files that cannot be ingested are listed in the returned report rather
    than skipped silently; ``strict`` turns any rejection into an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"{root}: not a directory")
    report = RejectionReport()
    utterances: dict[str, list[Utterance]] = {}
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        accepted = []
        for path in sorted(spk_dir.iterdir()):
            if path.suffix.lower() != ".wav":
                report.rejected.append((str(path), "not a .wav file"))
                continue
            try:
                read_wav(path)
            except ValidationError as exc:
                report.rejected.append((str(path), str(exc)))
                continue
            accepted.append(Utterance(f"{spk_dir.name}/{path.stem}", spk_dir.name, path=path))
        if len(accepted) < 2:
            report.rejected.append((str(spk_dir), f"only {len(accepted)} usable utterances"))
            continue
        utterances[spk_dir.name] = accepted
    if not utterances:
        raise ValidationError(f"{root}: no speakers")
    if strict and report:
        raise ValidationError(f"rejected files:\n{report}")
    speakers = sorted(utterances)
    unseen, eval_uids = split_corpus(speakers, utterances, unseen_speakers=unseen_speakers,
                                     eval_fraction=eval_fraction, seed=seed)
    return Corpus(speakers, utterances, unseen, eval_uids), report


# --- synthetic corpus ---------------------------------------------------------

def _draw_voices(rng: np.random.Generator, n: int) -> list[SpeakerVoice]:
    # rejection-sample so that no two speakers share nearly the same envelope
    voices: list[SpeakerVoice] = []
    while len(voices) < n:
        f1 = float(np.exp(rng.uniform(np.log(250.0), np.log(900.0))))
        f2 = float(np.exp(rng.uniform(np.log(1100.0), np.log(3200.0))))
        bw = (float(rng.uniform(60.0, 140.0)), float(rng.uniform(120.0, 300.0)))
        gains = (1.0, float(rng.uniform(0.4, 1.0)))
        too_close = any(
            abs(np.log(f1 / v.formants[0])) < 0.12 and abs(np.log(f2 / v.formants[1])) < 0.12
            for v in voices)
        if not too_close:
            voices.append(SpeakerVoice((f1, f2), bw, gains))
    return voices


def _draw_content(rng: np.random.Generator) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Symbol sequence and segment boundaries (sample offsets) for one utterance."""
    n_samples = int(rng.integers(SAMPLE_RATE, 3 * SAMPLE_RATE + 1))
    n_seg = int(rng.integers(5, 16))
    symbols = tuple(int(s) for s in rng.integers(0, NUM_SYMBOLS, size=n_seg))
    weights = rng.uniform(0.5, 1.5, size=n_seg)
    cuts = np.round(np.cumsum(weights) / weights.sum() * n_samples).astype(int)
    boundaries = (0,) + tuple(int(c) for c in cuts[:-1]) + (n_samples,)
    return symbols, boundaries


def render_utterance(voice: SpeakerVoice, symbols, boundaries, noise_rng: np.random.Generator,
                     sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    n = boundaries[-1]
    out = np.zeros(n)
    fade = int(FADE_SEC * sample_rate)
    for sym, start, stop in zip(symbols, boundaries[:-1], boundaries[1:]):
        t = np.arange(stop - start) / sample_rate
        f0 = symbol_f0(sym)
        harmonics = f0 * np.arange(1, int(0.48 * sample_rate / f0) + 1)
        amps = voice.envelope(harmonics)
        seg = (amps[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t[None, :])).sum(axis=0)
        ramp = np.ones(seg.size)
        k = min(fade, seg.size // 2)
        if k:
            edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
            ramp[:k] = edge
            ramp[-k:] = edge[::-1]
        out[start:stop] = seg * ramp
    out *= TARGET_RMS / np.sqrt(np.mean(out ** 2))
    out += NOISE_STD * noise_rng.standard_normal(n)
    peak = np.max(np.abs(out))
    if peak > 0.99:
        out *= 0.99 / peak
    return out


def synth_corpus(num_speakers: int = 8, utts_per_speaker: int = 20, seed: int = 0, *,
                 eval_fraction: float = 0.1, unseen_speakers: int = 0) -> Corpus:
    if num_speakers < 2:
        raise ValidationError("num_speakers must be >= 2")
    if utts_per_speaker < 2:
        raise ValidationError("utts_per_speaker must be >= 2")
    voice_ss, content_ss, noise_ss, split_ss = np.random.SeedSequence(seed).spawn(4)
    voices = _draw_voices(np.random.default_rng(voice_ss), num_speakers)
    content_rng = np.random.default_rng(content_ss)
    noise_rng = np.random.default_rng(noise_ss)
    speakers = [f"spk{k:02d}" for k in range(num_speakers)]
    utterances = {}
    for spk, voice in zip(speakers, voices):
        utts = []
        for u in range(utts_per_speaker):
            symbols, boundaries = _draw_content(content_rng)
            samples = render_utterance(voice, symbols, boundaries, noise_rng)
            utts.append(Utterance(f"{spk}/utt{u:03d}", spk, waveform=Waveform(samples),
                                  content=symbols, boundaries=boundaries))
        utterances[spk] = utts
    split_seed = int(np.random.default_rng(split_ss).integers(2 ** 31))
    unseen, eval_uids = split_corpus(speakers, utterances, unseen_speakers=unseen_speakers,
                                     eval_fraction=eval_fraction, seed=split_seed)
    return Corpus(speakers, utterances, unseen, eval_uids, voices=dict(zip(speakers, voices)))


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Materialize WAV files plus a tab-separated manifest (path, speaker, symbols)."""
    out_dir = Path(out_dir)
    lines = []
    for utt in corpus.all_utterances():
        rel = Path(utt.uid + ".wav")
        (out_dir / rel).parent.mkdir(parents=True, exist_ok=True)
        write_wav(out_dir / rel, utt.load())
        symbols = " ".join(str(s) for s in utt.content) if utt.content is not None else ""
        lines.append(f"{rel.as_posix()}\t{utt.speaker}\t{symbols}")
    manifest = out_dir / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


# --- triple sampling ---------------------------------------------------------

class TripleSampler:
    """Draws TrainTriples uniformly over all valid (A, i, j, B, b) combinations.

    Holds its own generator, so independent samplers never share state.
    """

    def __init__(self, corpus: Corpus, seed: int = 0):
        self.corpus = corpus
        self.rng = np.random.default_rng(seed)
        self.speakers = corpus.train_speakers
        if len(self.speakers) < 2:
            raise ValidationError("need at least 2 training speakers")
        self.pools = [corpus.train_utterances(s) for s in self.speakers]
        sizes = np.array([len(p) for p in self.pools], dtype=np.float64)
        if np.any(sizes < 2):
            raise ValidationError("every training speaker needs >= 2 utterances")
        weights = sizes * (sizes - 1) * (sizes.sum() - sizes)
        self.speaker_probs = weights / weights.sum()
        self.others = [[u for q, p in enumerate(self.pools) if q != k for u in p]
                       for k in range(len(self.pools))]

    def draw_utterances(self) -> tuple[Utterance, Utterance, Utterance]:
        a = int(self.rng.choice(len(self.speakers), p=self.speaker_probs))
        i, j = self.rng.choice(len(self.pools[a]), size=2, replace=False)
        b = int(self.rng.integers(len(self.others[a])))
        return self.pools[a][i], self.pools[a][j], self.others[a][b]

    def __call__(self) -> TrainTriple:
        ui, uj, ub = self.draw_utterances()
        mel = self.corpus.mel
        return TrainTriple(mel(ui), mel(uj), mel(ub), ui.speaker, ub.speaker,
                           ui.uid, uj.uid, ub.uid)


def sample_triple(corpus: Corpus, sampler_or_seed: TripleSampler | int = 0) -> TrainTriple:
    sampler = (sampler_or_seed if isinstance(sampler_or_seed, TripleSampler)
               else TripleSampler(corpus, sampler_or_seed))
    return sampler()
