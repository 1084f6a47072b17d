"""Waveform I/O, log-mel analysis and Griffin-Lim inversion.

Framing follows a 64 ms window and a 16 ms hop at 16 kHz (1024 / 256
samples). Frames are taken strictly inside the signal: no centering, no
padding, so ``T = 1 + (N - win) // hop``.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import TooShortError, ValidationError

SAMPLE_RATE = 16000
N_MELS = 80
HOP_MS = 16
WIN_MS = 64
LOG_EPS = 1e-5


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise ValidationError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("waveform contains non-finite samples")
        if np.max(np.abs(samples)) > 1.0:
            raise ValidationError("waveform samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray
    hop_ms: int = HOP_MS
    win_ms: int = WIN_MS
    sample_rate: int = field(default=SAMPLE_RATE, compare=False)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[1] != N_MELS:
            raise ValidationError(f"mel frames must be T x {N_MELS}, got {frames.shape}")
        if frames.shape[0] < 1:
            raise ValidationError("mel spectrogram must have at least one frame")
        if not np.all(np.isfinite(frames)):
            raise ValidationError("mel spectrogram contains non-finite entries")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return self.frames.shape[0]


def frame_params(sample_rate: int = SAMPLE_RATE) -> tuple[int, int]:
    """Window and hop in samples for the fixed 64 ms / 16 ms framing."""
    return sample_rate * WIN_MS // 1000, sample_rate * HOP_MS // 1000


def num_frames(n_samples: int, win: int, hop: int) -> int:
    return 1 + (n_samples - win) // hop


@lru_cache(maxsize=8)
def hann_window(n: int) -> np.ndarray:
    # periodic Hann: squared copies at 75% overlap sum to a constant
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    window.setflags(write=False)
    return window


def _frames(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n_frames = num_frames(x.size, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(samples: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Complex STFT, frames x (win // 2 + 1)."""
    samples = np.asarray(samples, dtype=np.float64)
    if hop < 1:
        raise ValidationError("hop must be >= 1")
    if win < 1 or samples.size < win:
        raise TooShortError(
            f"signal too short: {samples.size} samples < window of {win}")
    return np.fft.rfft(_frames(samples, win, hop) * hann_window(win), axis=1)


def istft(spec: np.ndarray, win: int, hop: int) -> np.ndarray:
    """Least-squares inverse of :func:`stft` (weighted overlap-add)."""
    n_frames = spec.shape[0]
    length = (n_frames - 1) * hop + win
    window = hann_window(win)
    chunks = np.fft.irfft(spec, n=win, axis=1) * window
    out = np.zeros(length)
    norm = np.zeros(length)
    for t in range(n_frames):
        out[t * hop:t * hop + win] += chunks[t]
        norm[t * hop:t * hop + win] += window ** 2
    nonzero = norm > 1e-10
    out[nonzero] /= norm[nonzero]
    out[~nonzero] = 0.0
    return out


def stft_magnitude(w: Waveform, win_samples: int, hop_samples: int) -> np.ndarray:
    return np.abs(stft(w.samples, win_samples, hop_samples))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int = N_MELS, fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """The n_mels + 2 break points (Hz); band k spans edges[k]..edges[k + 2]."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int = SAMPLE_RATE, n_fft: int = 1024,
                   n_mels: int = N_MELS, fmin: float = 0.0,
                   fmax: float = 8000.0) -> np.ndarray:
    """Triangular filters on the HTK mel scale, each row summing to one."""
    edges = mel_band_edges(n_mels, fmin, fmax)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    area = fb.sum(axis=1, keepdims=True)
    if np.any(area <= 0):
        raise ValidationError("mel filterbank has an empty band; increase n_fft")
    fb = fb / area
    fb.setflags(write=False)
    return fb


def mel_spectrogram(w: Waveform) -> MelSpectrogram:
    win, hop = frame_params(w.sample_rate)
    power = stft_magnitude(w, win, hop) ** 2
    fb = mel_filterbank(w.sample_rate, win, N_MELS, 0.0, w.sample_rate / 2)
    return MelSpectrogram(np.log(power @ fb.T + LOG_EPS), sample_rate=w.sample_rate)


def mel_to_linear_magnitude(m: MelSpectrogram) -> np.ndarray:
    """Pseudo-inverse of the filterbank applied to mel power, clamped at zero."""
    win, _ = frame_params(m.sample_rate)
    fb = mel_filterbank(m.sample_rate, win, N_MELS, 0.0, m.sample_rate / 2)
    mel_power = np.maximum(np.exp(m.frames) - LOG_EPS, 0.0)
    power = np.maximum(mel_power @ np.linalg.pinv(fb).T, 0.0)
    return np.sqrt(power)


def spectral_convergence(estimate: np.ndarray, target: np.ndarray) -> float:
    denom = np.linalg.norm(target)
    return float(np.linalg.norm(estimate - target) / max(denom, 1e-12))


def mel_spectral_distance(estimate: MelSpectrogram, target: MelSpectrogram) -> float:
    """Spectral convergence between mel magnitudes (square roots of mel power)."""
    n = min(len(estimate), len(target))
    est = np.sqrt(np.exp(estimate.frames[:n]))
    ref = np.sqrt(np.exp(target.frames[:n]))
    return spectral_convergence(est, ref)


def griffin_lim(magnitude: np.ndarray, win: int, hop: int, iters: int,
                seed: int = 0) -> tuple[np.ndarray, list[float]]:
    """Phase reconstruction; returns the signal and per-iteration spectral convergence."""
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if not np.all(np.isfinite(magnitude)):
        raise ValidationError("magnitude contains non-finite entries")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    signal = istft(magnitude * phase, win, hop)
    errors = []
    for _ in range(iters):
        rebuilt = stft(signal, win, hop)
        errors.append(spectral_convergence(np.abs(rebuilt), magnitude))
        phase = np.exp(1j * np.angle(rebuilt))
        signal = istft(magnitude * phase, win, hop)
    return signal, errors


def griffin_lim_invert(m: MelSpectrogram, iters: int = 60, seed: int = 0) -> Waveform:
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    win, hop = frame_params(m.sample_rate)
    signal, _ = griffin_lim(mel_to_linear_magnitude(m), win, hop, iters, seed)
    return Waveform(np.clip(signal, -1.0, 1.0), m.sample_rate)


def read_wav(path) -> Waveform:
    """Read 16-bit signed PCM mono WAV at 16 kHz."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            if fh.getcomptype() != "NONE":
                raise ValidationError(f"{path}: compressed WAV is not supported")
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise ValidationError(f"{path}: not a PCM RIFF/WAVE file ({exc})") from exc
    if channels != 1:
        raise ValidationError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise ValidationError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise ValidationError(f"{path}: sample rate {rate} Hz, only {SAMPLE_RATE} Hz is accepted")
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise ValidationError(f"{path}: no audio frames")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())
