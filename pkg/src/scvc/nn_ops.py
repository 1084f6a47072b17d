"""Differentiable building blocks and a finite-difference gradient checker.

Sequences are laid out ``(batch, time, features)`` throughout. Autograd is
provided by torch; the ops here fix the conventions the models rely on
(tie-breaking in pooling, row-stochastic attention, batch-norm statistics
that can be frozen for re-encoding passes).
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError, ValidationError


@dataclass
class AttentionOutput:
    context: torch.Tensor
    weights: torch.Tensor


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> AttentionOutput:
    """softmax(q kᵀ / √d_k) v over the last two axes (..., T, d).

    Sums over the key axis run over sorted terms, so permuting the sequence
    permutes the output bit-exactly. Costs O(T² d) memory.
    """
    if q.shape[-2] != k.shape[-2] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"sequence lengths differ: q={q.shape[-2]}, k={k.shape[-2]}, v={v.shape[-2]}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key widths differ: {q.shape[-1]} vs {k.shape[-1]}")
    scores = (q.unsqueeze(-2) * k.unsqueeze(-3)).sum(-1) / math.sqrt(q.shape[-1])
    e = torch.exp(scores - scores.amax(dim=-1, keepdim=True).detach())
    weights = e / e.sort(dim=-1).values.sum(dim=-1, keepdim=True)
    terms = weights.unsqueeze(-1) * v.unsqueeze(-3)  # (..., T_q, T_k, d_v)
    return AttentionOutput(terms.sort(dim=-2).values.sum(dim=-2), weights)


def max_pool_time(x: torch.Tensor, window: int = 32, stride: int | None = None) -> torch.Tensor:
    """Non-overlapping max over time windows; trailing remainder frames are dropped.

    Gradient goes to the arg-max frame of each window, the first one on ties.
    """
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValidationError("window and stride must be >= 1")
    if window != stride:
        raise ValidationError("only non-overlapping pooling (window == stride) is supported")
    n_out = x.shape[-2] // stride
    trimmed = x[..., :n_out * stride, :]
    blocks = trimmed.reshape(*x.shape[:-2], n_out, stride, x.shape[-1])
    idx = blocks.argmax(dim=-2, keepdim=True)
    return blocks.gather(-2, idx).squeeze(-2)


def repeat_time(x: torch.Tensor, factor: int, length: int) -> torch.Tensor:
    """Repeat each frame ``factor`` times, then truncate or edge-pad to ``length``."""
    out = x.repeat_interleave(factor, dim=-2)
    if out.shape[-2] >= length:
        return out[..., :length, :]
    pad = out[..., -1:, :].expand(*out.shape[:-2], length - out.shape[-2], out.shape[-1])
    return torch.cat([out, pad], dim=-2)


def mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return ((a - b) ** 2).mean()


def l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


class ConvTime(nn.Module):
    """1-D convolution along time with 'same' padding on (B, T, C) input."""

    def __init__(self, in_ch: int, out_ch: int, width: int = 5, bias: bool = True):
        super().__init__()
        if width % 2 != 1:
            raise ValidationError("kernel width must be odd")
        self.conv = nn.Conv1d(in_ch, out_ch, width, padding=width // 2, bias=bias)

    def forward(self, x):
        if x.shape[-1] != self.conv.in_channels:
            raise ShapeError(f"expected {self.conv.in_channels} channels, got {x.shape[-1]}")
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class BatchNorm(nn.Module):
    """Batch norm over (B, T, C) with switchable running-statistic updates.

    In training mode batch statistics normalize the input; the running
    averages are refreshed only while ``update_stats`` is set, so auxiliary
    passes over generated spectrograms leave them untouched.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))
        self.momentum = momentum
        self.eps = eps
        self.update_stats = True

    def forward(self, x):
        if self.training:
            mean = x.mean(dim=(0, 1))
            var = x.var(dim=(0, 1), unbiased=False)
            if self.update_stats:
                with torch.no_grad():
                    n = x.shape[0] * x.shape[1]
                    unbiased = var * n / max(n - 1, 1)
                    self.running_mean.lerp_(mean.to(self.running_mean.dtype), self.momentum)
                    self.running_var.lerp_(unbiased.to(self.running_var.dtype), self.momentum)
        else:
            mean, var = self.running_mean, self.running_var
        return (x - mean) / torch.sqrt(var + self.eps) * self.weight + self.bias


@contextlib.contextmanager
def frozen_bn_stats(*modules: nn.Module):
    bns = [m for mod in modules for m in mod.modules() if isinstance(m, BatchNorm)]
    saved = [bn.update_stats for bn in bns]
    for bn in bns:
        bn.update_stats = False
    try:
        yield
    finally:
        for bn, flag in zip(bns, saved):
            bn.update_stats = flag


class ConvBlock(nn.Module):
    def __init__(self, in_ch, out_ch, width=5, activation="relu"):
        super().__init__()
        self.conv = ConvTime(in_ch, out_ch, width)
        self.norm = BatchNorm(out_ch)
        self.activation = activation

    def forward(self, x):
        x = self.norm(self.conv(x))
        if self.activation == "relu":
            return torch.relu(x)
        if self.activation == "tanh":
            return torch.tanh(x)
        return x


class LSTM(nn.Module):
    """Stacked (optionally bidirectional) LSTM over (B, T, C).

    Per direction and step::

        i = σ(W_i x + U_i h + b_i)      f = σ(W_f x + U_f h + b_f)
        g = tanh(W_g x + U_g h + b_g)   o = σ(W_o x + U_o h + b_o)
        c' = f ⊙ c + i ⊙ g              h' = o ⊙ tanh(c')

    Bidirectional output concatenates the forward and backward hidden
    states of each frame, forward first.
    """

    def __init__(self, in_dim: int, hidden: int, layers: int = 1, bidirectional: bool = False):
        super().__init__()
        self.rnn = nn.LSTM(in_dim, hidden, num_layers=layers, batch_first=True,
                           bidirectional=bidirectional)

    @property
    def out_dim(self):
        return self.rnn.hidden_size * (2 if self.rnn.bidirectional else 1)

    def forward(self, x):
        if x.shape[-1] != self.rnn.input_size:
            raise ShapeError(f"expected {self.rnn.input_size} features, got {x.shape[-1]}")
        out, _ = self.rnn(x)
        return out


def lstm_forward(x, lstm: LSTM):
    return lstm(x)


def blstm_forward(x, lstm: LSTM):
    if not lstm.rnn.bidirectional:
        raise ValidationError("blstm_forward needs a bidirectional LSTM")
    return lstm(x)


class SelfAttention(nn.Module):
    """Single-head scaled dot-product self-attention with learned projections."""

    def __init__(self, dim: int, residual: bool = False):
        super().__init__()
        self.query = nn.Linear(dim, dim, bias=False)
        self.key = nn.Linear(dim, dim, bias=False)
        self.value = nn.Linear(dim, dim, bias=False)
        self.residual = residual

    def forward(self, x, weights: torch.Tensor | None = None) -> AttentionOutput:
        if weights is None:
            out = scaled_dot_attention(self.query(x), self.key(x), self.value(x))
        else:
            out = AttentionOutput(weights @ self.value(x), weights)
        if self.residual:
            out.context = out.context + x
        return out


# --- gradient checking -------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    entries_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} max_rel_err={self.max_rel_error:.3e} "
                f"max_abs_err={self.max_abs_error:.3e} entries={self.entries_checked}")


def finite_diff_check(op, inputs, tolerance: float = 1e-5, *, step: float = 5e-5,
                      params=(), max_entries: int | None = None, seed: int = 0,
                      floor: float = 1e-3, refinements: int = 3) -> GradCheckReport:
    """Compare autograd against Richardson-extrapolated central differences.

    ``op(*inputs)`` may return any tensor; it is contracted with a fixed
    random projection so every output entry contributes. Gradients are
    checked for ``inputs`` and for ``params`` (tensors the op reads through
    a closure). The relative error of an entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    ``max_entries`` subsamples large tensors.

    The numeric derivative combines central differences at ``h`` and
    ``h / 2`` as ``(4 D(h/2) - D(h)) / 3``, which cancels the ``h^2``
    truncation term. Starting from ``h = step``, the step is halved (at most
    ``refinements`` times) while ``D(h)`` and ``D(h/2)`` disagree by more than
    ``tolerance``. A disagreement that large means a ReLU or max-pool kink
    lies within ``h`` of the point, and the pair that agrees best is used.
    """
    gen = torch.Generator().manual_seed(seed)
    inputs = [t.detach().clone().to(torch.float64).requires_grad_(True) for t in inputs]
    params = list(params)
    for p in params:
        if p.dtype != torch.float64:
            raise ValidationError("finite_diff_check needs float64 parameters")

    with torch.no_grad():
        probe = op(*inputs)
    projection = torch.randn(probe.shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (op(*inputs) * projection).sum()

    def central(flat, pos, orig, h):
        flat[pos] = orig + h
        up = op(*inputs)
        flat[pos] = orig - h
        down = op(*inputs)
        flat[pos] = orig
        # difference before projecting: avoids cancelling two large sums
        return ((up - down) * projection).sum().item() / (2 * h)

    def derivative(flat, pos, orig):
        h = step
        coarse = central(flat, pos, orig, h)
        best = None
        for _ in range(refinements + 1):
            fine = central(flat, pos, orig, h / 2)
            gap = abs(fine - coarse)
            if best is None or gap < best[0]:
                best = (gap, (4 * fine - coarse) / 3)
            if gap <= tolerance * max(abs(fine), floor):
                break
            h, coarse = h / 2, fine
        return best[1]

    targets = inputs + params
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(True)
    for t in targets:
        t.grad = None
    try:
        scalar().backward()
        analytic = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t)
                    for t in targets]
        worst_rel = worst_abs = 0.0
        count = 0
        with torch.no_grad():
            for t, grad in zip(targets, analytic):
                flat = t.view(-1)
                positions = range(flat.numel())
                if max_entries is not None and flat.numel() > max_entries:
                    positions = torch.randperm(flat.numel(), generator=gen)[:max_entries].tolist()
                for pos in positions:
                    orig = flat[pos].item()
                    numeric = derivative(flat, pos, orig)
                    a = grad.view(-1)[pos].item()
                    err = abs(a - numeric)
                    worst_abs = max(worst_abs, err)
                    worst_rel = max(worst_rel, err / max(abs(a), abs(numeric), floor))
                    count += 1
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)
            p.grad = None
    return GradCheckReport(worst_rel, worst_abs, count, tolerance)
