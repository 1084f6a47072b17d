"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"VCDZ"  u32 version (=1)  u32 tensor_count
    per tensor: u32 name_len, name (UTF-8), u8 dtype (0 = float32), u8 rank,
                rank x u64 dims, raw values
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import (BadMagicError, CheckpointError, TruncatedCheckpointError,
                     VersionMismatchError)

MAGIC = b"VCDZ"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}
DTYPE_CODES = {np.dtype("<f4"): 0}


def encode(tensors) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.array(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"truncated while reading {what}: need {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data)
    if len(data) < 4 or r.take(4, "magic") != MAGIC:
        raise BadMagicError("not a VCDZ checkpoint (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    out: dict[str, np.ndarray] = {}
    for k in range(count):
        (name_len,) = r.unpack("<I", f"name length of tensor {k}")
        try:
            name = r.take(name_len, f"name of tensor {k}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"tensor {k}: name is not UTF-8") from exc
        code, rank = r.unpack("<BB", f"dtype/rank of {name}")
        if code not in DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        dtype = DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize if rank else dtype.itemsize
        raw = r.take(n_bytes, f"values of {name}")
        out[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors) -> None:
    Path(path).write_bytes(encode(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


# --- model <-> checkpoint -----------------------------------------------------

def model_tensors(model, groups=None) -> dict[str, torch.Tensor]:
    from .model import GROUPS
    groups = GROUPS if groups is None else groups
    out = {}
    for group in groups:
        for name, t in getattr(model, group).state_dict().items():
            out[f"{group}.{name}"] = t
    out["meta.trained_steps"] = torch.tensor(float(model.trained_steps))
    return out


@dataclass
class LoadReport:
    loaded: tuple[str, ...]
    initialized: tuple[str, ...]

    def __str__(self):
        return (f"loaded groups: {', '.join(self.loaded) or '-'}; "
                f"from initializer: {', '.join(self.initialized) or '-'}")


def apply_checkpoint(model, tensors: dict[str, np.ndarray]) -> LoadReport:
    """Load every parameter group present in ``tensors``; other groups keep their init.

    A group must be complete; partial groups and unknown names are errors.
    """
    from .model import GROUPS
    known = set(GROUPS) | {"meta"}
    unknown = sorted({n.split(".", 1)[0] for n in tensors} - known)
    if unknown:
        raise CheckpointError(f"unknown parameter groups: {', '.join(unknown)}")
    loaded, initialized = [], []
    for group in GROUPS:
        module = getattr(model, group)
        prefix = group + "."
        part = {n[len(prefix):]: v for n, v in tensors.items() if n.startswith(prefix)}
        if not part:
            initialized.append(group)
            continue
        expected = module.state_dict()
        missing = sorted(set(expected) - set(part))
        extra = sorted(set(part) - set(expected))
        if missing or extra:
            raise CheckpointError(f"group {group}: missing {missing[:3]}, unexpected {extra[:3]}")
        state = {}
        for name, ref in expected.items():
            value = part[name]
            if tuple(value.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"{group}.{name}: shape {value.shape} does not match model {tuple(ref.shape)}")
            state[name] = torch.from_numpy(value.copy()).to(ref.dtype)
        module.load_state_dict(state)
        loaded.append(group)
    if "meta.trained_steps" in tensors:
        model.trained_steps = int(tensors["meta.trained_steps"])
    model.loaded_groups = tuple(loaded)
    return LoadReport(tuple(loaded), tuple(initialized))
