"""Model and training configuration plus the ``key = value`` run-config format."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ValidationError


@dataclass(frozen=True)
class ModelConfig:
    n_mels: int = 80
    d_spk: int = 64
    spk_hidden: int = 64
    enc_channels: int = 512
    d_c: int = 32
    pool: int = 32
    dec_channels: int = 512
    dec_hidden: int = 1024
    dec_layers: int = 3
    postnet_channels: int = 512
    bottleneck: str = "attentive"  # or "sample" (strided frame sampling)
    attention_residual: bool = False
    mel_mean: float = -2.0
    mel_std: float = 3.5

    def __post_init__(self):
        if self.bottleneck not in ("attentive", "sample"):
            raise ValidationError(f"unknown bottleneck {self.bottleneck!r}")
        for name in ("n_mels", "d_spk", "spk_hidden", "enc_channels", "d_c", "pool",
                     "dec_channels", "dec_hidden", "dec_layers", "postnet_channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.mel_std <= 0:
            raise ValidationError("mel_std must be positive")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small dimensions that train on a laptop CPU in minutes."""
        base = dict(enc_channels=64, d_c=8, pool=8, dec_channels=64, dec_hidden=128,
                    dec_layers=1, postnet_channels=64)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class TrainingConfig:
    lambda_scl: float = 0.5
    learning_rate: float = 1e-4
    steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    crop_frames: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    grad_clip: float = 0.0
    pre_mel_loss: bool = False
    debug_checks: bool = False
    freeze_content_encoder: bool = False
    freeze_decoder: bool = False
    # speaker-encoder pretraining
    spk_steps: int = 500
    spk_learning_rate: float = 1e-3
    spk_speakers: int = 8
    spk_utterances: int = 5

    def __post_init__(self):
        if self.lambda_scl < 0:
            raise ValidationError("lambda_scl must be >= 0")
        if self.learning_rate <= 0 or self.spk_learning_rate <= 0:
            raise ValidationError("learning rates must be > 0")
        if self.steps < 0 or self.spk_steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.crop_frames < 1:
            raise ValidationError("crop_frames must be >= 1")
        if self.spk_speakers < 2 or self.spk_utterances < 2:
            raise ValidationError("GE2E batches need >= 2 speakers and >= 2 utterances")

    @classmethod
    def desk(cls, **overrides) -> "TrainingConfig":
        base = dict(learning_rate=1e-3, crop_frames=48)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    training: TrainingConfig = field(default_factory=TrainingConfig.desk)


_SECTIONS = {"model": ModelConfig, "training": TrainingConfig}


def _parse_value(raw: str, kind, key: str):
    raw = raw.strip()
    try:
        if kind is bool or kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
    except ValueError:
        raise ValidationError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def schema() -> dict[str, tuple[str, object]]:
    """Every accepted key mapped to (type name, desk default)."""
    defaults = RunConfig()
    out = {}
    for section, cls in _SECTIONS.items():
        inst = getattr(defaults, section)
        for f in fields(cls):
            out[f"{section}.{f.name}"] = (f.type if isinstance(f.type, str) else f.type.__name__,
                                          getattr(inst, f.name))
    return out


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``section.key = value`` lines; ``#`` starts a comment.

    Unknown keys and malformed lines are rejected.
    """
    known = schema()
    values: dict[str, dict] = {s: {} for s in _SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
        section, name = key.split(".", 1)
        values[section][name] = _parse_value(raw, known[key][0], f"{source}:{lineno}: {key}")
    defaults = RunConfig()
    return RunConfig(
        model=dataclasses.replace(defaults.model, **values["model"]),
        training=dataclasses.replace(defaults.training, **values["training"]),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    return parse_run_config(path.read_text(encoding="utf-8"), str(path))


def dump_run_config(cfg: RunConfig) -> str:
    lines = []
    for section in _SECTIONS:
        inst = getattr(cfg, section)
        for f in fields(inst):
            value = getattr(inst, f.name)
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{section}.{f.name} = {value}")
    return "\n".join(lines) + "\n"
