"""Run configuration: one flat dataclass addressed by dotted keys.

Config files are ``key=value`` lines (``#`` starts a comment). The special
key ``profile`` (``desk`` or ``paper``) selects a base profile and is applied
before every other key, so an echoed effective config reproduces the run.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # architecture
    image_size: int = 32
    patch_size: int = 8
    d: int = 64
    heads: int = 4
    vit_layers: int = 4
    text_layers: int = 3
    pad_layers: int = 2
    fusion_layers: int = 2
    decoder_layers: int = 2
    tsps_hidden: int = 0  # 0 means "same as d"
    vocab_size: int = 0  # 0 means "size of the built-in vocabulary"
    max_text_len: int = 12
    # summarization
    k: int = 2
    alpha: float = 0.7
    gamma: float = 0.2
    kpe_enabled: bool = True
    tpa_enabled: bool = True
    fusion_token: bool = True
    norm_kind: str = "minmax"
    # beta schedule
    beta_max: float = 0.8
    beta_warmup_steps: int = 100
    ema_threshold: float = 0.45 * math.log(2.0)
    ema_decay: float = 0.99
    # optimizer
    lr: float = 2e-3
    lr_floor: float = 1e-5
    warmup_iters: int = 20
    weight_decay: float = 0.02
    clip_norm: float = 1.0
    # losses
    itc_temperature: float = 0.07
    mlm_rate: float = 0.15
    # training / eval / bench
    steps: int = 200
    batch_d: int = 8
    batch_o: int = 8
    checkpoint_every: int = 0
    eval_samples: int = 200
    bench_batch: int = 64
    bench_iters: int = 30
    bench_warmup: int = 5
    seed: int = 0
    profile: str = "desk"

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def hidden(self) -> int:
        return self.tsps_hidden or self.d

    @property
    def kept_patches(self) -> int:
        """u = floor(n * alpha); all patches when KPE is disabled."""
        return keep_count(self.n_patches, self.alpha) if self.kpe_enabled else self.n_patches

    @property
    def seed_tokens(self) -> int:
        """s = floor(gamma * u)."""
        return keep_count(self.kept_patches, self.gamma)

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)

    def validate(self) -> RunConfig:
        if self.patch_size <= 0 or self.image_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ConfigError(f"model.d={self.d} must be a positive multiple of model.heads={self.heads}")
        if not 1 <= self.k < self.vit_layers:
            raise ConfigError(f"kpe.k={self.k} must satisfy 1 <= k < vit_layers={self.vit_layers}")
        for name in ("alpha", "gamma"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name}={value} must lie in (0, 1]")
        if not 0.0 <= self.beta_max <= 1.0:
            raise ConfigError(f"schedule.beta_max={self.beta_max} must lie in [0, 1]")
        if self.norm_kind not in ("minmax", "softmax"):
            raise ConfigError(f"kpe.norm_kind must be 'minmax' or 'softmax', got {self.norm_kind!r}")
        if self.profile not in PROFILES:
            raise ConfigError(f"unknown profile {self.profile!r}")
        if self.kept_patches < 1:
            raise ConfigError(f"alpha={self.alpha} keeps no patch out of {self.n_patches}")
        if self.seed_tokens < 1:
            raise ConfigError(f"gamma={self.gamma} keeps no seed out of {self.kept_patches}")
        for name in ("text_layers", "pad_layers", "fusion_layers", "decoder_layers", "max_text_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self


def keep_count(total: int, ratio: float) -> int:
    # small epsilon keeps e.g. 0.7 * 10 from flooring to 6
    return int(math.floor(total * ratio + 1e-9))


PAPER_PROFILE = dict(
    image_size=224,
    patch_size=16,
    d=768,
    heads=12,
    vit_layers=12,
    text_layers=10,
    pad_layers=2,
    fusion_layers=3,
    decoder_layers=12,
    vocab_size=30522,
    max_text_len=40,
    k=6,
    alpha=0.7,
    gamma=0.2,
)

PROFILES = {"desk": {}, "paper": PAPER_PROFILE}

KEYS: dict[str, str] = {
    "model.image_size": "image_size",
    "model.patch_size": "patch_size",
    "model.d": "d",
    "model.heads": "heads",
    "model.vit_layers": "vit_layers",
    "model.text_layers": "text_layers",
    "model.pad_layers": "pad_layers",
    "model.fusion_layers": "fusion_layers",
    "model.decoder_layers": "decoder_layers",
    "model.tsps_hidden": "tsps_hidden",
    "model.vocab_size": "vocab_size",
    "model.max_text_len": "max_text_len",
    "kpe.k": "k",
    "kpe.alpha": "alpha",
    "kpe.enabled": "kpe_enabled",
    "kpe.fusion_token": "fusion_token",
    "kpe.norm_kind": "norm_kind",
    "tpa.gamma": "gamma",
    "tpa.enabled": "tpa_enabled",
    "schedule.beta_max": "beta_max",
    "schedule.beta_warmup_steps": "beta_warmup_steps",
    "schedule.ema_threshold": "ema_threshold",
    "schedule.ema_decay": "ema_decay",
    "optim.lr": "lr",
    "optim.lr_floor": "lr_floor",
    "optim.warmup_iters": "warmup_iters",
    "optim.weight_decay": "weight_decay",
    "optim.clip_norm": "clip_norm",
    "loss.itc_temperature": "itc_temperature",
    "loss.mlm_rate": "mlm_rate",
    "train.steps": "steps",
    "train.batch_d": "batch_d",
    "train.batch_o": "batch_o",
    "train.checkpoint_every": "checkpoint_every",
    "eval.samples": "eval_samples",
    "bench.batch": "bench_batch",
    "bench.iters": "bench_iters",
    "bench.warmup": "bench_warmup",
    "seed": "seed",
    "profile": "profile",
}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[KEYS[key]]
    text = raw.strip()
    try:
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_assignments(lines) -> dict[str, str]:
    """Parse ``key=value`` lines; unknown keys are rejected by name."""
    values: dict[str, str] = {}
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return values


def build_config(assignments: dict[str, str] | None = None) -> RunConfig:
    assignments = dict(assignments or {})
    profile = assignments.pop("profile", "desk").strip()
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    base = dataclasses.replace(RunConfig(), profile=profile, **PROFILES[profile])
    changes = {KEYS[key]: _coerce(key, value) for key, value in assignments.items()}
    return dataclasses.replace(base, **changes).validate()


def load_config(path: str | Path | None = None, overrides=()) -> RunConfig:
    assignments: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        assignments.update(parse_assignments(text.splitlines()))
    assignments.update(parse_assignments(overrides))
    return build_config(assignments)


def paper_config(**changes) -> RunConfig:
    return dataclasses.replace(build_config({"profile": "paper"}), **changes).validate()


def dump_config(cfg: RunConfig) -> str:
    """Effective config as sorted ``key=value`` lines (round-trips via load_config)."""
    lines = []
    for key in sorted(KEYS):
        value = getattr(cfg, KEYS[key])
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
