"""Hyperparameter profiles and the ``key = value`` config file format.

Resolution order: profile defaults, then config file, then explicit overrides.
Keys are dotted: ``train.<field>`` for :class:`TrainConfig` fields and
``model.<field>`` for :class:`~pointdif.networks.ModelDims` fields.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .networks import DESK_DIMS, PAPER_DIMS, ModelDims


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    profile: str = "desk"
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.05
    mask_ratio: float = 0.8
    h: int = 4
    T: int = 200
    beta_start: float = 1e-3
    beta_end: float = 1e-1
    num_patches: int = 32
    patch_size: int = 16
    scale_low: float = 0.66
    scale_high: float = 1.5
    translate: float = 0.2
    interval_lo: int | None = None
    interval_hi: int | None = None
    absorb_remainder: bool = False
    random_fps_start: bool = False
    seed: int = 0
    dims: ModelDims = field(default=DESK_DIMS)

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        if not 0.0 <= self.mask_ratio < 1.0:
            problems.append(f"mask_ratio={self.mask_ratio} must lie in [0, 1)")
        elif self.num_patches - int(self.num_patches * self.mask_ratio + 1e-9) < 1:
            problems.append(f"mask_ratio={self.mask_ratio} leaves no visible patch")
        if self.h < 1:
            problems.append(f"h={self.h} must be >= 1")
        elif self.h > self.T:
            problems.append(f"h={self.h} exceeds T={self.T}")
        if self.T < 1:
            problems.append(f"T={self.T} must be >= 1")
        if not 0.0 < self.beta_start <= self.beta_end < 1.0:
            problems.append("need 0 < beta_start <= beta_end < 1")
        if self.epochs < 1 or self.batch_size < 1:
            problems.append("epochs and batch_size must be positive")
        if self.num_patches < 1 or self.patch_size < 1:
            problems.append("num_patches and patch_size must be positive")
        if (self.interval_lo is None) != (self.interval_hi is None):
            problems.append("interval_lo and interval_hi must be set together")
        elif self.interval_lo is not None and not 1 <= self.interval_lo <= self.interval_hi <= self.T:
            problems.append(f"interval [{self.interval_lo}, {self.interval_hi}] not inside [1, {self.T}]")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def interval(self):
        if self.interval_lo is None:
            return None
        return (self.interval_lo, self.interval_hi)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "dims"}
        d["dims"] = self.dims.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        dims = ModelDims(**d.pop("dims"))
        return cls(dims=dims, **d)


PROFILES = {
    "paper": TrainConfig(profile="paper", epochs=300, batch_size=128, lr=1e-3, weight_decay=0.05,
                         mask_ratio=0.8, h=4, T=2000, beta_start=1e-4, beta_end=1e-2,
                         num_patches=64, patch_size=32,
                         dims=PAPER_DIMS),
    "desk": TrainConfig(),
}


def _coerce(text: str, like):
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, tuple):
        return tuple(int(p) for p in text.replace(",", " ").split())
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if like is None:
        return int(text)
    return text


def parse_config_file(path) -> dict:
    """Read ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve(profile: str = "desk", file_values: dict | None = None,
            overrides: dict | None = None) -> TrainConfig:
    """Build a :class:`TrainConfig` from a profile, file values and overrides.

    Unknown keys and unparsable values are collected and reported in one error.
    """
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    base = PROFILES[profile]
    train_fields = {f.name for f in fields(TrainConfig)} - {"dims", "profile"}
    model_fields = {f.name for f in fields(ModelDims)}
    train_vals, model_vals, problems = {}, {}, []
    merged = {**(file_values or {}), **{k: v for k, v in (overrides or {}).items() if v is not None}}
    for key, value in merged.items():
        section, _, name = key.partition(".")
        if section == "train" and name in train_fields:
            target, like = train_vals, getattr(base, name)
        elif section == "model" and name in model_fields:
            target, like = model_vals, getattr(base.dims, name)
        elif section == "paths":
            continue
        else:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            target[name] = value if not isinstance(value, str) else _coerce(value, like)
        except ValueError as exc:
            problems.append(f"bad value for {key!r}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    try:
        dims = replace(base.dims, **model_vals)
        return replace(base, dims=dims, **train_vals)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def paths_from(file_values: dict | None) -> dict:
    return {k.split(".", 1)[1]: v for k, v in (file_values or {}).items() if k.startswith("paths.")}


__all__ = ["ConfigError", "TrainConfig", "PROFILES", "parse_config_file", "resolve", "paths_from"]
