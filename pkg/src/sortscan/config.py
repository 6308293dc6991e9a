"""Run configuration: the union of model, data and command settings.

Sourced from a plain-text key-value file (``key = value`` per line, ``#``
comments) with command-line ``key=value`` overrides; overrides win. Every
key is validated against the known field set and coerced to the field
type; unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .model import ModelConfig
from .synth import SynthConfig


@dataclass
class RunConfig:
    # model
    num_classes: int = 3
    channels: int = 32
    blocks: int = 4
    image_size: int = 128
    state_dim: int = 16
    fusion_weight: float = 0.2
    alpha: float = 1.0
    beta: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    clip_norm: float = 10.0
    iterations: int = 1000
    seed: int = 0
    ordering: str = "probability_sorted"
    sorting_on: bool = True
    phenotype_on: bool = True
    share_ca: bool = True
    shared_ssm: bool = False
    pos_mode: str = "add"
    skip_source: str = "pre_scan"
    skip_connections: bool = True
    scan_impl: str = "sequential"
    pool_mode: str = "average"
    ffn_expand: int = 2
    dtype: str = "float32"
    log_every: int = 10
    # synthetic data
    num_images: int = 8
    instances_min: int = 6
    instances_max: int = 12
    prevalence: tuple[float, ...] = (0.475, 0.475, 0.05)
    radius_min: int = 5
    radius_max: int = 11
    margin: int = 2
    noise_level: float = 0.04
    chroma_jitter: float = 0.05
    tint_range: float = 0.0
    colors: tuple[float, ...] = ()   # optional flat per-class RGB triples
    data_seed: int = 100
    # command options
    train_frac: float = 0.75
    ablate_seeds: int = 5
    probe_trials: int = 20
    probe_tokens: int = 64

    def model_config(self) -> ModelConfig:
        kwargs = {f.name: getattr(self, f.name) for f in fields(ModelConfig)}
        cfg = ModelConfig(**kwargs)
        cfg.validate()
        return cfg

    def synth_config(self) -> SynthConfig:
        cfg = SynthConfig(
            image_size=self.image_size, num_classes=self.num_classes,
            num_images=self.num_images, instances_min=self.instances_min,
            instances_max=self.instances_max, prevalence=self.prevalence,
            radius_min=self.radius_min, radius_max=self.radius_max,
            margin=self.margin, noise_level=self.noise_level,
            chroma_jitter=self.chroma_jitter, tint_range=self.tint_range,
            seed=self.data_seed,
            colors=(tuple(tuple(self.colors[i:i + 3])
                          for i in range(0, len(self.colors), 3))
                    if self.colors else None),
        )
        cfg.validate()
        return cfg

    def canonical_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    f = _FIELDS[name]
    raw = raw.strip()
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config key {name!r}: expected a boolean, got {raw!r}")
    if "tuple" in str(f.type):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    return raw


def parse_assignments(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}; known keys: "
                             + ", ".join(sorted(_FIELDS)))
        out[key] = _coerce(key, raw)
    return out


def load_config(path: str | None = None, overrides: list[str] | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = line.split("=", 1)
                key = key.strip()
                if key not in _FIELDS:
                    raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = _coerce(key, raw)
    values.update(parse_assignments(overrides or []))
    cfg = RunConfig(**values)
    # fail fast on anything structurally invalid
    cfg.model_config()
    cfg.synth_config()
    return cfg
