"""Flat ``key = value`` configuration with CLI > file > default precedence."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .registration import EstimatorConfig
from .synth import SynthConfig
from .training import LossConfig, TrainConfig


@dataclass(frozen=True)
class PipelineConfig:
    # hierarchy
    dense_voxel: float = 0.05
    super_voxel: float = 0.3
    # model
    d_dense: int = 64
    d_super: int = 128
    d_t: int = 128
    heads: int = 4
    n_layers: int = 3
    attention: str = "standard"
    geometric: bool = True
    sigma_d: float | None = None  # defaults to super_voxel
    sigma_a: float = 15.0
    k_neighbors: int = 3
    features: str = "builtin"
    weights: str = ""
    feature_file: str = ""
    # matching
    match_mode: str = "topk"
    n_c: int = 256
    match_thresh: float = 0.75
    k_mutual: int = 3
    sinkhorn_iters: int = 100
    # estimation
    estimator: str = "lgr"
    tau_a: float = 0.1
    n_refine: int = 5
    min_local_corr: int = 3
    ransac_iters: int = 50000
    svd_top: int = 250
    # synthetic data
    shape: str = "composite"
    keep_ratio: float = 0.7
    max_rotation: float = 45.0
    sample_count: int = 717
    noise: bool = True
    pairs: int = 10
    # training
    lr: float = 1e-3
    decay: float = 1.0
    steps: int = 100
    train_sinkhorn_iters: int = 10
    n_g: int = 128
    # misc
    seed: int = 0

    def __post_init__(self):
        if self.estimator not in ("lgr", "ransac", "svd"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if self.match_mode not in ("topk", "threshold"):
            raise ConfigError(f"unknown match mode {self.match_mode!r}")
        if not (self.dense_voxel > 0 and self.super_voxel > 0):
            raise ConfigError("voxel sizes must be positive")

    def model(self) -> ModelConfig:
        return ModelConfig(
            self.d_dense, self.d_super, self.d_t, self.heads, self.n_layers, self.attention,
            self.geometric, self.sigma_d or self.super_voxel, self.sigma_a, self.k_neighbors,
            features=self.features,
        )

    def estimator_cfg(self) -> EstimatorConfig:
        return EstimatorConfig(self.tau_a, self.n_refine, self.min_local_corr, self.ransac_iters, self.svd_top)

    def synth(self, seed: int | None = None) -> SynthConfig:
        return SynthConfig(
            self.keep_ratio, self.max_rotation, sample_count=self.sample_count, noise=self.noise,
            seed=self.seed if seed is None else seed,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(self.lr, self.decay, self.steps, self.seed, self.train_sinkhorn_iters)

    def loss(self) -> LossConfig:
        return LossConfig(n_g=self.n_g, tau=self.dense_voxel)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(name: str, kind, raw: str):
    raw = raw.strip()
    kind = str(kind)
    try:
        if "bool" in kind:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if "None" in kind and raw.lower() in ("", "none"):
            return None
        if "int" in kind:
            return int(raw)
        if "float" in kind:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_pairs(items) -> dict:
    """``["key=value", ...]`` into typed overrides."""
    types = {f.name: f.type for f in fields(PipelineConfig)}
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _convert(key, types[key], raw)
    return out


def read_config_file(path) -> dict:
    lines = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        lines.append(line)
    return parse_pairs(lines)


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    if path:
        cfg = replace(cfg, **read_config_file(path))
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg


def dump_config(cfg: PipelineConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
