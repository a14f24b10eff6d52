"""Trainable model: feature lift, geometric transformer and dustbin score."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import weights
from .attention import GeoEmbeddingConfig, TransformerConfig, init_transformer, run_transformer
from .errors import ConfigError, DataError
from .features import ENCODER_WIDTH, FeatureProvider, compute_features, init_lift

_MODES = ("standard", "shared")
_FEATURES = ("builtin", "encoder")
_CHOICES = {"mode": _MODES, "features": _FEATURES}


@dataclass(frozen=True)
class ModelConfig:
    d_dense: int = 64
    d_super: int = 128
    d_t: int = 128
    heads: int = 4
    n_layers: int = 3
    mode: str = "standard"
    geometric: bool = True
    sigma_d: float = 0.2
    sigma_a: float = 15.0
    k_neighbors: int = 3
    dustbin: float = 1.0
    features: str = "builtin"

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"unknown attention mode {self.mode!r}")
        if self.features not in _FEATURES:
            raise ConfigError(f"unknown feature mode {self.features!r}")

    def transformer(self) -> TransformerConfig:
        return TransformerConfig(self.d_super, self.d_t, self.heads, self.n_layers, self.mode, self.geometric)

    def embedding(self) -> GeoEmbeddingConfig:
        return GeoEmbeddingConfig(self.sigma_d, self.sigma_a, self.k_neighbors, self.d_t)


class Model:
    """All learnable parameters in one flat name -> Tensor mapping."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0, params=None):
        self.cfg = cfg
        if params is None:
            rng = np.random.default_rng(seed)
            width = ENCODER_WIDTH if cfg.features == "encoder" else 0
            params = init_lift(rng, (cfg.d_dense, cfg.d_super), width)
            params.update(init_transformer(rng, cfg.transformer()))
            params["dustbin"] = ad.Tensor(np.array(cfg.dustbin), True, "dustbin")
        self.params = params

    @property
    def provider(self) -> FeatureProvider:
        return FeatureProvider(self.cfg.features, (self.cfg.d_dense, self.cfg.d_super), self.params)

    @property
    def dustbin(self) -> float:
        return float(self.params["dustbin"].value)

    def forward(self, graph_p, graph_q, provider: FeatureProvider | None = None):
        """Fill both graphs' features and return the two hybrid feature matrices."""
        provider = provider or self.provider
        compute_features(graph_p, provider)
        compute_features(graph_q, provider)
        return run_transformer(graph_p, graph_q, self.params, self.cfg.embedding(), self.cfg.transformer())

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for k, v in asdict(self.cfg).items():
            val = _CHOICES[k].index(v) if k in _CHOICES else v
            out[f"config.{k}"] = np.array(float(val))
        out.update({k: v.value for k, v in self.params.items()})
        return out

    def save(self, path) -> None:
        weights.save(path, self.state())

    @classmethod
    def from_state(cls, entries: dict[str, np.ndarray]) -> "Model":
        kw = {}
        for f in fields(ModelConfig):
            key = f"config.{f.name}"
            if key not in entries:
                raise DataError(f"weights lack {key}")
            val = float(entries[key])
            if f.name in _CHOICES:
                kw[f.name] = _CHOICES[f.name][int(val)]
            elif f.type in ("int", int):
                kw[f.name] = int(val)
            elif f.type in ("bool", bool):
                kw[f.name] = bool(val)
            else:
                kw[f.name] = val
        cfg = ModelConfig(**kw)
        params = {
            k: ad.Tensor(v.copy(), True, k) for k, v in entries.items() if not k.startswith("config.")
        }
        expected = set(cls(cfg).params)
        if set(params) != expected:
            missing = sorted(expected - set(params))
            extra = sorted(set(params) - expected)
            raise DataError(f"weights do not fit the model: missing {missing[:5]}, unexpected {extra[:5]}")
        return cls(cfg, params=params)

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_state(weights.load(path))
