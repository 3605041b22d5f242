"""Run configuration: validated, JSON-serialisable, hashable.

Precedence: built-in defaults < ``--config`` JSON file < command-line flags.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .objective import DIVERGENCES, LossWeights

PROTOCOLS = ("S4", "MS3")
DEFAULT_EPOCHS = {"S4": 15, "MS3": 30}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    data: str | None = None
    protocol: str = "MS3"
    divergence: str = "JS"
    factorized: bool = True
    latent_dim: int = 16
    use_audio: bool = True
    latent_kind: str = "vae"
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int | None = None
    batch_size: int = 4
    lr: float = 1e-4
    seed: int = 0
    out: str = "runs/default"
    jsd_samples: int = 8
    js_pi: tuple[float, ...] | None = None
    train_clips: int | None = None
    eval_every: int = 1
    eval_split: str = "val"
    model: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.epochs is None:
            object.__setattr__(self, "epochs", DEFAULT_EPOCHS.get(self.protocol, 30))
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.protocol in PROTOCOLS, f"protocol must be one of {PROTOCOLS}")
        need(self.divergence in DIVERGENCES, f"divergence must be one of {DIVERGENCES}")
        need(self.latent_kind in ("vae", "ae"), "latent_kind must be 'vae' or 'ae'")
        need(self.latent_dim >= 1, "latent_dim must be >= 1")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.lr > 0, "lr must be > 0")
        need(self.jsd_samples >= 1, "jsd_samples must be >= 1")
        need(self.eval_every >= 0, "eval_every must be >= 0")
        need(self.eval_split in ("train", "val", "test"), "eval_split must be train/val/test")
        need(not (self.factorized and not self.use_audio),
             "a factorised model needs audio (the audio-specific code s_a)")
        need(self.train_clips is None or self.train_clips >= 1, "train_clips must be >= 1")
        if self.js_pi is not None:
            need(abs(sum(self.js_pi) - 1) < 1e-9 and all(p >= 0 for p in self.js_pi),
                 "js_pi must be non-negative and sum to 1")
        known = {f.name for f in fields(ModelConfig)}
        bad = set(self.model) - known
        need(not bad, f"unknown model options: {sorted(bad)}")
        try:
            self.model_config()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def model_config(self) -> ModelConfig:
        extra = {k: tuple(v) if isinstance(v, list) else v for k, v in self.model.items()}
        return ModelConfig(latent_dim=self.latent_dim, factorized=self.factorized,
                           use_audio=self.use_audio, latent_kind=self.latent_kind,
                           divergence=self.divergence, init_seed=self.seed, **extra)

    def effective_weights(self) -> LossWeights:
        """Unfactorised models have no L_diff / L_sic; AE models train on the prior path only."""
        w = self.weights
        if not self.factorized:
            w = replace(w, lambda1=0.0, lambda2=0.0)
        if self.latent_kind == "ae":
            w = replace(w, alpha1=0.0, alpha2=0.0, beta=0.0)
        return w

    def to_json(self) -> dict:
        d = asdict(self)
        d["js_pi"] = list(self.js_pi) if self.js_pi is not None else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        try:
            if "weights" in d:
                wd = d["weights"]
                bad_w = set(wd) - {f.name for f in fields(LossWeights)}
                if bad_w:
                    raise ConfigError(f"unknown weight keys: {sorted(bad_w)}")
                d["weights"] = LossWeights(**wd)
            if d.get("js_pi") is not None:
                d["js_pi"] = tuple(d["js_pi"])
            return cls(**d)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def with_overrides(self, **kw) -> TrainConfig:
        """Apply flat overrides; weight fields (beta, alpha1, ..) go into ``weights``."""
        wnames = {f.name for f in fields(LossWeights)}
        wkw = {k: v for k, v in kw.items() if k in wnames and v is not None}
        rest = {k: v for k, v in kw.items() if k not in wnames and v is not None}
        d = self.to_json()
        d["weights"].update(wkw)
        d.update(rest)
        if "protocol" in rest and "epochs" not in rest and self.epochs == DEFAULT_EPOCHS.get(self.protocol):
            d["epochs"] = None
        return TrainConfig.from_json(d)

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_json()
        d.pop("out")
        return hash_json(d)


def hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return TrainConfig.from_json(raw)
