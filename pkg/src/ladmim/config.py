"""Run configuration: every hyperparameter in one validated, serializable place."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

from .lavit import TARGET_MODES


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # seeds, one per purpose: changing one never perturbs the others
    init_seed: int = 1234
    mask_seed: int = 1234
    data_seed: int = 1234
    eval_seed: int = 1234

    # image / backbone geometry
    canvas: int = 32
    patch_size: int = 4
    pool: int = 1
    d0: int = 48

    # model dims; d_q is deliberately small: a coarse code space keeps the
    # discrete codes stable across jitter, which the histogram targets need
    d: int = 64
    d_q: int = 8
    n_codes: int = 32          # K
    hvq_layers: int = 4        # L
    lavit_layers: int = 4      # L'
    n_heads: int = 4
    ffn_hidden: int = 128

    # masking / scoring
    mask_ratio: float = 0.4
    n_masks: int = 16
    target_mode: str = "histogram"

    # training; the tokenizer is intentionally not trained to convergence,
    # longer reconstruction training makes the codes image-specific and
    # degrades them as prediction targets
    hvq_epochs: int = 150
    hvq_lr: float = 1e-3
    hvq_weight_decay: float = 1e-4
    lavit_epochs: int = 400
    lavit_lr: float = 1e-3
    lavit_weight_decay: float = 1e-6
    batch_size: int = 16

    # dataset
    counts: dict = field(default_factory=lambda: {
        "train_normal": 200,
        "test_normal": 50,
        "test_logical": 50,
        "test_structural": 50,
    })
    calibration_fraction: float = 0.2

    def validate(self):
        if self.canvas % (self.patch_size * self.pool):
            raise ConfigError("canvas must be divisible by patch_size * pool")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"target_mode must be one of {TARGET_MODES}")
        if not (0 < self.mask_ratio < 1):
            raise ConfigError("mask_ratio must be in (0, 1)")
        if self.n_masks < 1:
            raise ConfigError("n_masks must be >= 1")
        if self.d % self.n_heads:
            raise ConfigError("d must be divisible by n_heads")
        if self.n_codes < 2:
            raise ConfigError("n_codes must be >= 2")
        if not (0 < self.calibration_fraction < 1):
            raise ConfigError("calibration_fraction must be in (0, 1)")
        for key in ("train_normal", "test_normal", "test_logical", "test_structural"):
            if key not in self.counts or int(self.counts[key]) < 0:
                raise ConfigError(f"counts.{key} missing or negative")
        for key in ("hvq_epochs", "lavit_epochs", "batch_size"):
            if getattr(self, key) < 0 or (key == "batch_size" and self.batch_size < 1):
                raise ConfigError(f"{key} out of range")
        return self

    @property
    def grid_side(self):
        return self.canvas // (self.patch_size * self.pool)

    @property
    def n_tokens(self):
        return self.grid_side ** 2

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        fields = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))
