"""Run configuration: one JSON document covering seeds, folds, networks and training.

Every section is optional and unknown keys anywhere are rejected::

    {
      "seed": 0,
      "k": 10,
      "phantom": {...PhantomConfig fields...},
      "stage1": {...Stage1Config fields...},
      "stage2": {...Stage2Config fields...},
      "stage1_training": {"learning_rate": ..., "batch_size": ..., "epochs": ...,
                          "validation_fraction": ...},
      "stage2_training": {...},
      "fusion_training": {...}
    }

The defaults follow the published training regime; ``DESK_PRESET`` is a
reduced setting that runs a full cross-validation on one CPU core.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import PhantomConfig
from .errors import ConfigurationError
from .pipeline.networks import Stage1Config, Stage2Config, config_from_dict, config_to_dict
from .pipeline.training import TrainSpec

_TRAIN_KEYS = {"learning_rate", "batch_size", "epochs", "validation_fraction"}


def _train_spec(d: dict, base: TrainSpec, section: str) -> TrainSpec:
    unknown = set(d) - _TRAIN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown keys in {section}: {sorted(unknown)}")
    return dataclasses.replace(base, **d)


def _train_dict(spec: TrainSpec) -> dict:
    return {k: getattr(spec, k) for k in sorted(_TRAIN_KEYS)}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    k: int = 10
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    stage1_training: TrainSpec = TrainSpec(learning_rate=1e-4, batch_size=16, epochs=100)
    stage2_training: TrainSpec = TrainSpec(learning_rate=1e-4, batch_size=8, epochs=150)
    fusion_training: TrainSpec = TrainSpec(learning_rate=1e-4, batch_size=16, epochs=500)

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigurationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.k < 1:
            raise ConfigurationError(f"k must be at least 1, got {self.k}")
        if self.stage2.candidate_count > self.phantom.slices_per_patient:
            raise ConfigurationError("more candidates than phantom slices per patient")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "k": self.k,
                "phantom": dataclasses.asdict(self.phantom),
                "stage1": config_to_dict(self.stage1), "stage2": config_to_dict(self.stage2),
                "stage1_training": _train_dict(self.stage1_training),
                "stage2_training": _train_dict(self.stage2_training),
                "fusion_training": _train_dict(self.fusion_training)}

    @classmethod
    def from_dict(cls, d: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``d`` on ``base`` (defaults when omitted); nested sections merge key-wise."""
        if not isinstance(d, dict):
            raise ConfigurationError("run configuration must be a JSON object")
        base = base or cls()
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown configuration keys {sorted(unknown)}")
        cur = base.to_dict()
        kwargs = {}
        for key in ("seed", "k"):
            value = d.get(key, cur[key])
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigurationError(f"{key} must be an integer, got {value!r}")
            kwargs[key] = value
        for key, typ in (("phantom", PhantomConfig), ("stage1", Stage1Config),
                         ("stage2", Stage2Config)):
            section = d.get(key, {})
            if not isinstance(section, dict):
                raise ConfigurationError(f"{key} must be an object")
            try:
                kwargs[key] = config_from_dict(typ, {**cur[key], **section})
            except TypeError as exc:
                raise ConfigurationError(f"{key}: {exc}") from exc
        for key in ("stage1_training", "stage2_training", "fusion_training"):
            section = d.get(key, {})
            if not isinstance(section, dict):
                raise ConfigurationError(f"{key} must be an object")
            kwargs[key] = _train_spec(section, getattr(base, key), key)
        return cls(**kwargs)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file {path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, base)


# Reduced regime for one CPU core: 32-pixel model input, a wider pool, a larger
# learning rate and fewer epochs.
DESK_PRESET = {
    "k": 10,
    "phantom": {"patients_per_class": 30, "slices_per_patient": 24, "side": 64,
                "clinical_strength": 0.8, "subtle_fraction": 0.2},
    "stage1": {"input_side": 32, "pool_window": 4},
    "stage2": {"input_side": 32, "pool_window": 4},
    "stage1_training": {"learning_rate": 1e-3, "batch_size": 16, "epochs": 6},
    "stage2_training": {"learning_rate": 1e-3, "batch_size": 8, "epochs": 30},
    "fusion_training": {"learning_rate": 1e-3, "batch_size": 16, "epochs": 200},
}


def desk_config(**overrides) -> RunConfig:
    return RunConfig.from_dict({**DESK_PRESET, **overrides})
