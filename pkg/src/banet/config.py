"""Versioned run configuration composed of the per-module configs."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .infer import WindowPlan
from .losses import LossConfig
from .model import ModelConfig
from .phantom import PhantomSpec
from .preprocess import AugmentSpec, PreprocessConfig
from .train import TrainConfig

SCHEMA_VERSION = 1
CACHE_ENV = "BANET_CACHE_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class InferConfig:
    step_fraction: float = 0.5
    blend: str = "gaussian"
    sigma_scale: float = 1.0 / 8
    postprocess_policy: str = "largest_per_class"
    postprocess_connectivity: int = 26


@dataclass
class RunConfig:
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec.training_default)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    dataset_dir: str | None = None
    run_dir: str | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        try:
            self.model.check_patch(self.preprocess.patch_shape)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.infer.blend not in ("gaussian", "uniform"):
            raise ConfigError(f"unknown blend {self.infer.blend!r}")

    def window_plan(self) -> WindowPlan:
        return WindowPlan(self.preprocess.patch_shape, self.infer.step_fraction,
                          self.infer.blend, self.infer.sigma_scale)

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "preprocess": self.preprocess.to_dict(),
            "augment": self.augment.to_dict(),
            "model": self.model.to_dict(),
            "loss": asdict(self.loss),
            "train": self.train.to_dict(),
            "infer": asdict(self.infer),
            "phantom": _phantom_dict(self.phantom),
            "dataset_dir": self.dataset_dir,
            "run_dir": self.run_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {
            "preprocess": PreprocessConfig, "augment": AugmentSpec, "model": ModelConfig,
            "loss": LossConfig, "train": TrainConfig, "infer": InferConfig, "phantom": PhantomSpec,
        }
        kwargs = {}
        for name, typ in parts.items():
            if name in d and d[name] is not None:
                try:
                    kwargs[name] = typ(**d[name])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"section {name!r}: {exc}") from exc
        for name in ("dataset_dir", "run_dir", "schema_version"):
            if name in d:
                kwargs[name] = d[name]
        return cls(**kwargs)

    def section_hash(self, *names: str) -> str:
        full = self.to_dict()
        blob = json.dumps({n: full[n] for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _phantom_dict(spec: PhantomSpec) -> dict:
    d = asdict(spec)
    d["intensity"] = {str(k): v for k, v in spec.intensity.items()}
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def deep_update(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_update(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: os.PathLike | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    data = RunConfig().to_dict()
    if path is not None:
        try:
            data = deep_update(data, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if overrides:
        data = deep_update(data, overrides)
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path: os.PathLike) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2))


def cache_root() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "banet"))
