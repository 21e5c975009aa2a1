"""JSON run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .simulate import SimConfig
from .state import Hyperparams

__all__ = [
    "ConfigError",
    "FitConfig",
    "DataConfig",
    "PredictConfig",
    "EvaluateConfig",
    "RunConfig",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    pass


@dataclass
class FitConfig:
    tol: float = 1e-4
    max_sweeps: int = 100
    pure_cavi: bool = False
    svb_steps: int = 25
    svb_gtol: float = 1e-6
    svb_method: str = "newton"

    def __post_init__(self):
        if not self.tol > 0 or self.max_sweeps < 1 or self.svb_steps < 0:
            raise ConfigError("fit: tol must be positive and max_sweeps >= 1")
        if self.svb_method not in ("newton", "gradient"):
            raise ConfigError("fit: svb_method must be 'newton' or 'gradient'")


@dataclass
class DataConfig:
    delta: float = 1.0
    delimiter: str = "comma"
    header: bool = False
    # whether the file given to `predict` carries a label column
    predict_labeled: bool = False

    def __post_init__(self):
        if not self.delta > 0:
            raise ConfigError("data: delta must be positive")
        if self.delimiter not in ("comma", "tab"):
            raise ConfigError("data: delimiter must be 'comma' or 'tab'")


@dataclass
class PredictConfig:
    threshold: float = 0.5
    tol: float = 1e-6
    max_rounds: int = 50
    multistart: bool = True

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("predict: threshold must lie in [0, 1]")


@dataclass
class EvaluateConfig:
    folds: int | None = None
    replicates: int = 10
    test_fraction: float = 0.3

    def __post_init__(self):
        if self.folds is not None and self.folds < 2:
            raise ConfigError("evaluate: folds must be >= 2")
        if self.replicates < 1:
            raise ConfigError("evaluate: replicates must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("evaluate: test_fraction must lie in (0, 1)")


_SECTIONS = {
    "hyper": Hyperparams,
    "fit": FitConfig,
    "data": DataConfig,
    "predict": PredictConfig,
    "evaluate": EvaluateConfig,
    "simulate": SimConfig,
}


@dataclass
class RunConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    fit: FitConfig = field(default_factory=FitConfig)
    data: DataConfig = field(default_factory=DataConfig)
    predict: PredictConfig = field(default_factory=PredictConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    simulate: SimConfig = field(default_factory=SimConfig)
    selection_threshold: float = 0.5
    seed: int = 0
    threads: int | None = None
    data_path: str | None = None
    model_path: str | None = None
    out_dir: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in d.items():
            if key in _SECTIONS:
                section = _SECTIONS[key]
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                names = {f.name for f in dataclasses.fields(section)}
                bad = set(value) - names
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                try:
                    kwargs[key] = section(**value)
                except ConfigError:
                    raise
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{key}: {exc}") from None
            else:
                kwargs[key] = value
        return cls(**kwargs)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(d)


def save_config(path, cfg: RunConfig):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
