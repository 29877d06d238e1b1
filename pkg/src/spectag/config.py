"""Pipeline configuration; defaults reproduce the published protocol."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .classifier import DEFAULT_C_GRID, DEFAULT_GAMMA_GRID
from .confidence import Metric
from .errors import ConfigError
from .features import DEFAULT_PAIRS, LbpConfig
from .imaging import RGB_WAVELENGTHS


@dataclass(frozen=True)
class PipelineConfig:
    # segmentation
    avg_size: int = 150
    compactness: float = 0.1
    # texture
    lbp_pairs: tuple[tuple[int, int], ...] = DEFAULT_PAIRS
    # pre-processing
    diffusion_iterations: int = 15
    diffusion_kappa: float = 0.02
    diffusion_step: float = 0.2
    v_threshold: float = 0.95
    rgb_bands: tuple[float, float, float] = RGB_WAVELENGTHS
    # classifier
    gamma_grid: tuple[float, ...] = DEFAULT_GAMMA_GRID
    C_grid: tuple[float, ...] = DEFAULT_C_GRID
    folds: int = 10
    smo_tol: float = 1e-3
    C: float | None = None  # fixed hyperparameters skip the grid search
    gamma: float | None = None
    seed: int = 0
    # evaluation
    tau_grid: tuple[float, ...] = (0.5, 0.6, 0.7, 0.8, 0.9)
    tau: float = 0.9
    metric: Metric = Metric.GC
    mixed_purity: float = 0.6
    jobs: int = 0  # 0 = all available cores

    def __post_init__(self):
        object.__setattr__(self, "metric", Metric(self.metric))
        if self.avg_size < 2:
            raise ConfigError("avg_size must be >= 2")
        if not 0 < self.compactness <= 1:
            raise ConfigError("compactness must lie in (0, 1]")
        if not 0 < self.v_threshold <= 1:
            raise ConfigError("v_threshold must lie in (0, 1]")
        if not 0 < self.diffusion_step <= 0.25:
            raise ConfigError("diffusion step must lie in (0, 0.25]")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not self.gamma_grid or not self.C_grid:
            raise ConfigError("hyperparameter grids must be nonempty")
        if (self.C is None) != (self.gamma is None):
            raise ConfigError("set both C and gamma, or neither")
        try:
            LbpConfig(self.lbp_pairs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def lbp(self) -> LbpConfig:
        return LbpConfig(self.lbp_pairs)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


# TOML section -> config keys accepted in it
_SECTIONS = {
    "segmentation": {"avg_size", "compactness"},
    "lbp": {"lbp_pairs"},
    "preprocessing": {"diffusion_iterations", "diffusion_kappa", "diffusion_step", "v_threshold", "rgb_bands"},
    "svm": {"gamma_grid", "C_grid", "folds", "smo_tol", "C", "gamma", "seed"},
    "evaluation": {"tau_grid", "tau", "metric", "mixed_purity", "jobs"},
}
_TUPLE_KEYS = {"rgb_bands", "gamma_grid", "C_grid", "tau_grid"}


def config_from_mapping(data: dict) -> PipelineConfig:
    values = {}
    for section, content in data.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, val in content.items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            if key == "lbp_pairs":
                val = tuple(tuple(int(v) for v in pair) for pair in val)
            elif key in _TUPLE_KEYS:
                val = tuple(float(v) for v in val)
            values[key] = val
    try:
        return PipelineConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        data = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_mapping(data)


def config_to_dict(cfg: PipelineConfig) -> dict:
    out = {}
    for section, keys in _SECTIONS.items():
        out[section] = {}
        for key in sorted(keys):
            val = getattr(cfg, key)
            if isinstance(val, Metric):
                val = val.value
            elif isinstance(val, tuple):
                val = [list(v) if isinstance(v, tuple) else v for v in val]
            out[section][key] = val
    return out
