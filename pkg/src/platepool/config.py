"""Pipeline configuration: nested, JSON-serializable, hashable.

The no-argument default reproduces the reference setup exactly: 6
plates with observation counts [20, 20, 20, 20, 20, 2], 5 microstrain
measurement noise, the Gamma hyperpriors (3, 0.2), (0.8, 0.35),
(3.6, 6), (4.8, 16), the Gamma(80, 16) noise prior, sampler settings
4000 warmup / 2000 draws / 4 chains, and deflection thresholds at
4/6/8 mm. A config file only needs the keys it overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .distributions import GammaParams
from .gpr import KernelConfig
from .model import Hyperpriors
from .nuts import SamplerConfig
from .synthetic import DatasetConfig, OracleConfig, PlateGeometry

SURROGATE_SOURCE_GRID = "grid"
SURROGATE_SOURCE_DATASET = "dataset"


@dataclass(frozen=True)
class SurrogateTrainConfig:
    """How per-plate surrogates get their training pairs and kernels.

    ``grid``: amplitudes on a uniform grid through the strain oracle
    with observation noise (independent draws per plate). ``dataset``:
    the plate's observed (amplitude, strain) pairs. Plates with fewer
    than ``min_points_to_optimize`` points borrow hyperparameters from
    a pooled fit over all plates' pairs (two points cannot identify
    three hyperparameters).
    """

    source: str = SURROGATE_SOURCE_GRID
    grid_points: int = 30
    grid_max_amplitude: float = 12.0
    grid_noise_std: float = 5.0
    init_kernel: KernelConfig = field(
        default_factory=lambda: KernelConfig(signal_var=1e4, lengthscale=3.0, noise_var=25.0)
    )
    optimize: bool = True
    n_restarts: int = 5
    min_points_to_optimize: int = 5

    def __post_init__(self):
        if self.source not in (SURROGATE_SOURCE_GRID, SURROGATE_SOURCE_DATASET):
            raise ValueError(f"surrogate source must be 'grid' or 'dataset', got {self.source!r}")
        if self.grid_points < 2:
            raise ValueError("grid_points must be >= 2")


@dataclass(frozen=True)
class DetectionConfig:
    """Deflection threshold levels (mm) for the detection stage."""

    levels: tuple = (4.0, 6.0, 8.0)

    def __post_init__(self):
        lv = list(self.levels)
        if any(v <= 0 for v in lv) or any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError(f"levels must be positive and strictly increasing, got {self.levels}")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 42
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    geometry: PlateGeometry = field(default_factory=PlateGeometry)
    surrogate: SurrogateTrainConfig = field(default_factory=SurrogateTrainConfig)
    hyperpriors: Hyperpriors = field(default_factory=Hyperpriors)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _to_plain(cfg)


def _merge(base: dict, override: dict, path="") -> dict:
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise KeyError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def config_from_dict(data: dict) -> PipelineConfig:
    """Build a config from a (possibly partial) plain dict.

    Missing keys keep their defaults; unknown keys are rejected.
    """
    full = _merge(config_to_dict(PipelineConfig()), data or {})
    ds = full["dataset"]
    return PipelineConfig(
        seed=int(full["seed"]),
        dataset=DatasetConfig(
            n_plates=int(ds["n_plates"]),
            obs_counts=tuple(int(n) for n in ds["obs_counts"]),
            mu_mu=float(ds["mu_mu"]),
            sigma_mu=float(ds["sigma_mu"]),
            mu_sigma=float(ds["mu_sigma"]),
            sigma_sigma=float(ds["sigma_sigma"]),
            noise_std=float(ds["noise_std"]),
            oracle=OracleConfig(**ds["oracle"]),
        ),
        geometry=PlateGeometry(**full["geometry"]),
        surrogate=SurrogateTrainConfig(
            source=full["surrogate"]["source"],
            grid_points=int(full["surrogate"]["grid_points"]),
            grid_max_amplitude=float(full["surrogate"]["grid_max_amplitude"]),
            grid_noise_std=float(full["surrogate"]["grid_noise_std"]),
            init_kernel=KernelConfig(**full["surrogate"]["init_kernel"]),
            optimize=bool(full["surrogate"]["optimize"]),
            n_restarts=int(full["surrogate"]["n_restarts"]),
            min_points_to_optimize=int(full["surrogate"]["min_points_to_optimize"]),
        ),
        hyperpriors=Hyperpriors(
            **{k: GammaParams(**v) for k, v in full["hyperpriors"].items()}
        ),
        sampler=SamplerConfig(
            n_warmup=int(full["sampler"]["n_warmup"]),
            n_samples=int(full["sampler"]["n_samples"]),
            n_chains=int(full["sampler"]["n_chains"]),
            target_accept=float(full["sampler"]["target_accept"]),
            max_tree_depth=int(full["sampler"]["max_tree_depth"]),
            seed=int(full["sampler"]["seed"]),
        ),
        detection=DetectionConfig(levels=tuple(float(v) for v in full["detection"]["levels"])),
    )


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def save_config(cfg: PipelineConfig, path):
    with open(path, "w") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_hash(cfg: PipelineConfig) -> str:
    """sha256 of the canonical JSON rendering; stable across runs."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
