"""
Run configuration for the management commands.

A RunConfig is assembled in three layers, later ones winning:

    1. settings.SCENEFLOW (itself fed from the environment / .env)
    2. a declarative key-value file, one `section.key = value` per line
    3. command-line flags

Example file:

    # long-range grid
    grid.range_m = 204.8
    grid.voxel_size = 0.2,0.2,6
    metrics.bin_edges = 35,50,75,100,inf
    seed = 7
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional

from django.conf import settings
from dotenv import dotenv_values

from .core import GridConfig
from .exceptions import ConfigError, ContractViolation
from .metrics import MetricConfig
from .network import UnetConfig
from .scene_io import SyntheticSceneConfig
from .train import OBJECTIVES

logger = logging.getLogger(__name__)

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}


def _as_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _as_floats(value):
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    return tuple(float(part) for part in str(value).split(',') if part.strip())


def _as_ints(value):
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    return tuple(int(part) for part in str(value).split(',') if part.strip())


def _as_optional_float(value):
    if value is None or str(value).strip().lower() in ('', 'none'):
        return None
    return float(value)


# Every key a config file or flag may set, with its parser.
KEYS = {
    'grid.range_m': float,
    'grid.voxel_size': _as_floats,
    'grid.z_min': float,
    'grid.z_max': float,
    'network.vfe_channels': int,
    'network.vfe_hidden': int,
    'network.encoder_widths': _as_ints,
    'network.kernel_size': int,
    'network.stride': int,
    'network.final_width': int,
    'network.head_hidden': int,
    'network.norm': _as_bool,
    'network.pooling': str,
    'metrics.bin_edges': _as_floats,
    'metrics.rangewise_threshold_mps': float,
    'metrics.threeway_threshold_mps': float,
    'metrics.bucket_width_mps': float,
    'metrics.bucket_cap_mps': float,
    'metrics.strict_bins': _as_bool,
    'scene.n_background_points': int,
    'scene.n_boxes': int,
    'scene.points_per_box': int,
    'scene.dt': float,
    'scene.placement_extent': _as_optional_float,
    'train.lr': float,
    'train.steps': int,
    'train.log_every': int,
    'train.objective': str,
    'seed': int,
    'threads': int,
}
PATH_PREFIX = 'paths.'


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 2000
    log_every: int = 100
    objective: str = 'speed_bucketed'


@dataclass(frozen=True, eq=False)
class RunConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    network: UnetConfig = field(default_factory=UnetConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    scene: Dict[str, object] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    threads: int = 1
    paths: Dict[str, str] = field(default_factory=dict)

    def scene_config(self, seed=None):
        """Generator settings on this run's grid; `seed` defaults to the run seed."""
        return SyntheticSceneConfig(
            grid=self.grid,
            rng_seed=self.seed if seed is None else seed,
            **self.scene,
        )

    def with_network(self, network):
        return replace(self, network=network)


def flatten_settings(section=None):
    """settings.SCENEFLOW as a flat {dotted key: value} dict."""
    source = getattr(settings, 'SCENEFLOW', {}) if section is None else section
    flat = {}
    for name, value in source.items():
        if isinstance(value, dict):
            for key, inner in value.items():
                flat[f'{name}.{key}'] = inner
        else:
            flat[name] = value
    return flat


def read_config_file(path):
    """Raw {key: string} pairs from a key-value config file.

    Raises:
        ConfigError: the file is missing or names an unknown key
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError('--config', f"config file {path} does not exist")
    values = dotenv_values(path, interpolate=False)
    for key, value in values.items():
        if value is None:
            raise ConfigError(key, "expected `key = value`")
        _check_key(key)
    logger.debug("read %d settings from %s", len(values), path)
    return values


def _check_key(key):
    if key not in KEYS and not key.startswith(PATH_PREFIX):
        raise ConfigError(key, "unknown setting")


def _parse(key, value):
    if key.startswith(PATH_PREFIX):
        return str(value)
    try:
        return KEYS[key](value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"cannot parse {value!r}: {exc}") from exc


def _section(flat, prefix):
    cut = len(prefix) + 1
    return {key[cut:]: value for key, value in flat.items() if key.startswith(prefix + '.')}


def _build(section_name, factory, values):
    try:
        return factory(**values)
    except ContractViolation as exc:
        raise ConfigError(section_name, str(exc)) from exc


def load_run_config(path=None, overrides=None, defaults=None):
    """Layer settings, the optional config file and flag overrides into a RunConfig.

    `overrides` maps dotted keys to values; None values are ignored so unset
    flags do not mask file values.
    """
    flat = {}
    for key, value in flatten_settings(defaults).items():
        _check_key(key)
        flat[key] = _parse(key, value)
    if path is not None:
        for key, value in read_config_file(path).items():
            flat[key] = _parse(key, value)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        _check_key(key)
        flat[key] = _parse(key, value)

    grid = _build('grid', GridConfig, _section(flat, 'grid'))
    network = _build('network', UnetConfig, _section(flat, 'network'))
    metric_config = _build('metrics', MetricConfig, _section(flat, 'metrics'))
    train = TrainConfig(**_section(flat, 'train'))
    if train.steps < 0:
        raise ConfigError('train.steps', "must be >= 0")
    if train.objective not in OBJECTIVES:
        raise ConfigError('train.objective', f"must be one of {OBJECTIVES}, got {train.objective!r}")
    threads = flat.get('threads', 1)
    if threads < 1:
        raise ConfigError('threads', f"must be >= 1, got {threads}")
    return RunConfig(
        grid=grid,
        network=network,
        metrics=metric_config,
        scene=_section(flat, 'scene'),
        train=train,
        seed=flat.get('seed', 0),
        threads=threads,
        paths=_section(flat, 'paths'),
    )
