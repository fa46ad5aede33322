"""
Configuration for the GP flow toolkit
Module-level numerical defaults, per-dataset presets and the RunConfig tree
that every command serializes into its run directory
"""

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Optional

import torch

from core.errors import ConfigError
from core.toydata import DatasetSpec

# Numerics
DTYPE = torch.float64
EPS_CLIP = 1e-12            # erf^-1 refuses |y| >= 1 - EPS_CLIP
ESCAPE_TOL = 1e-9           # particles may overshoot the cube faces by this much
DEFAULT_N_STEPS = 15
DEFAULT_EULER_DT = 2 * float(torch.finfo(torch.float64).eps) ** 0.5

# Runs
SCHEMA_VERSION = 1
RUNS_DIR = os.environ.get('GPFLOW_RUNS_DIR', 'runs')
DEFAULT_N_EVAL = 2000
MAX_DISCRETE_OT = 4096

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

BASE_FLOW_KINDS = ('identity', 'scale', 'synthetic', 'coupling')
GP_MODES = ('forward', 'backward')


@dataclass
class BaseFlowSpec:
    """Base flow f (data -> Gaussian) and its maximum-likelihood training"""
    kind: str = 'coupling'
    dim: int = 2
    n_layers: int = 6
    hidden: tuple = (32, 32)
    scale: float = 2.0
    invertible: bool = True
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 500
    holdout: float = 0.2


@dataclass
class GpSpec:
    """Shape of the velocity field and of its RK4 discretization"""
    mode: str = 'forward'
    hidden: tuple = (15, 15)
    n_steps: int = DEFAULT_N_STEPS
    t_final: float = 1.0
    boundary: str = 'cube'
    final_scale: float = 0.01
    orientation: int = 1


@dataclass
class EulerSpec:
    """Euler penalty weight schedule and probe settings"""
    lambda0: float = 0.0
    decay_factor: float = 2.0
    decay_period: Optional[int] = None
    n_decays: int = 5
    dt: float = DEFAULT_EULER_DT
    probes_per_point: int = 1
    jvp: str = 'autograd'


@dataclass
class OptimSpec:
    """Adam settings of the GP fit"""
    lr: float = 1e-2
    batch_size: int = 1000
    epochs: int = 2000
    epoch_samples: int = 20000
    monitor_size: int = 500


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    base: BaseFlowSpec = field(default_factory=BaseFlowSpec)
    gp: GpSpec = field(default_factory=GpSpec)
    euler: EulerSpec = field(default_factory=EulerSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    seed: int = 0
    output_dir: str = ''
    checkpoint_every: int = 0
    report_every: int = 50
    n_eval: int = DEFAULT_N_EVAL

    @property
    def dim(self):
        return self.base.dim

    def to_dict(self):
        data = asdict(self)
        data['schema_version'] = SCHEMA_VERSION
        return data

    @classmethod
    def from_dict(cls, data):
        """Build a RunConfig from a JSON-like dict, rejecting unknown keys"""
        data = dict(data)
        version = data.pop('schema_version', SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"Unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        return _build(cls, data, '')


# Settings of the 2D runs; "layers" of the hyper-parameter table are RK4 steps
DATASET_PRESETS = {
    'eight_gaussians': {
        'dataset': {'name': 'eight_gaussians'},
        'gp': {'n_steps': 20, 'hidden': [15, 15]},
        'euler': {'lambda0': 0.0, 'n_decays': 5},
        'optim': {'epochs': 2000, 'batch_size': 1000, 'lr': 1e-2},
    },
    'two_moons': {
        'dataset': {'name': 'two_moons'},
        'gp': {'n_steps': 15, 'hidden': [15, 15]},
        'euler': {'lambda0': 0.0, 'n_decays': 5},
        'optim': {'epochs': 1000, 'batch_size': 1000, 'lr': 2e-3},
    },
    'pinwheel': {
        'dataset': {'name': 'pinwheel'},
        'gp': {'n_steps': 15, 'hidden': [15, 15]},
        'euler': {'lambda0': 5e-4, 'n_decays': 4},
        'optim': {'epochs': 800, 'batch_size': 1000, 'lr': 2e-3},
    },
}

HIGH_DIM_PRESET = {
    'gp': {'hidden': [50, 50, 50]},
    'euler': {'lambda0': 5e-5, 'n_decays': 10},
    'optim': {'lr': 5e-4, 'batch_size': 1024},
}

PRESETS = {**DATASET_PRESETS, 'high_dim': HIGH_DIM_PRESET}


def _build(cls, data, prefix):
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError([f"Unknown config key '{prefix}{key}'" for key in unknown])

    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name in known else None
        if is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"'{prefix}{name}' must be an object")
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"'{prefix}{name}' must be a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{prefix.rstrip('.') or 'config'}': {e}") from e


def merge_dicts(base, update):
    """Recursive dict merge; values from update win"""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_dicts(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(text):
    """
    Parse a 'dotted.key=value' flag into a nested dict

    Values are read as JSON when possible, otherwise kept as strings.

    Examples:
        parse_override('optim.lr=0.01') -> {'optim': {'lr': 0.01}}
        parse_override('dataset.name=pinwheel') -> {'dataset': {'name': 'pinwheel'}}
    """
    if '=' not in text:
        raise ConfigError(f"Override '{text}' must look like key=value")
    key, raw = text.split('=', 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = [p for p in key.strip().split('.') if p]
    if not parts:
        raise ConfigError(f"Override '{text}' has an empty key")
    nested = value
    for part in reversed(parts):
        nested = {part: nested}
    return nested


def preset_dict(name):
    if name not in PRESETS:
        raise ConfigError(f"Unknown preset '{name}'. Expected one of: {', '.join(PRESETS)}")
    return copy.deepcopy(PRESETS[name])


def load_run_config(path=None, overrides=(), preset=None):
    """
    Assemble and validate a RunConfig

    Layers, later wins: defaults, preset, JSON file at path, dotted overrides.

    Raises:
        ConfigError: unreadable file, unknown keys or failed validation
    """
    # imported here: validation needs core modules that import this file
    from utils.validation import validate_run_config

    data = RunConfig().to_dict()
    if preset:
        data = merge_dicts(data, preset_dict(preset))
    if path:
        try:
            with open(path) as fh:
                data = merge_dicts(data, json.load(fh))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e
    for text in overrides:
        data = merge_dicts(data, parse_override(text))

    config = RunConfig.from_dict(data)
    is_valid, errors = validate_run_config(config)
    if not is_valid:
        raise ConfigError(errors)
    return config


def dump_run_config(config, path):
    with open(path, 'w') as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write('\n')
