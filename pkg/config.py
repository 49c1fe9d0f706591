"""
config.py  —  Dash-cam velocity estimation
All tunables in one place: .env defaults, per-stage config dataclasses,
the versioned pipeline config document and the tagged stderr logger.

Precedence, lowest first: dataclass defaults < environment / .env
< --config JSON < command-line flags.
"""

import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Union

from dotenv import load_dotenv

from geometry import ConfigError, InvalidArgument

load_dotenv()

CONFIG_VERSION = 1

ENV_SEED      = 'VELOCITY_SEED'
ENV_JOBS      = 'VELOCITY_JOBS'
ENV_LOG_LEVEL = 'VELOCITY_LOG_LEVEL'


def env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f'{name} must be an integer, got {raw!r}')


# ─── Logging ─────────────────────────────────────────────────────────────────

_LOG_FORMAT = '[%(name)s] %(message)s'


def get_logger(tag: str) -> logging.Logger:
    """Logger that prints `[Tag] message` lines on stderr."""
    logger = logging.getLogger(tag)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        logger.addHandler(handler)
        logger.propagate = False
        logger.setLevel(os.environ.get(ENV_LOG_LEVEL, 'INFO').upper())
    return logger


def set_log_level(level: str):
    for name in list(logging.Logger.manager.loggerDict):
        logger = logging.getLogger(name)
        if logger.handlers:
            logger.setLevel(level)
    os.environ[ENV_LOG_LEVEL] = level


# ─── Strict mapping → dataclass ──────────────────────────────────────────────

def from_mapping(cls, data, section: str):
    """Build a config dataclass from a dict, rejecting keys it doesn't know."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f'{section}: expected an object, got {type(data).__name__}')
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f'{section}: unknown keys {unknown}')
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f'{section}: {e}') from e


def to_mapping(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _positive(section, **values):
    for name, value in values.items():
        if value is None or value <= 0:
            raise ConfigError(f'{section}.{name} must be > 0, got {value}')


# ─── Stage configs ───────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrackerConfig:
    grid: int = 10
    pyramid_levels: int = 3
    lk_window: int = 11
    lk_max_iterations: int = 20
    lk_epsilon: float = 0.01
    keep_fraction: float = 0.5
    failure_fb_threshold: float = 10.0
    ncc_search_radius: int = 16
    min_patch_ncc: float = 0.5
    max_scale_change: float = 2.5
    fallback_min_ncc: float = 0.5

    def __post_init__(self):
        _positive('tracker', grid=self.grid, pyramid_levels=self.pyramid_levels,
                  lk_window=self.lk_window, lk_max_iterations=self.lk_max_iterations,
                  lk_epsilon=self.lk_epsilon, keep_fraction=self.keep_fraction,
                  failure_fb_threshold=self.failure_fb_threshold,
                  ncc_search_radius=self.ncc_search_radius)
        if self.keep_fraction > 1:
            raise ConfigError(f'tracker.keep_fraction must be in (0, 1], got {self.keep_fraction}')
        for name in ('min_patch_ncc', 'fallback_min_ncc'):
            value = getattr(self, name)
            if not -1.0 <= value <= 1.0:
                raise ConfigError(f'tracker.{name} must be in [-1, 1], got {value}')
        if not self.max_scale_change > 1:
            raise ConfigError(f'tracker.max_scale_change must be > 1, got {self.max_scale_change}')
        if self.lk_window % 2 != 1:
            raise ConfigError(f'tracker.lk_window must be odd, got {self.lk_window}')


@dataclass(frozen=True)
class FeatureConfig:
    frame_skip: int = 5
    shrink_fraction: float = 0.1
    gaussian_taps: int = 5
    gaussian_sigma: float = 1.0
    include_track: bool = True
    include_flow: bool = False
    include_depth: bool = False
    smooth_track: bool = True
    image_width: int = 1280
    image_height: int = 720

    def __post_init__(self):
        _positive('features', frame_skip=self.frame_skip, gaussian_taps=self.gaussian_taps,
                  gaussian_sigma=self.gaussian_sigma, image_width=self.image_width,
                  image_height=self.image_height)
        if self.gaussian_taps % 2 != 1:
            raise ConfigError(f'features.gaussian_taps must be odd, got {self.gaussian_taps}')
        if not 0.0 <= self.shrink_fraction < 1.0:
            raise ConfigError(f'features.shrink_fraction must be in [0, 1), got {self.shrink_fraction}')
        if not (self.include_track or self.include_flow or self.include_depth):
            raise ConfigError('features: enable at least one of track, flow, depth')

    @property
    def channels(self):
        names = []
        if self.include_track:
            names.append('track')
        if self.include_flow:
            names.append('flow')
        if self.include_depth:
            names.append('depth')
        return tuple(names)

    def with_channels(self, channels):
        channels = set(channels)
        unknown = channels - {'track', 'flow', 'depth'}
        if unknown:
            raise ConfigError(f'features: unknown channels {sorted(unknown)}')
        return replace(self, include_track='track' in channels,
                       include_flow='flow' in channels, include_depth='depth' in channels)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    dropout_rate: float = 0.2
    epochs: int = 2000
    batch_size: int = 50
    early_stop_patience: int = 500
    rng_seed: int = 0

    def __post_init__(self):
        _positive('train', learning_rate=self.learning_rate, adam_eps=self.adam_eps,
                  epochs=self.epochs, batch_size=self.batch_size)
        if self.early_stop_patience < 1:
            raise ConfigError(f'train.early_stop_patience must be >= 1, got {self.early_stop_patience}')
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError('train.beta1 and train.beta2 must be in [0, 1)')
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f'train.dropout_rate must be in [0, 1), got {self.dropout_rate}')
        if self.weight_decay < 0:
            raise ConfigError(f'train.weight_decay must be >= 0, got {self.weight_decay}')


@dataclass(frozen=True)
class AreaSplitConfig:
    near_area_threshold: float
    far_area_threshold: float

    def __post_init__(self):
        if not self.near_area_threshold > self.far_area_threshold > 0:
            raise InvalidArgument(
                f'area thresholds need near > far > 0, got near={self.near_area_threshold} '
                f'far={self.far_area_threshold}')

    def to_dict(self):
        return {'near_area': self.near_area_threshold, 'far_area': self.far_area_threshold}

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict) or set(data) != {'near_area', 'far_area'}:
            raise ConfigError(f'split needs exactly near_area and far_area, got {data!r}')
        return cls(float(data['near_area']), float(data['far_area']))


# ─── Pipeline document ───────────────────────────────────────────────────────

PROFILES = ('full', 'ablation')
ROUTE_TRAIN = ('bucketed', 'all')


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    jobs: int = 1
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: Union[str, AreaSplitConfig] = 'calibrate'
    profile: str = 'full'
    route_train: str = 'bucketed'

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ConfigError(f'profile must be one of {PROFILES}, got {self.profile!r}')
        if self.route_train not in ROUTE_TRAIN:
            raise ConfigError(f'route_train must be one of {ROUTE_TRAIN}, got {self.route_train!r}')
        if self.jobs < 1:
            raise ConfigError(f'jobs must be >= 1, got {self.jobs}')
        if isinstance(self.split, str) and self.split != 'calibrate':
            raise ConfigError(f'split must be "calibrate" or an area object, got {self.split!r}')

    def to_dict(self):
        return {
            'version': CONFIG_VERSION,
            'seed': self.seed,
            'jobs': self.jobs,
            'tracker': to_mapping(self.tracker),
            'features': to_mapping(self.features),
            'train': to_mapping(self.train),
            'split': self.split if isinstance(self.split, str) else self.split.to_dict(),
            'profile': self.profile,
            'route_train': self.route_train,
        }


_TOP_KEYS = {'version', 'seed', 'jobs', 'tracker', 'features', 'train', 'split', 'profile', 'route_train'}


def env_defaults() -> PipelineConfig:
    seed = env_int(ENV_SEED, 0)
    return PipelineConfig(seed=seed, jobs=env_int(ENV_JOBS, 1), train=TrainConfig(rng_seed=seed))


def parse_pipeline_config(data: dict, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    base = base or env_defaults()
    if not isinstance(data, dict):
        raise ConfigError('config document must be a JSON object')
    unknown = sorted(set(data) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f'config: unknown keys {unknown}')
    version = data.get('version', CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f'config version {version!r} not supported (expected {CONFIG_VERSION})')

    seed = data.get('seed', base.seed)
    changes = {'seed': seed, 'jobs': data.get('jobs', base.jobs)}
    if 'tracker' in data:
        changes['tracker'] = from_mapping(TrackerConfig, data['tracker'], 'tracker')
    if 'features' in data:
        changes['features'] = from_mapping(FeatureConfig, data['features'], 'features')
    if 'train' in data:
        train = dict(data['train'] or {})
        train.setdefault('rng_seed', seed)
        changes['train'] = from_mapping(TrainConfig, train, 'train')
    elif 'seed' in data:
        changes['train'] = replace(base.train, rng_seed=seed)
    if 'split' in data:
        split = data['split']
        changes['split'] = split if isinstance(split, str) else AreaSplitConfig.from_dict(split)
    for key in ('profile', 'route_train'):
        if key in data:
            changes[key] = data[key]
    return replace(base, **changes)


def load_pipeline_config(path: Optional[str]) -> PipelineConfig:
    if not path:
        return env_defaults()
    with open(path, 'r', encoding='utf-8') as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f'{path}: not valid JSON ({e})') from e
    return parse_pipeline_config(data)
