"""
Experiment configuration: dataclass sections, the defaults table and the
``key = value`` file format.

Keys are dotted (``dgd.k_max = 5``), ``#`` starts a comment, lists are comma
separated and the literal ``auto`` selects a derived value where allowed.
"""

import hashlib
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

from .exceptions import PatConfigError

logger = logging.getLogger(__name__)


@dataclass
class GeometryConfig:
    dims: Tuple[int, ...] = (64, 64)
    dx: float = 84.75e-6
    sound_speed: float = 1580.0
    n_t: int = 128
    dt: Optional[float] = None
    sensor_pitch: int = 2
    padding: int = 32
    subsample_factor: int = 4
    mask_seed: int = 7


@dataclass
class DataConfig:
    n_train: int = 64
    n_test: int = 16
    n_transfer: int = 16
    snr: float = 15.0
    background: bool = False
    phantom: str = "vessels"
    data_seed: int = 1
    test_seed: int = 999
    transfer_seed: int = 555
    background_sigma: float = 2.0


@dataclass
class DgdConfig:
    k_max: int = 5
    steps_per_stage: int = 2000
    batch: int = 2
    lr: float = 5e-5
    loss_add_alpha: float = 0.01
    loss_add_beta: Optional[float] = None
    transfer_lr: float = 1e-5
    transfer_epochs: int = 10
    seed: int = 11
    warm_start: bool = False
    log_every: int = 200


@dataclass
class UnetConfig:
    epochs: int = 30
    lr: float = 1e-4
    batch: int = 2
    loss_add_alpha: float = 0.01
    loss_add_beta: Optional[float] = None
    transfer_lr: float = 1e-5
    transfer_epochs: int = 10
    seed: int = 13


@dataclass
class TvConfig:
    lambda_grid: Tuple[float, ...] = (1e-5, 3.1622776601683795e-05, 1e-4, 3.1622776601683795e-04,
                                      1e-3, 3.1622776601683795e-03, 1e-2)
    inner_iters: int = 20
    iterations: int = 20
    lipschitz_iters: int = 30
    reference_lambda: float = 1e-4


@dataclass
class BenchConfig:
    iteration_points: Tuple[int, ...] = (1, 2, 5, 10, 20, 50)
    timing_runs: int = 5
    timing_iterations: int = 5
    noise_scale: float = 0.2
    sound_speed_shift: float = 0.01
    robustness_seed: int = 2024


@dataclass
class RunConfig:
    threads: int = 1


@dataclass
class ExperimentConfig:
    """Complete, validated configuration of one experiment directory."""
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    data: DataConfig = field(default_factory=DataConfig)
    dgd: DgdConfig = field(default_factory=DgdConfig)
    unet: UnetConfig = field(default_factory=UnetConfig)
    tv: TvConfig = field(default_factory=TvConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def with_seed(self, seed: int) -> 'ExperimentConfig':
        """Override the training-data and network seeds from one base seed."""
        return replace(
            self,
            data=replace(self.data, data_seed=seed),
            dgd=replace(self.dgd, seed=seed + 1),
            unet=replace(self.unet, seed=seed + 2),
        )

    def with_threads(self, threads: int) -> 'ExperimentConfig':
        return replace(self, run=replace(self.run, threads=threads))


class ConfigDefaults:
    """Centralized section table, value rules and parsing helpers."""

    SECTIONS = {
        'geometry': GeometryConfig,
        'data': DataConfig,
        'dgd': DgdConfig,
        'unet': UnetConfig,
        'tv': TvConfig,
        'bench': BenchConfig,
        'run': RunConfig,
    }

    # keys that accept the literal 'auto' (stored as None)
    AUTO_KEYS = {'geometry.dt', 'dgd.loss_add_beta', 'unet.loss_add_beta'}

    PHANTOM_KINDS = ('tubes', 'vessels', 'tumor')

    POSITIVE = {
        'geometry.dx', 'geometry.sound_speed', 'geometry.n_t', 'geometry.dt',
        'geometry.sensor_pitch', 'geometry.subsample_factor',
        'data.n_train', 'data.n_test', 'data.n_transfer', 'data.snr', 'data.background_sigma',
        'dgd.k_max', 'dgd.steps_per_stage', 'dgd.batch', 'dgd.lr', 'dgd.loss_add_alpha',
        'dgd.loss_add_beta', 'dgd.transfer_epochs', 'dgd.log_every',
        'unet.epochs', 'unet.lr', 'unet.batch', 'unet.loss_add_alpha', 'unet.loss_add_beta',
        'unet.transfer_epochs',
        'tv.lambda_grid', 'tv.inner_iters', 'tv.iterations', 'tv.lipschitz_iters',
        'tv.reference_lambda',
        'bench.iteration_points', 'bench.timing_runs', 'bench.timing_iterations',
        'run.threads',
    }

    NON_NEGATIVE = {
        'geometry.padding', 'dgd.transfer_lr', 'unet.transfer_lr',
        'bench.noise_scale', 'bench.sound_speed_shift',
    }

    MIN_GRID_EXTENT = 16

    @classmethod
    def field_types(cls, section: str) -> Dict[str, Any]:
        return {f.name: f for f in fields(cls.SECTIONS[section])}

    @classmethod
    def parse_value(cls, key: str, default: Any, text: str) -> Any:
        """Convert ``text`` to the type of the field's default value."""
        if text == 'auto':
            if key in cls.AUTO_KEYS:
                return None
            raise ValueError("'auto' is not allowed for this key")
        if key in cls.AUTO_KEYS:
            return float(text)
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ('true', 'false'):
                raise ValueError(f"expected true or false, got '{text}'")
            return lowered == 'true'
        if isinstance(default, tuple):
            element: Callable = int if all(isinstance(v, int) for v in default) else float
            items = [item.strip() for item in text.split(',') if item.strip()]
            if not items:
                raise ValueError("expected a comma separated list")
            return tuple(element(item) for item in items)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text

    @classmethod
    def format_value(cls, value: Any) -> str:
        if value is None:
            return 'auto'
        if isinstance(value, bool):
            return 'true' if value else 'false'
        if isinstance(value, tuple):
            return ', '.join(cls.format_value(v) for v in value)
        if isinstance(value, float):
            return repr(value)
        return str(value)

    @classmethod
    def check_range(cls, key: str, value: Any) -> None:
        values = value if isinstance(value, tuple) else (value,)
        for v in values:
            if v is None or isinstance(v, (bool, str)):
                continue
            if key in cls.POSITIVE and not v > 0:
                raise ValueError(f"must be positive, got {v}")
            if key in cls.NON_NEGATIVE and not v >= 0:
                raise ValueError(f"must be non-negative, got {v}")
        if key == 'geometry.dims':
            if not 1 <= len(value) <= 3:
                raise ValueError(f"grids must have 1 to 3 axes, got {len(value)}")
            if min(value) < cls.MIN_GRID_EXTENT:
                raise ValueError(f"every axis needs at least {cls.MIN_GRID_EXTENT} voxels")
        if key == 'data.phantom' and value not in cls.PHANTOM_KINDS:
            raise ValueError(f"unknown phantom kind '{value}', expected one of {cls.PHANTOM_KINDS}")


def parse_config(text: str) -> ExperimentConfig:
    """
    Parse ``key = value`` text into a validated configuration.

    Args:
        text: Configuration file contents; unset keys keep their defaults

    Returns:
        ExperimentConfig

    Raises:
        PatConfigError: On a malformed line, unknown key, bad value or out-of-range value
    """
    sections = {name: {} for name in ConfigDefaults.SECTIONS}
    seen = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise PatConfigError("expected 'key = value'", line=number)
        key, value = (part.strip() for part in line.split('=', 1))
        if key.count('.') != 1:
            raise PatConfigError("keys take the form section.name", key=key, line=number)
        section, name = key.split('.')
        if section not in ConfigDefaults.SECTIONS:
            raise PatConfigError(f"unknown section '{section}'", key=key, line=number)
        known = ConfigDefaults.field_types(section)
        if name not in known:
            raise PatConfigError("unknown key", key=key, line=number)
        if key in seen:
            raise PatConfigError(f"duplicate key (first set on line {seen[key]})", key=key, line=number)
        seen[key] = number
        default = getattr(ConfigDefaults.SECTIONS[section](), name)
        try:
            parsed = ConfigDefaults.parse_value(key, default, value)
            ConfigDefaults.check_range(key, parsed)
        except ValueError as e:
            raise PatConfigError(str(e), key=key, line=number)
        sections[section][name] = parsed
    config = ExperimentConfig(**{name: cls(**sections[name])
                                 for name, cls in ConfigDefaults.SECTIONS.items()})
    if config.geometry.subsample_factor > _full_sensor_count(config.geometry):
        raise PatConfigError("sub-sampling factor exceeds the number of sensor locations",
                             key='geometry.subsample_factor', line=seen.get('geometry.subsample_factor'))
    return config


def _full_sensor_count(geometry: GeometryConfig) -> int:
    count = 1
    for extent in geometry.dims[1:]:
        count *= -(-extent // geometry.sensor_pitch)
    return count


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config`` of the result gives an equal config."""
    lines = []
    for section in ConfigDefaults.SECTIONS:
        block = getattr(config, section)
        for f in fields(block):
            lines.append(f"{section}.{f.name} = {ConfigDefaults.format_value(getattr(block, f.name))}")
    return '\n'.join(lines) + '\n'


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(config).encode('utf-8')).hexdigest()


def load_config(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    """Read a configuration file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise PatConfigError(f"configuration file not found: {path}")
    try:
        text = path.read_text(encoding='utf-8')
    except (OSError, UnicodeDecodeError) as e:
        raise PatConfigError(f"cannot read {path}: {e}")
    logger.debug("loaded configuration from %s", path)
    return parse_config(text)
