import copy
import logging
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from importlib import resources
from typing import Any, Dict, Optional, Tuple

import yaml

from .error_types import ConfigError, ConfigParseError, ConfigValidationError
from .fusion import AblationMode
from .simenv import CameraConfig, MaterialProfile, PoseJitter, ScenarioSpec, SimConfig
from .slipdata import OBJECT_KINDS
from .utils import atomic_write, canonical_hash

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = 'LAYERGRASP_OUTPUT_ROOT'
SLIP_PLANNERS = ('network', 'annotated')


@dataclass(frozen=True)
class SACConfig:
    """Soft actor-critic hyperparameters (defaults from the published training table)"""
    lr: float = 0.003
    gradient_steps: int = 3
    buffer_size: int = 10000
    learning_starts: int = 10
    gamma: float = 0.99
    batch_size: int = 64
    alpha: float = 0.2
    hidden: int = 64
    encoder_grad_from_actor: bool = False
    log_std_min: float = -5.0
    log_std_max: float = 2.0


@dataclass(frozen=True)
class SlipConfig:
    planner: str = 'network'
    checkpoint: Optional[str] = None
    samples: int = 600
    holdout: float = 0.2
    epochs: int = 8
    batch_size: int = 4
    lr: float = 0.001
    positive_weight: float = 20.0
    max_steps: int = 2000
    augment_attempts: int = 10
    pixel_tolerance: float = 5.0


@dataclass(frozen=True)
class FusionConfig:
    symmetric_cross_attention: bool = False


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration of a training or evaluation run"""
    scenarios: Tuple[str, ...] = ('printer_book', 'winter_fabric')
    seeds: Tuple[int, ...] = (0, 1, 2)
    episodes: int = 3000
    eval_episodes: int = 200
    mode: str = 'Ours'
    num_envs: int = 2
    deterministic: bool = False
    output_root: str = 'runs'
    log_every: int = 100
    sac: SACConfig = field(default_factory=SACConfig)
    slip: SlipConfig = field(default_factory=SlipConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    @property
    def ablation(self) -> AblationMode:
        return AblationMode(self.mode)

    def output_root_resolved(self) -> str:
        return os.environ.get(OUTPUT_ROOT_ENV, self.output_root)


def _parse_yaml(text: str, source: str) -> Dict[str, Any]:
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        line = mark.line + 1 if mark is not None else None
        logger.error(f"Malformed config {source}: {str(e)}")
        raise ConfigParseError(f"malformed config {source}: {getattr(e, 'problem', None) or e}", line)
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigParseError(f"config {source} must be a mapping at top level, got {type(document).__name__}")
    return document


@lru_cache(maxsize=1)
def _packaged_document() -> Dict[str, Any]:
    text = resources.files('layergrasp').joinpath('scenarios.yaml').read_text(encoding='utf-8')
    return _parse_yaml(text, 'scenarios.yaml')


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _coerce(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        return _coerce(value, next(a for a in args if a is not type(None)), key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigValidationError(key, f"expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigValidationError(key, f"expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(v, a, f"{key}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigValidationError(key, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(key, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigValidationError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: Any, prefix: str, nested: Optional[Dict[str, Any]] = None):
    """Builds a frozen dataclass from a mapping, rejecting unknown keys"""
    if not isinstance(data, dict):
        raise ConfigValidationError(prefix.rstrip('.') or '<root>', f"expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigValidationError(f"{prefix}{key}", "unknown key")
    nested = nested or {}
    kwargs = {}
    for f in fields(cls):
        if f.name in nested:
            kwargs[f.name] = nested[f.name]
        elif f.name in data:
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], f"{prefix}{f.name}")
    return cls(**kwargs)


def _build_sim(data: Dict[str, Any]) -> SimConfig:
    materials = {}
    for name, profile in (data.get('materials') or {}).items():
        if isinstance(profile, dict):
            if profile.get('name', name) != name:
                raise ConfigValidationError(f"sim.materials.{name}.name", f"must equal the key '{name}'")
            profile = {**profile, 'name': name}
        materials[name] = _build(MaterialProfile, profile, f"sim.materials.{name}.")
    scenarios = {
        name: _build(ScenarioSpec, spec, f"sim.scenarios.{name}.")
        for name, spec in (data.get('scenarios') or {}).items()
    }
    nested = {
        'camera': _build(CameraConfig, data.get('camera', {}), 'sim.camera.'),
        'pose_jitter': _build(PoseJitter, data.get('pose_jitter', {}), 'sim.pose_jitter.'),
        'materials': materials,
        'scenarios': scenarios,
    }
    return _build(SimConfig, data, 'sim.', nested)


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigValidationError(key, message)


def validate_config(config: RunConfig) -> None:
    """Range checks; failures name the dotted key"""
    sac = config.sac
    _require(sac.lr > 0, 'sac.lr', f"must be positive, got {sac.lr}")
    _require(sac.gradient_steps >= 1, 'sac.gradient_steps', f"must be at least 1, got {sac.gradient_steps}")
    _require(sac.batch_size >= 1, 'sac.batch_size', f"must be at least 1, got {sac.batch_size}")
    _require(sac.buffer_size >= sac.batch_size, 'sac.buffer_size',
             f"must hold at least one batch ({sac.buffer_size} < {sac.batch_size})")
    _require(sac.learning_starts >= 0, 'sac.learning_starts', f"must be non-negative, got {sac.learning_starts}")
    _require(0.0 < sac.gamma <= 1.0, 'sac.gamma', f"must lie in (0, 1], got {sac.gamma}")
    _require(sac.alpha >= 0, 'sac.alpha', f"must be non-negative, got {sac.alpha}")
    _require(sac.hidden >= 1, 'sac.hidden', f"must be at least 1, got {sac.hidden}")
    _require(sac.log_std_min < sac.log_std_max, 'sac.log_std_min', "must be below sac.log_std_max")

    slip = config.slip
    _require(slip.planner in SLIP_PLANNERS, 'slip.planner', f"must be one of {SLIP_PLANNERS}, got '{slip.planner}'")
    _require(slip.samples >= 1, 'slip.samples', f"must be at least 1, got {slip.samples}")
    _require(0.0 <= slip.holdout < 1.0, 'slip.holdout', f"must lie in [0, 1), got {slip.holdout}")
    for key in ('epochs', 'batch_size', 'max_steps', 'augment_attempts'):
        _require(getattr(slip, key) >= 1, f"slip.{key}", f"must be at least 1, got {getattr(slip, key)}")
    for key in ('lr', 'positive_weight', 'pixel_tolerance'):
        _require(getattr(slip, key) > 0, f"slip.{key}", f"must be positive, got {getattr(slip, key)}")

    sim = config.sim
    for key in ('f_sat', 'kappa', 'force_window_width', 'standoff_mm'):
        _require(getattr(sim, key) > 0, f"sim.{key}", f"must be positive, got {getattr(sim, key)}")
    for key in ('layer_force', 'force_noise', 'torque_noise', 'tactile_noise', 'table_noise_mm', 'thumb_gain'):
        _require(getattr(sim, key) >= 0, f"sim.{key}", f"must be non-negative, got {getattr(sim, key)}")
    _require(sim.quadrature_nodes >= 2, 'sim.quadrature_nodes', f"must be at least 2, got {sim.quadrature_nodes}")
    _require(sim.camera.fx > 0 and sim.camera.fy > 0, 'sim.camera.fx', "focal lengths must be positive")
    _require(sim.camera.image_height % 4 == 0 and sim.camera.image_width % 4 == 0, 'sim.camera.image_height',
             "image dimensions must be divisible by 4")
    for name, material in sim.materials.items():
        material.validate(f"sim.materials.{name}")
    for name, spec in sim.scenarios.items():
        _require(spec.object in OBJECT_KINDS, f"sim.scenarios.{name}.object",
                 f"must be one of {OBJECT_KINDS}, got '{spec.object}'")
        _require(spec.layers >= 1, f"sim.scenarios.{name}.layers", f"must be at least 1, got {spec.layers}")
        _require(len(spec.materials) >= 1, f"sim.scenarios.{name}.materials", "needs at least one material")
        for material in spec.materials:
            _require(material in sim.materials, f"sim.scenarios.{name}.materials",
                     f"unknown material '{material}'")

    _require(config.episodes >= 1, 'episodes', f"must be at least 1, got {config.episodes}")
    _require(config.eval_episodes >= 1, 'eval_episodes', f"must be at least 1, got {config.eval_episodes}")
    _require(config.num_envs >= 1, 'num_envs', f"must be at least 1, got {config.num_envs}")
    _require(config.log_every >= 1, 'log_every', f"must be at least 1, got {config.log_every}")
    _require(len(config.seeds) >= 1, 'seeds', "needs at least one seed")
    _require(len(config.scenarios) >= 1, 'scenarios', "needs at least one scenario")
    for name in config.scenarios:
        _require(name in sim.scenarios, 'scenarios', f"unknown scenario '{name}'")
    modes = [m.value for m in AblationMode]
    _require(config.mode in modes, 'mode', f"must be one of {modes}, got '{config.mode}'")


def config_from_document(document: Dict[str, Any]) -> RunConfig:
    merged = deep_merge(_packaged_document(), document)
    nested = {
        'sac': _build(SACConfig, merged.get('sac', {}), 'sac.'),
        'slip': _build(SlipConfig, merged.get('slip', {}), 'slip.'),
        'fusion': _build(FusionConfig, merged.get('fusion', {}), 'fusion.'),
        'sim': _build_sim(merged.get('sim', {})),
    }
    config = _build(RunConfig, merged, '', nested)
    validate_config(config)
    return config


def load_config(path: Optional[str] = None) -> RunConfig:
    """Reads a YAML run config; missing keys fall back to packaged defaults"""
    if path is None:
        return config_from_document({})
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as e:
        logger.error(f"Cannot read config {path}: {str(e)}")
        raise ConfigError(f"cannot read config {path}: {e.strerror or str(e)}") from e
    config = config_from_document(_parse_yaml(text, path))
    logger.info(f"Loaded config {path} (hash {config_hash(config)[:12]})")
    return config


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(config: RunConfig) -> Dict[str, Any]:
    document = _plain(asdict(config))
    for profile in document['sim']['materials'].values():
        profile.pop('name', None)
    return document


def config_hash(config: RunConfig) -> str:
    return canonical_hash(config_to_dict(config))


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False, default_flow_style=False)


def echo_config(config: RunConfig, run_dir: str) -> str:
    """Writes the resolved config into the run directory"""
    path = os.path.join(run_dir, 'config.yaml')
    atomic_write(path, dump_config(config))
    return path


def with_overrides(config: RunConfig, **changes) -> RunConfig:
    """Copy with top-level fields replaced and revalidated"""
    updated = replace(config, **changes)
    validate_config(updated)
    return updated

