"""
Run configuration: YAML file plus command-line overrides.

A config file is a YAML mapping whose sections match RunConfig's fields,
either nested (``train: {alpha: 0.5}``) or as dotted keys
(``train.alpha: 0.5``). Overrides use the dotted form ``section.key=value``.
"""

import hashlib
import json
import logging
import math
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import yaml

from .baselines import BaselineConfig
from .errors import ConfigError, MissingInputError
from .gradcheck import GradCheckConfig
from .model import InferenceConfig, ModelConfig
from .synthetic import SyntheticConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_C_GRID = [0.0, 0.1, 0.25, 0.5, 1.0, 2.0]
DEFAULT_ALPHA_GRID = [0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0]
OUT_ENV = 'MSCAN_OUT'
DEFAULT_OUT = 'runs'


@dataclass
class DataConfig:
    """Where examples come from and how they are split."""

    path: Optional[str] = None
    vocab_dir: Optional[str] = None
    columns: Dict[str, str] = field(default_factory=dict)
    test_fraction: float = 0.4
    filter_users: bool = True

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("data.test_fraction must lie in (0, 1)", key='data.test_fraction')


@dataclass
class EvalConfig:
    batch_size: int = 1024
    group_by_scenario: bool = True
    score_kind: str = 'db'

    def __post_init__(self):
        if self.batch_size <= 0:
            raise ConfigError("eval.batch_size must be positive", key='eval.batch_size')
        if self.score_kind not in ('db', 'uis', 'm'):
            raise ConfigError("eval.score_kind must be db, uis or m", key='eval.score_kind')


@dataclass
class SweepConfig:
    hyper: str = 'c'
    c_grid: List[float] = field(default_factory=lambda: list(DEFAULT_C_GRID))
    alpha_grid: List[float] = field(default_factory=lambda: list(DEFAULT_ALPHA_GRID))
    metric: str = 'auc'

    def __post_init__(self):
        if self.hyper not in ('c', 'alpha'):
            raise ConfigError("sweep.hyper must be c or alpha", key='sweep.hyper')
        if self.metric not in ('auc', 'interest_auc'):
            raise ConfigError("sweep.metric must be auc or interest_auc", key='sweep.metric')

    @property
    def grid(self) -> List[float]:
        return self.c_grid if self.hyper == 'c' else self.alpha_grid


@dataclass
class OutputConfig:
    root: Optional[str] = None
    progress: bool = False


@dataclass
class RunConfig:
    """Every setting of one command run."""

    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    gradcheck: GradCheckConfig = field(default_factory=GradCheckConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seeds: List[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must list at least one seed", key='seeds')
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be unsigned", key='seeds')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def out_root(self) -> Path:
        return Path(self.output.root or os.environ.get(OUT_ENV) or DEFAULT_OUT)


SECTIONS = tuple(f.name for f in fields(RunConfig) if f.name != 'seeds')


def _section_types() -> Dict[str, type]:
    hints = typing.get_type_hints(RunConfig)
    return {name: hints[name] for name in SECTIONS}


def _type_name(annotation) -> str:
    origin = typing.get_origin(annotation)
    if origin is Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        return f"{_type_name(args[0])} or null"
    if origin in (list, List):
        return f"list of {_type_name(typing.get_args(annotation)[0])}"
    if origin in (dict, Dict):
        return 'mapping'
    return getattr(annotation, '__name__', str(annotation))


def coerce_value(key: str, value: Any, annotation) -> Any:
    """
    Check a parsed value against a field annotation.

    Ints are accepted for floats, and strings such as '1e-3' (which YAML
    leaves as strings) are accepted for floats when they parse as one.
    """
    def fail():
        raise ConfigError(f"{key}: expected {_type_name(annotation)}, got {value!r}", key=key)

    origin = typing.get_origin(annotation)
    if origin is Union:
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if value is None:
            return None
        return coerce_value(key, value, args[0])
    if origin in (list, List):
        if not isinstance(value, list):
            fail()
        inner = typing.get_args(annotation)[0]
        return [coerce_value(key, v, inner) for v in value]
    if origin in (dict, Dict):
        if not isinstance(value, dict):
            fail()
        return {str(k): str(v) for k, v in value.items()}
    if annotation is bool:
        if not isinstance(value, bool):
            fail()
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            fail()
        return value
    if annotation is float:
        if isinstance(value, bool):
            fail()
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                parsed = float(value)
            except ValueError:
                fail()
            if math.isnan(parsed):
                fail()
            return parsed
        fail()
    if annotation is str:
        if not isinstance(value, str):
            fail()
        return value
    fail()


def _flatten(doc: Dict[str, Any]) -> Dict[str, Any]:
    flat = {}
    for key, value in doc.items():
        key = str(key)
        if key == 'seeds' or '.' in key:
            flat[key] = value
        elif key in SECTIONS:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ConfigError(f"section {key} must be a mapping", key=key)
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            raise ConfigError(f"unknown config key: {key}", key=key)
    return flat


def parse_override(text: str) -> Dict[str, Any]:
    """'section.key=value' -> {'section.key': parsed value}."""
    if '=' not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value", key=text)
    key, raw = text.split('=', 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        value = raw
    return {key: value}


def build_config(values: Dict[str, Any]) -> RunConfig:
    """Construct a RunConfig from flat dotted keys, rejecting unknown keys and bad types."""
    section_types = _section_types()
    per_section: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
    seeds = None
    for key, value in values.items():
        if key == 'seeds':
            if isinstance(value, int) and not isinstance(value, bool):
                value = [value]
            seeds = coerce_value('seeds', value, List[int])
            continue
        section, _, name = key.partition('.')
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key: {key}", key=key)
        hints = typing.get_type_hints(section_types[section])
        if name not in hints or name not in {f.name for f in fields(section_types[section])}:
            raise ConfigError(f"unknown config key: {key}", key=key)
        per_section[section][name] = coerce_value(key, value, hints[name])

    kwargs = {name: section_types[name](**per_section[name]) for name in SECTIONS}
    if seeds is not None:
        kwargs['seeds'] = seeds
    return RunConfig(**kwargs)


def parse_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Resolve defaults, then the file, then command-line overrides.

    Args:
        path: YAML config file (None for defaults only)
        overrides: 'section.key=value' strings, applied in order

    Returns:
        The validated RunConfig
    """
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise MissingInputError(f"config file not found: {path}", path=str(path))
        try:
            doc = yaml.safe_load(path.read_text(encoding='utf-8'))
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})")
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values.update(_flatten(doc))
    for text in overrides:
        values.update(parse_override(text))
    config = build_config(values)
    logger.debug("Resolved config with %d explicit keys", len(values))
    return config


# Sections whose values change what a command writes. Commands not listed
# depend on every section except output.
ARTIFACT_SECTIONS = {
    'gen-data': ('data', 'synthetic', 'model'),
    'train': ('data', 'synthetic', 'model', 'train', 'seeds'),
    'baseline': ('data', 'synthetic', 'model', 'train', 'baseline', 'seeds'),
}


def config_hash(config: RunConfig, sections: Optional[Sequence[str]] = None) -> str:
    """
    First 12 hex digits of SHA-256 over the canonical JSON config.

    Hashes the given sections, or every section except output.
    """
    doc = config.to_dict()
    doc.pop('output', None)
    if sections is not None:
        doc = {name: doc[name] for name in sections}
    canonical = json.dumps(doc, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:12]


def command_hash(config: RunConfig, command: str) -> str:
    return config_hash(config, ARTIFACT_SECTIONS.get(command))


def run_dir(config: RunConfig, command: str) -> Path:
    return config.out_root() / f"{command}-{command_hash(config, command)}"


def echo_config(config: RunConfig, directory: Union[str, Path]) -> Path:
    """Write the resolved config next to a run's artifacts."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / 'config.yaml'
    target.write_text(config.to_yaml(), encoding='utf-8')
    return target
