"""Run configuration and its sectioned key-value text format.

Files are INI-style; every key lives in exactly one section. Values are Python
literals (numbers, tuples, lists, quoted or bare strings)::

    [experiment]
    architecture = chain
    strategy = dwa
    seeds = [0, 1, 2]

Overrides are ``key=value`` or ``section.key=value``.
"""
import ast
import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .backbone import BackboneConfig
from .heads import ARCHITECTURES, TASK_NAMES
from .weighting import STRATEGIES


class ConfigError(ValueError):
    pass


class UnknownKeyError(ConfigError):
    def __init__(self, key):
        super().__init__(f"unknown config key: {key}")
        self.key = key


@dataclass
class RunConfig:
    # experiment
    architecture: str = "chain"
    strategy: str = "dwa"
    seeds: list = field(default_factory=lambda: [0])
    tasks: list = field(default_factory=lambda: list(TASK_NAMES))
    workers: int = 1
    # schedule
    epochs: int = 30
    batch_size: int = 8
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    eval_batch_size: int = 64
    # optimizer
    lr_backbone: float = 1e-5
    lr_heads: float = 1e-3
    lr_weighting: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # weighting
    temperature: float = 2.0
    phi: float = 1.0
    druw_mix: float = 1.0
    # heads
    hidden: int = 256
    branch_blocks: int = 0   # 0 means one block per backbone layer
    branch_heads: int = 4
    pooling: str = "mean"
    activation: str = "relu"
    # data
    data_dir: str = ""       # empty: generate the synthetic set in memory
    n_samples: int = 4000
    data_seed: int = 0
    # backbone
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.seeds = [int(s) for s in self.seeds]
        self.tasks = list(self.tasks)
        self.validate()

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        for name in ("lr_backbone", "lr_heads", "lr_weighting", "temperature", "phi"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("need epochs >= 1 and batch_size >= 2")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        bad = [t for t in self.tasks if t not in TASK_NAMES]
        if bad or not self.tasks:
            raise ConfigError(f"tasks must be a non-empty subset of {TASK_NAMES}, got {self.tasks}")
        if self.pooling != "mean" or self.activation != "relu":
            raise ConfigError("only pooling=mean and activation=relu are implemented")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


SECTIONS = {
    "experiment": ("architecture", "strategy", "seeds", "tasks", "workers"),
    "schedule": ("epochs", "batch_size", "plateau_patience", "plateau_factor", "eval_batch_size"),
    "optimizer": ("lr_backbone", "lr_heads", "lr_weighting", "weight_decay", "beta1", "beta2", "eps"),
    "weighting": ("temperature", "phi", "druw_mix"),
    "heads": ("hidden", "branch_blocks", "branch_heads", "pooling", "activation"),
    "data": ("data_dir", "n_samples", "data_seed"),
    "backbone": tuple(f.name for f in dataclasses.fields(BackboneConfig)),
}
_KEY_SECTION = {k: s for s, keys in SECTIONS.items() for k in keys}
_DEFAULTS = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory())
             for f in dataclasses.fields(RunConfig) if f.name != "backbone"}


def _parse_value(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text.strip()


def _coerce(value, default):
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if isinstance(default, str):
        return str(value)
    if isinstance(default, (list, tuple)) and not isinstance(value, (list, tuple)):
        return type(default)([value])
    return value


def _resolve_key(key):
    if "." in key:
        section, name = key.split(".", 1)
        if SECTIONS.get(section) is None or name not in SECTIONS[section]:
            raise UnknownKeyError(key)
        return section, name
    if key not in _KEY_SECTION:
        raise UnknownKeyError(key)
    return _KEY_SECTION[key], key


def _apply(flat, backbone, section, name, value):
    if section == "backbone":
        backbone[name] = _coerce(value, getattr(BackboneConfig(), name))
    else:
        flat[name] = _coerce(value, _DEFAULTS[name])


def build_config(sections=None, overrides=()):
    """Build a :class:`RunConfig` from ``{section: {key: value}}`` and overrides."""
    flat, backbone = {}, {}
    for section, items in (sections or {}).items():
        if section not in SECTIONS:
            raise UnknownKeyError(section)
        for name, value in items.items():
            if name not in SECTIONS[section]:
                raise UnknownKeyError(f"{section}.{name}")
            _apply(flat, backbone, section, name, value)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        section, name = _resolve_key(key.strip())
        _apply(flat, backbone, section, name, _parse_value(text))
    try:
        return RunConfig(backbone=BackboneConfig(**backbone), **flat)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def parse_config_text(text, overrides=()):
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    sections = {s: {k: _parse_value(v) for k, v in parser.items(s)} for s in parser.sections()}
    return build_config(sections, overrides)


def load_config(path, overrides=()):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), overrides)


def dump_config(cfg):
    """Render every effective value; the text parses back to an equal config."""
    d = cfg.to_dict()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in SECTIONS.items():
        parser.add_section(section)
        source = d["backbone"] if section == "backbone" else d
        for k in keys:
            parser.set(section, k, repr(source[k]))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
