"""Run configuration: a sectioned ``key = value`` file with a fixed schema."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field

from .errors import ConfigError


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text):
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


@dataclass
class DataSection:
    classes: int = 4
    backgrounds: int = 4
    height: int = 32
    width: int = 32
    n_per_class: int = 500
    spuriousness: float = 0.95
    imbalance_ratio: float = 1.0
    noise_kind: str = "none"
    noise_ratio: float = 0.0
    meta_per_class: int = 10
    test_per_class: int = 200
    seed: int = 0


@dataclass
class AugmentSection:
    mode: str = "both"  # both | counterfactual | factual
    cf_method: str = "tile"
    f_method: str = "mix_rand"
    epsilon: float = 0.5
    fgsm_target: str = "random_other_class"
    seed: int = 0


@dataclass
class ModelSection:
    hidden_widths: tuple = (256, 128)
    pnet_hidden: int = 100
    init_seed: int = 0


@dataclass
class TrainSection:
    eta1: float = 0.02
    eta2: float = 1e-3
    batch_n: int = 32
    batch_m: int = 32
    iters: int = 2000
    lam: float = 0.6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    detach_saliency: bool = False
    train_saliency: bool = True
    seed: int = 0


@dataclass
class EvalSection:
    saliency_indices: tuple = ()


@dataclass
class RunSection:
    output_dir: str = "out"
    run_name: str = "run"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


SECTIONS = {"data": DataSection, "augment": AugmentSection, "model": ModelSection,
            "train": TrainSection, "eval": EvalSection, "run": RunSection}

# file key -> attribute, where they differ ("lambda" is a Python keyword)
_ALIASES = {("train", "lambda"): "lam"}
_PARSERS = {int: int, float: float, str: str, bool: _bool, tuple: _ints}
_CHOICES = {
    ("data", "noise_kind"): ("none", "uniform", "flip"),
    ("augment", "mode"): ("both", "counterfactual", "factual"),
    ("augment", "fgsm_target"): ("random_other_class", "untargeted"),
}


def _field_types(cls):
    defaults = cls()
    return {name: type(value) for name, value in asdict(defaults).items()}


def _file_key(section, attr):
    for (s, k), a in _ALIASES.items():
        if (s, a) == (section, attr):
            return k
    return attr


def parse_config(text, source="<config>"):
    """Parse config text. Every error names the offending ``section.key``."""
    parser = configparser.ConfigParser(interpolation=None, default_section="\x00")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        target = getattr(cfg, section)
        types = _field_types(SECTIONS[section])
        file_keys = {_file_key(section, a): a for a in types}
        for key, raw in parser.items(section):
            attr = file_keys.get(key)
            if attr is None:
                raise ConfigError(f"{source}: unknown key {section}.{key}")
            try:
                value = _PARSERS[types[attr]](raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: {section}.{key}: {exc}") from exc
            allowed = _CHOICES.get((section, key))
            if allowed and value not in allowed:
                raise ConfigError(f"{source}: {section}.{key} must be one of {allowed}")
            setattr(target, attr, value)
    return cfg


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))


def dump_config(cfg):
    """Canonical text form; ``parse_config(dump_config(c))`` reproduces ``c``."""
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for attr, value in values.items():
            if isinstance(value, tuple):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{_file_key(section, attr)} = {value}")
        lines.append("")
    return "\n".join(lines)
