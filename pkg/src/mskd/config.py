"""Run configuration files.

UTF-8 text, one ``section.key=value`` per line, ``#`` starts a comment.
Sections map onto :class:`SynthConfig` (``data``), :class:`ModelConfig`
(``model``) and :class:`TrainConfig` (``train``). Unset keys keep their
defaults, which follow the published training recipe where it gives one
(batch 4, 250 iterations x 1000 epochs, lr 3e-4 decayed by 20%, 33%
foreground batches, loss weights 1 and 10, decoder features at level 1).

Tuple-valued keys use commas; organ bands are ``lo:hi`` pairs, e.g.
``data.organ_bands=60:100,140:180``.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {"data": SynthConfig, "model": ModelConfig, "train": TrainConfig}


@dataclass(frozen=True)
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def replace(self, section, **changes):
        try:
            return replace(self, **{section: replace(getattr(self, section), **changes)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def to_text(self):
        lines = []
        for name in SECTIONS:
            for key, value in asdict(getattr(self, name)).items():
                lines.append(f"{name}.{key}={format_value(value)}")
        return "\n".join(lines) + "\n"


def format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return ",".join(":".join(format_value(v) for v in pair) for pair in value)
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(text, default, key):
    text = text.strip()
    try:
        if key == "organ_bands":
            if text.lower() == "none":
                return None
            return tuple(tuple(float(x) for x in pair.split(":")) for pair in text.split(","))
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text}")
            return text.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
    return text


def parse_config(text, base=None):
    base = base or RunConfig()
    changes = {name: {} for name in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section in key {key!r}")
        known = {f.name: f for f in fields(SECTIONS[section])}
        if name not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        default = getattr(getattr(base, section), name)
        if default is None:
            default = known[name].default
        changes[section][name] = _coerce(value, default, name)
    config = base
    for section, values in changes.items():
        if values:
            config = config.replace(section, **values)
    return config


def load_config(path):
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"))
