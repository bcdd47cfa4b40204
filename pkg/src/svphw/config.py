"""Flat ``key = value`` run configuration shared by every command.

Keys are the model fields, the sprite-world fields (``height``, ``width``,
``channels`` and ``seed`` are shared by both) and a few run settings. Values
are typed by their defaults; unknown keys are rejected.
"""

from dataclasses import fields
from pathlib import Path

from .data import SpriteWorldConfig
from .model import ModelConfig

RUN_DEFAULTS = {
    "data_dir": "data",
    "out_dir": "out",
    "checkpoint": "",
    "n_train": 8,
    "n_val": 2,
    "n_test": 4,
    "eval_horizon": 10,
    "eval_split": "test",
    "n_samples": 3,
    "max_sequences": 4,
    "checkpoint_every": 500,
    "backend": "",
    "fp64": False,
}


class ConfigError(ValueError):
    pass


def _defaults():
    out = {}
    for cls in (ModelConfig, SpriteWorldConfig):
        for f in fields(cls):
            out.setdefault(f.name, f.default)
    out.update(RUN_DEFAULTS)
    return out


DEFAULTS = _defaults()


def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(p.strip() for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {type(default).__name__})") from None
    return raw


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[key]
        self.values[key] = _coerce(key, value, default) if isinstance(value, str) and not isinstance(default, str) else value

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @classmethod
    def parse(cls, text, source="<config>"):
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            try:
                cfg.set(key, value)
            except ConfigError as e:
                raise ConfigError(f"{source}:{lineno}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path):
        return cls.parse(Path(path).read_text(), str(path))

    def apply_overrides(self, pairs):
        """``pairs`` are ``key=value`` strings (leading dashes allowed, '-' == '_')."""
        for item in pairs:
            body = item.lstrip("-")
            if "=" not in body:
                raise ConfigError(f"override {item!r} is not of the form --key=value")
            key, value = body.split("=", 1)
            self.set(key.replace("-", "_"), value)
        return self

    def resolved(self):
        return "".join(f"{k} = {_render(self.values[k])}\n" for k in sorted(self.values))

    def model_config(self):
        return ModelConfig(**{f.name: self.values[f.name] for f in fields(ModelConfig)})

    def world_config(self):
        return SpriteWorldConfig(**{f.name: self.values[f.name] for f in fields(SpriteWorldConfig)})
