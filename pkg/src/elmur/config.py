"""Plain-text run configuration: `key = value` lines under [model],
[train], [task], and [eval] sections. Unknown keys are rejected; every
key can be overridden on the command line with --set section.key=value.
"""

from __future__ import annotations

from dataclasses import fields

from .model import ModelConfig
from .training import TrainConfig

TASK_DEFAULTS = {
    "name": "tmaze",
    "n_episodes": 2000,
    "corridor_min": 9,
    "corridor_max": 30,
    "alphabet": 5,
    "episode_len": 18,
}

EVAL_DEFAULTS = {
    "lengths": "9,30,90,300,1000",
    "n_episodes": 100,
    "runs": 3,
}


class ConfigError(ValueError):
    pass


def _defaults():
    return {
        "model": {f.name: f.default for f in fields(ModelConfig)},
        "train": {f.name: f.default for f in fields(TrainConfig)},
        "task": dict(TASK_DEFAULTS),
        "eval": dict(EVAL_DEFAULTS),
    }


def _coerce(section, key, raw, defaults):
    if key not in defaults[section]:
        raise ConfigError(f"unknown config key [{section}] {key}")
    default = defaults[section][key]
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path=None, overrides=()):
    """Defaults, then the file, then --set overrides. Returns a section dict."""
    cfg = _defaults()
    defaults = _defaults()
    if path is not None:
        section = None
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if line.startswith("[") and line.endswith("]"):
                    section = line[1:-1].strip()
                    if section not in cfg:
                        raise ConfigError(f"line {ln}: unknown section [{section}]")
                    continue
                if "=" not in line:
                    raise ConfigError(f"line {ln}: expected key = value")
                if section is None:
                    raise ConfigError(f"line {ln}: key outside any section")
                key, raw = (s.strip() for s in line.split("=", 1))
                cfg[section][key] = _coerce(section, key, raw, defaults)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in cfg:
            raise ConfigError(f"unknown section [{section}]")
        cfg[section][key] = _coerce(section, key, raw, defaults)
    return cfg


def dump_config(cfg):
    lines = []
    for section in ("model", "train", "task", "eval"):
        lines.append(f"[{section}]")
        for key, value in cfg[section].items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def model_config(cfg):
    return ModelConfig(**cfg["model"])


def train_config(cfg):
    return TrainConfig(**cfg["train"])
