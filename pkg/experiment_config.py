"""
Experiment configuration.

load_config() returns the hard-coded defaults; a `key = value` file with
dotted keys (`workload.n = 64`) overrides them. Values are coerced to the
type of the default they replace and range-checked against RULES, so a bad
value is reported with its line number.
"""
from __future__ import annotations

import os
from typing import Any, Callable

DEFAULT_OUTPUT_DIR = "data"

TRUE_WORDS = {"true", "yes", "on", "1"}
FALSE_WORDS = {"false", "no", "off", "0"}

ARM_NAMES = (
    "lp", "stabilized_lp", "hp_delta", "hp", "exact",
    "baseline", "delta_o_hp", "delta_dp_p", "delta_recompute_pv", "pv_hp",
)

Config = dict[str, dict[str, Any]]
Setting = tuple[int, str, str, str]


def _at_least(low: float) -> tuple[Callable[[Any], bool], str]:
    return (lambda x: x >= low), f"must be at least {low:g}"


def _within(low: float, high: float) -> tuple[Callable[[Any], bool], str]:
    return (lambda x: low <= x <= high), f"must be in [{low:g}, {high:g}]"


def _one_of(*choices: str) -> tuple[Callable[[Any], bool], str]:
    return (lambda x: x in choices), f"must be one of {', '.join(choices)}"


RULES: dict[str, tuple[Callable[[Any], bool], str]] = {
    "workload.n": _at_least(1),
    "workload.d": _at_least(1),
    "workload.model_dim": _at_least(1),
    "workload.tie_rate": _within(0.0, 1.0),
    "workload.value_sign_bias": _within(0.0, 1.0),
    "workload.sink_strength": _at_least(0.0),
    "workload.group_size": _at_least(0),
    "workload.noise_scale": _at_least(0.0),
    "training.lr": _at_least(0.0),
    "training.steps": _at_least(0),
    "training.clip_norm": ((lambda x: x > 0), "must be positive"),
    "training.schedule": _one_of("constant", "cosine"),
    "training.warmup_steps": _at_least(0),
    "training.min_lr": _at_least(0.0),
    "tiles.block_rows": _at_least(0),
    "tiles.block_cols": _at_least(0),
    "tiles.beta": ((lambda x: x > 1.0), "must exceed 1"),
    "tiles.gamma": ((lambda x: 0.0 <= x < 1.0), "must be in [0, 1)"),
    "arms.a": _one_of(*ARM_NAMES),
    "arms.b": _one_of(*ARM_NAMES),
    "arms.normalize": _one_of("lp", "hp"),
    "assertions.expect_bias_reduction": _at_least(0.0),
}


class ConfigError(ValueError):
    """Config file does not match the schema."""

    def __init__(self, message: str, line_no: int | None = None, text: str | None = None,
                 path: str | None = None):
        where = ""
        if line_no is not None:
            where = f"{path or 'config'}:{line_no}: "
        detail = f" ({text.strip()!r})" if text else ""
        super().__init__(f"{where}{message}{detail}")
        self.line_no = line_no


def load_config(path: str | None = None) -> Config:
    """Load configuration with hardcoded defaults, overlaid with `path` if given."""
    config = {
        'workload': {
            'n': 64,
            'd': 16,
            'model_dim': 32,
            'seed': 0,
            'tie_rate': 0.05,
            'value_sign_bias': 0.5,
            'sink_strength': 6.0,
            'group_size': 2,
            'noise_scale': 0.3,
        },
        'training': {
            'lr': 1e-4,
            'steps': 200,
            'beta1': 0.9,
            'beta2': 0.95,
            'eps': 1e-8,
            'weight_decay': 0.0,
            'clip_norm': 1.0,
            'schedule': 'constant',
            'warmup_steps': 2000,
            'min_lr': 1e-5,
            'causal': False,
        },
        'tiles': {
            'block_rows': 0,      # 0 means one block of N rows
            'block_cols': 0,
            'beta': 7.0,
            'strict_zero': False,
            'gamma': 0.0,
        },
        'arms': {
            'a': 'lp',
            'b': 'stabilized_lp',
            'normalize': 'lp',    # hp keeps the BF16 product but normalises in binary32
        },
        'assertions': {
            'expect_bias_positive': True,
            'expect_bias_reduction': 0.0,   # 0 disables
            'expect_norm_ordering': False,
        },
    }
    if path is not None:
        apply_overrides(config, parse_config_file(path), path)
    return config


def parse_config_file(path: str) -> list[Setting]:
    """Return [(line_no, key, raw_value, text)] for every setting in `path`."""
    if not os.path.isfile(path):
        raise FileNotFoundError(f"config file not found: {path}")
    settings = []
    seen = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, text in enumerate(f, start=1):
            line = text.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("expected 'key = value'", line_no, text, path)
            key, value = (part.strip() for part in line.split("=", 1))
            if not key or not value:
                raise ConfigError("empty key or value", line_no, text, path)
            if key in seen:
                raise ConfigError(f"duplicate key {key} (first set on line {seen[key]})", line_no, text, path)
            seen[key] = line_no
            settings.append((line_no, key, value, text))
    return settings


def _coerce(raw: str, default: Any) -> Any:
    if isinstance(default, bool):
        word = raw.lower()
        if word in TRUE_WORDS:
            return True
        if word in FALSE_WORDS:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def apply_overrides(config: Config, settings: list[Setting], path: str | None = None) -> Config:
    for line_no, key, raw, text in settings:
        section, _, name = key.partition(".")
        if section not in config or name not in config[section]:
            raise ConfigError(f"unknown key {key}", line_no, text, path)
        try:
            value = _coerce(raw, config[section][name])
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}", line_no, text, path) from e
        if key in RULES:
            ok, rule = RULES[key]
            if not ok(value):
                raise ConfigError(f"{key} {rule}, got {raw}", line_no, text, path)
        config[section][name] = value
    return config


def resolved_items(config: Config) -> list[tuple[str, Any]]:
    """Flattened `section.key = value` pairs, for the run header."""
    return [(f"{section}.{key}", value) for section, values in config.items() for key, value in values.items()]


def output_dir() -> str:
    """Output directory from LAB_OUTPUT_DIR (default data/), created on demand."""
    path = os.getenv("LAB_OUTPUT_DIR", DEFAULT_OUTPUT_DIR)
    os.makedirs(path, exist_ok=True)
    return path
