"""`key = value` run configuration files with a strict schema.

Lines are UTF-8 `key = value`; `#` starts a comment; blank lines are
ignored.  Unknown keys, unparsable values and failed range checks are all
collected and reported together, so one pass shows every problem.
"""

from __future__ import annotations

from pathlib import Path

from .losses import LossWeights
from .trainer import TrainConfig


class ConfigError(ValueError):
    """One or more configuration violations; message lists all of them."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_channels(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.replace(",", " ").split())


def _positive(x):
    if x <= 0:
        raise ValueError("must be positive")
    return x


def _nonnegative(x):
    if x < 0:
        raise ValueError("must be nonnegative")
    return x


def _fraction(x):
    if not (0.0 <= x <= 1.0):
        raise ValueError("must be in [0, 1]")
    return x


# key -> (parser, validator); validators raise ValueError
SCHEMA = {
    "seed": (int, _nonnegative),
    "image_size": (int, _positive),
    "channels": (_parse_channels, lambda c: c if c else (_ for _ in ()).throw(ValueError("empty"))),
    "style_dim": (int, _positive),
    "z_dim": (int, _positive),
    "domains": (int, _positive),
    "style_hidden": (int, _positive),
    "mlp_hidden": (int, _positive),
    "fov_degrees": (float, _positive),
    "lr": (float, _positive),
    "beta1": (float, _fraction),
    "beta2": (float, _fraction),
    "weight_decay": (float, _nonnegative),
    "adam_eps": (float, _positive),
    "batch_size": (int, _positive),
    "iterations": (int, _positive),
    "warmup_fraction": (float, _fraction),
    "lambda_rec": (float, _nonnegative),
    "lambda_p": (float, _nonnegative),
    "lambda_sty": (float, _nonnegative),
    "lambda_sou": (float, _nonnegative),
    "lambda_can": (float, _nonnegative),
    "lambda_sd": (float, _nonnegative),
    "r1_enabled": (_parse_bool, lambda x: x),
    "r1_gamma": (float, _nonnegative),
    "sd_decay": (_parse_bool, lambda x: x),
    "albedo_flip": (_parse_bool, lambda x: x),
    "depth_flip": (_parse_bool, lambda x: x),
    "confidence": (_parse_bool, lambda x: x),
    "checkpoint_interval": (int, _nonnegative),
}

_WEIGHT_KEYS = ("lambda_rec", "lambda_p", "lambda_sty", "lambda_sou", "lambda_can", "lambda_sd")


def parse_config_lines(lines, source: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings; syntax errors collected into ConfigError."""
    pairs: dict[str, str] = {}
    problems: list[str] = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            problems.append(f"{source}:{lineno}: empty key")
            continue
        if key in pairs:
            problems.append(f"{source}:{lineno}: duplicate key '{key}'")
            continue
        pairs[key] = value
    if problems:
        raise ConfigError("\n".join(problems))
    return pairs


def read_config_file(path) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    return parse_config_lines(text.splitlines(), source=str(path))


def build_train_config(pairs: dict[str, str]) -> TrainConfig:
    """Validate every key against the schema and build a TrainConfig."""
    problems: list[str] = []
    values: dict[str, object] = {}
    for key, raw in pairs.items():
        if key not in SCHEMA:
            problems.append(f"unknown config key '{key}'")
            continue
        parser, validator = SCHEMA[key]
        try:
            value = parser(raw)
            validator(value)
        except (ValueError, TypeError) as exc:
            problems.append(f"config key '{key}': {exc} (got {raw!r})")
            continue
        values[key] = value
    if problems:
        raise ConfigError("\n".join(problems))

    weight_args = {k: values.pop(k) for k in _WEIGHT_KEYS if k in values}
    try:
        weights = LossWeights(**weight_args)
        return TrainConfig(weights=weights, **values)
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
