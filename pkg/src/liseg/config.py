"""Flat ``key = value`` run configuration with environment and flag overrides.

Layering, lowest to highest precedence: option defaults, config file, ``LISEG_<KEY>``
environment variables, explicit command-line flags. The merged result is written as
``config.resolved`` beside the outputs and can be fed back through ``--config``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable

ENV_PREFIX = "LISEG_"


class ConfigError(ValueError):
    """Malformed config file, unknown key, or unparsable value."""


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def tuple_of(cast: Callable, length: int | None = None):
    def parse(text: str) -> tuple:
        items = tuple(cast(p.strip()) for p in text.split(",") if p.strip())
        if length is not None and len(items) != length:
            raise ValueError(f"expected {length} comma-separated values, got {text!r}")
        return items

    parse.__name__ = f"tuple[{cast.__name__}]"
    return parse


def optional(cast: Callable):
    def parse(text: str):
        return None if text.strip() in ("", "none", "None") else cast(text)

    parse.__name__ = f"optional[{cast.__name__}]"
    return parse


@dataclass(frozen=True)
class Option:
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""
    choices: tuple | None = None


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config_file(path) -> dict:
    """Raw string values from a ``key = value`` file; ``#`` starts a comment line."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            out[key] = value
    return out


def _convert(opt: Option, raw, origin: str):
    try:
        value = opt.parse(raw) if isinstance(raw, str) else raw
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{origin}: bad value for {opt.key!r}: {exc}") from None
    if opt.choices is not None and value not in opt.choices:
        raise ConfigError(f"{origin}: {opt.key} must be one of {', '.join(map(str, opt.choices))}, got {value!r}")
    return value


def resolve(options, command: str, config_path=None, flags=None, environ=None, base_path=None) -> dict:
    """Merge the configuration layers for ``command``.

    ``base_path`` is an optional lower-precedence file (e.g. a resumed run's own
    resolved config) applied before ``config_path``.
    """
    by_key = {o.key: o for o in options}
    resolved = {o.key: o.default for o in options}
    for path in (base_path, config_path):
        if not path:
            continue
        raw = read_config_file(path)
        file_cmd = raw.pop("command", command)
        if file_cmd != command:
            raise ConfigError(f"{path} is a {file_cmd!r} config, not {command!r}")
        for key, value in raw.items():
            if key not in by_key:
                raise ConfigError(f"{path}: unknown key {key!r} for {command}")
            resolved[key] = _convert(by_key[key], value, str(path))
    environ = os.environ if environ is None else environ
    for opt in options:
        name = ENV_PREFIX + opt.key.upper()
        if name in environ:
            resolved[opt.key] = _convert(opt, environ[name], f"environment {name}")
    for key, value in (flags or {}).items():
        if value is not None and key in by_key:
            resolved[key] = _convert(by_key[key], value, f"--{key.replace('_', '-')}")
    return resolved


def write_resolved(path, command: str, resolved: dict, options):
    lines = [f"# resolved {command} configuration; reuse with --config", f"command = {command}"]
    lines += [f"{o.key} = {format_value(resolved[o.key])}" for o in options]
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)
