"""Flat ``key = value`` config files for dataclass configs.

Blank lines and ``#`` comments are ignored; unknown keys are an error. Arrays
and tuples are written comma-separated.
"""
import dataclasses
from pathlib import Path

import numpy as np

from .errors import ParseError


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (np.ndarray, tuple, list)):
        return ", ".join(_format(v) for v in np.asarray(value).ravel().tolist())
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text, like):
    text = text.strip()
    if isinstance(like, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, (int, np.integer)) and not isinstance(like, bool):
        return int(text)
    if isinstance(like, (float, np.floating)):
        return float(text)
    if isinstance(like, np.ndarray):
        items = [t for t in text.split(",") if t.strip()]
        return np.array([float(t) for t in items])
    if isinstance(like, tuple):
        return tuple(float(t) for t in text.split(",") if t.strip())
    if like is None:
        return text or None
    return type(like)(text)


def dumps(config):
    lines = [f"{f.name} = {_format(getattr(config, f.name))}" for f in dataclasses.fields(config)]
    return "\n".join(lines) + "\n"


def save(config, path):
    Path(path).write_text(dumps(config))


def parse_pairs(text, path=None):
    """Ordered (key, value string, line number) triples."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw!r}", lineno, path)
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip(), lineno))
    return out


def loads(text, cls, base=None, path=None):
    """Parse ``text`` onto ``base`` (default: ``cls()``), rejecting unknown keys."""
    base = base if base is not None else cls()
    names = {f.name for f in dataclasses.fields(cls)}
    updates = {}
    for key, value, lineno in parse_pairs(text, path):
        if key not in names:
            raise ParseError(f"unknown key {key!r} for {cls.__name__}", lineno, path)
        try:
            updates[key] = _parse(value, getattr(base, key))
        except ValueError as exc:
            raise ParseError(f"bad value for {key!r}: {exc}", lineno, path) from None
    return dataclasses.replace(base, **updates)


def load(path, cls, base=None):
    path = Path(path)
    return loads(path.read_text(), cls, base, path)
