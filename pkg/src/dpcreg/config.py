"""Flat ``key = value`` configuration files and config hashing."""
from __future__ import annotations

import dataclasses
import hashlib
import json


def parse_value(text):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t.strip("\"'")


def load_config(path):
    """Read a UTF-8 file of ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = parse_value(value)
    return out


def apply_overrides(obj, values, strict=True):
    """Return a copy of dataclass ``obj`` with matching keys replaced."""
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = sorted(set(values) - names)
    if strict and unknown:
        raise ValueError(f"unknown config key(s) for {type(obj).__name__}: {', '.join(unknown)}")
    return dataclasses.replace(obj, **{k: v for k, v in values.items() if k in names})


def config_hash(*objs):
    """Short stable hash of one or more dataclasses / dicts."""
    payload = []
    for o in objs:
        payload.append(dataclasses.asdict(o) if dataclasses.is_dataclass(o) else dict(o))
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
