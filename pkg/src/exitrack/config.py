"""Flat key=value run-configuration files.

Values are stored as strings; '#' starts a comment line. Files written
here are deterministic (sorted keys) so reruns byte-compare equal.
"""

from __future__ import annotations

import os

__all__ = ["read_kv", "write_kv", "parse_bool"]


def read_kv(path: str) -> dict[str, str]:
    kv: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
    return kv


def write_kv(path: str, mapping: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for k in sorted(mapping):
            f.write(f"{k}={mapping[k]}\n")


def parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")
