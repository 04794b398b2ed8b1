"""Tiny ``key = value`` config-file reader shared by the CLI entry points."""

from __future__ import annotations

from .errors import ConfigError


def parse_kv_file(path) -> dict[str, str]:
    """Read a text config of ``key = value`` lines; '#' starts a comment."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}: line {lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}: line {lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def parse_floats(text: str, key: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"key {key!r}: expected comma-separated numbers") from None


def parse_ints(text: str, key: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"key {key!r}: expected comma-separated integers") from None
