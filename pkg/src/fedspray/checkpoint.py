"""Text-encoded parameter checkpoints: a flat list of named, shaped arrays.

Format::

    checkpoint <count>
    array <name> <rows> <cols>
    <cols space-separated values>     (rows lines)
    ...

Values are written with ``repr`` so float64 round-trips exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError
from .numcore import Array


def save_checkpoint(path, named: dict[str, Array]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"checkpoint {len(named)}\n")
        for name, arr in named.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2:
                raise ParseError(f"checkpoint arrays must be 2-D, got {arr.ndim} for {name!r}")
            if any(ch.isspace() for ch in name):
                raise ParseError(f"array name {name!r} must not contain whitespace")
            fh.write(f"array {name} {arr.shape[0]} {arr.shape[1]}\n")
            for row in arr:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_checkpoint(path) -> dict[str, Array]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("checkpoint "):
        raise ParseError("expected 'checkpoint <count>' header", line=1)
    try:
        count = int(lines[0].split()[1])
    except (IndexError, ValueError):
        raise ParseError("bad checkpoint header", line=1) from None
    named: dict[str, Array] = {}
    lineno = 1
    for _ in range(count):
        lineno += 1
        if lineno - 1 >= len(lines):
            raise ParseError("unexpected end of checkpoint", line=lineno)
        parts = lines[lineno - 1].split()
        if len(parts) != 4 or parts[0] != "array":
            raise ParseError("expected 'array <name> <rows> <cols>'", line=lineno)
        name = parts[1]
        try:
            rows, cols = int(parts[2]), int(parts[3])
        except ValueError:
            raise ParseError("non-integer array shape", line=lineno) from None
        data = np.empty((rows, cols))
        for r in range(rows):
            lineno += 1
            if lineno - 1 >= len(lines):
                raise ParseError("unexpected end of checkpoint", line=lineno)
            values = lines[lineno - 1].split()
            if len(values) != cols:
                raise ParseError(f"expected {cols} values", line=lineno)
            try:
                data[r] = [float(v) for v in values]
            except ValueError:
                raise ParseError("non-numeric checkpoint value", line=lineno) from None
        if name in named:
            raise ParseError(f"duplicate array name {name!r}", line=lineno)
        named[name] = data
    return named
