"""Plain-text named matrix blocks shared by the checkpoint formats.

A block is a line ``name rows cols`` followed by ``rows`` lines of
row-major values written with 17 significant digits, which round-trips
IEEE doubles exactly.
"""
from __future__ import annotations

import hashlib

import numpy as np


class FormatError(ValueError):
    pass


def fmt(v) -> str:
    return f"{float(v):.17g}"


def write_block(lines: list, name: str, a) -> None:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2:
        raise FormatError(f"block {name!r} must be at most 2-D")
    lines.append(f"{name} {a.shape[0]} {a.shape[1]}")
    for row in a:
        lines.append(" ".join(fmt(v) for v in row))


def read_blocks(lines, start: int = 0) -> dict:
    out = {}
    i = start
    n = len(lines)
    while i < n:
        head = lines[i].split()
        i += 1
        if not head or head[0].startswith("#"):
            continue
        if len(head) != 3:
            raise FormatError(f"bad block header on line {i}: {lines[i - 1]!r}")
        name = head[0]
        try:
            rows, cols = int(head[1]), int(head[2])
        except ValueError:
            raise FormatError(f"bad block shape on line {i}") from None
        if name in out:
            raise FormatError(f"duplicate block {name!r}")
        if i + rows > n:
            raise FormatError(f"block {name!r} truncated")
        data = np.zeros((rows, cols))
        for r in range(rows):
            vals = lines[i + r].split()
            if len(vals) != cols:
                raise FormatError(f"block {name!r} row {r} has {len(vals)} values, expected {cols}")
            try:
                data[r] = [float(v) for v in vals]
            except ValueError:
                raise FormatError(f"non-numeric value in block {name!r}") from None
        i += rows
        out[name] = data
    return out


def sha256_file(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
