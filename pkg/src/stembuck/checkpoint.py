"""Plain-text checkpoint format.

Layout, one record per line::

    stembuck-checkpoint 1
    meta <key> <value>
    param <name> <dim0,dim1,...> <hex float> <hex float> ...

Values are written row-major with ``float.hex`` so a save/load round trip is
bitwise exact and the file bytes depend only on the parameters.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "stembuck-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, str]) -> None:
    lines = [f"{MAGIC} {VERSION}"]
    for key in sorted(meta):
        value = str(meta[key])
        if any(c.isspace() for c in key) or "\n" in value:
            raise CheckpointError(f"invalid metadata entry {key!r}")
        lines.append(f"meta {key} {value}")
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=float)
        shape = ",".join(str(s) for s in a.shape)
        values = " ".join(float(v).hex() for v in a.ravel(order="C"))
        lines.append(f"param {name} {shape} {values}".rstrip())
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    lines = p.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
        raise CheckpointError(f"{p}: not a version {VERSION} checkpoint")
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tag, _, rest = line.partition(" ")
        if tag == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif tag == "param":
            parts = rest.split(" ")
            if len(parts) < 2:
                raise CheckpointError(f"{p}: line {lineno}: malformed parameter record")
            name, shape_s = parts[0], parts[1]
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            values = np.array([float.fromhex(v) for v in parts[2:]], dtype=float)
            if values.size != int(np.prod(shape, dtype=int)):
                raise CheckpointError(f"{p}: line {lineno}: {name} has {values.size} values for shape {shape}")
            arrays[name] = values.reshape(shape)
        else:
            raise CheckpointError(f"{p}: line {lineno}: unknown record {tag!r}")
    return arrays, meta
