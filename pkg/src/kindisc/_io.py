"""Deterministic JSON/CSV writing for run artifacts."""

from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np


def jsonable(obj):
    """Plain JSON types; non-finite floats become the strings ``'inf'``, ``'-inf'``, ``'nan'``."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    return obj


def dumps(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, allow_nan=False) + "\n"


def write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path: str | os.PathLike, obj) -> None:
    write_text(path, dumps(obj))


def read_json(path: str | os.PathLike):
    with open(path) as fh:
        return json.load(fh)


def num(x) -> float:
    """Inverse of :func:`jsonable` for a single float."""
    return float(x)
