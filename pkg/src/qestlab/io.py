"""Config parsing and output serialization.

Complex matrices travel as nested arrays of ``[re, im]`` pairs, row-major.
Floats are written with 17 significant digits so values round-trip exactly.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import core
from .errors import InvalidConfig


def parse_matrix(obj) -> np.ndarray:
    try:
        a = np.asarray(obj, dtype=float)
    except (TypeError, ValueError):
        raise InvalidConfig("matrix literal must be a nested array of [re, im] pairs") from None
    if a.ndim == 3 and a.shape[2] == 2 and a.shape[0] == a.shape[1]:
        return a[..., 0] + 1j * a[..., 1]
    if a.ndim == 2 and a.shape[0] == a.shape[1]:
        # real-only shorthand
        return a.astype(complex)
    raise InvalidConfig(f"matrix literal has shape {a.shape}; expected (d, d, 2)")


def matrix_literal(a) -> list:
    a = np.asarray(a, dtype=complex)
    return [[[float(x.real), float(x.imag)] for x in row] for row in a]


def parse_real_matrix(obj) -> np.ndarray:
    a = np.atleast_2d(np.asarray(obj, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise InvalidConfig(f"expected a square real matrix, got shape {a.shape}")
    return a


def load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"invalid JSON in {path}: {exc}") from None


def povm_from_config(cfg) -> core.Povm:
    """``{"elements": [matrix, ...], "labels": [...]}`` or ``{"axis": [x, y, z]}`` or ``"pauli"``."""
    if cfg == "pauli":
        return core.pauli_povm()
    if isinstance(cfg, dict) and "axis" in cfg:
        return core.axis_povm(cfg["axis"])
    if not isinstance(cfg, dict) or "elements" not in cfg:
        raise InvalidConfig("POVM config needs 'elements', 'axis' or the string 'pauli'")
    els = [parse_matrix(e) for e in cfg["elements"]]
    labels = cfg.get("labels")
    return core.Povm.from_elements(els, None if labels is None else [_label(x) for x in labels])


def _label(x):
    return tuple(x) if isinstance(x, list) else x


def fmt(x: float) -> str:
    return "%.17g" % x


def _encode(obj):
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, np.ndarray):
        return _encode(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not np.isfinite(v):
            return "null"
        return fmt(v)
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def dumps(obj) -> str:
    """JSON text with every float printed to 17 significant digits."""
    return _encode(obj)


def write_text(path, text: str, force: bool = False) -> None:
    p = Path(path)
    if p.exists() and not force:
        raise InvalidConfig(f"refusing to overwrite {p} (pass --force)")
    p.write_text(text, encoding="utf-8")


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for v in row:
            if isinstance(v, (float, np.floating)):
                cells.append(fmt(float(v)) if np.isfinite(v) else "nan")
            elif v is None:
                cells.append("")
            else:
                s = str(v)
                cells.append('"' + s.replace('"', '""') + '"' if ("," in s or '"' in s) else s)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
