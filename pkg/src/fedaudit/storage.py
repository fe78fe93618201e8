"""On-disk artifacts: parameter blobs, JSON with infinity sentinels, CSV headers."""
from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<Q")


def write_params(path, theta) -> None:
    """Little-endian float64 values behind an 8-byte little-endian length header."""
    theta = np.ascontiguousarray(theta, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(theta.size))
        fh.write(theta.tobytes())


def read_params(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated parameter blob")
    (n,) = _HEADER.unpack_from(raw)
    if len(raw) != _HEADER.size + 8 * n:
        raise ValueError(f"{path}: header says {n} values, file holds {(len(raw) - 8) / 8:g}")
    return np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)


def sanitize(obj):
    """Replace non-finite floats with the strings "inf", "-inf" and "nan"."""
    if isinstance(obj, dict):
        return {k: sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def desanitize(value):
    if isinstance(value, str) and value in ("inf", "-inf", "nan"):
        return float(value)
    return value


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(sanitize(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def csv_preamble(config_hash: str | None) -> str:
    return f"# config_hash: {config_hash}\n" if config_hash else ""


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def write_csv(path, header, rows, config_hash: str | None = None) -> None:
    with open(path, "w") as fh:
        fh.write(csv_preamble(config_hash))
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def read_csv(path):
    """(header, rows as lists of strings); lines starting with '#' are skipped."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError(f"{path}: no header row")
    return lines[0].split(","), [ln.split(",") for ln in lines[1:]]
