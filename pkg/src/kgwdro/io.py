"""File formats: data and prior CSVs, matrices, JSON output and run manifests."""

from __future__ import annotations

import csv
import hashlib
import math
from pathlib import Path

import numpy as np

from .losses import Dataset, Task

__all__ = [
    "DataFormatError",
    "read_dataset",
    "write_dataset",
    "read_thetas",
    "write_thetas",
    "read_matrix",
    "dumps",
    "sha256_file",
    "manifest",
]


class DataFormatError(ValueError):
    """An input file does not follow the expected layout."""


def _parse_float(tok: str, where: str) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise DataFormatError(f"{where}: not a number: {tok!r}") from None
    if not math.isfinite(v):
        raise DataFormatError(f"{where}: non-finite value {tok!r}")
    return v


def _read_table(path) -> tuple[list, np.ndarray]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except (OSError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if len(rows) < 2:
        raise DataFormatError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataFormatError(f"{path}: duplicate column names")
    body = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataFormatError(f"{path}:{i}: expected {len(header)} fields, got {len(row)}")
        for j, tok in enumerate(row):
            if tok.strip() == "":
                raise DataFormatError(f"{path}:{i}: missing value in column {header[j]!r}")
            body[i - 2, j] = _parse_float(tok.strip(), f"{path}:{i}")
    return header, body


def read_dataset(path, task: Task | str = Task.REGRESSION) -> Dataset:
    """Read a CSV with a header row; the column ``y`` is the response."""
    header, body = _read_table(path)
    if "y" not in header:
        raise DataFormatError(f"{path}: no 'y' column")
    iy = header.index("y")
    X = np.delete(body, iy, axis=1)
    if X.shape[1] == 0:
        raise DataFormatError(f"{path}: no covariate columns")
    try:
        return Dataset(X, body[:, iy], Task(task))
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def _fmt(v: float) -> str:
    return repr(float(v))


def write_dataset(path, data: Dataset, names=None) -> None:
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(data.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ["y"])
        for xi, yi in zip(data.X, data.y):
            w.writerow([_fmt(v) for v in xi] + [_fmt(yi)])


def read_thetas(path) -> tuple[list, np.ndarray]:
    """Prior vectors stored one per column; returns ``(names, d x M array)``."""
    header, body = _read_table(path)
    return header, body


def write_thetas(path, thetas, names=None) -> None:
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    names = list(names) if names is not None else [f"theta{m + 1}" for m in range(thetas.shape[1])]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in thetas:
            w.writerow([_fmt(v) for v in row])


def read_matrix(path) -> np.ndarray:
    """A headerless numeric CSV (e.g. a covariance-type matrix)."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except (OSError, UnicodeDecodeError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    if not rows or len({len(r) for r in rows}) != 1:
        raise DataFormatError(f"{path}: empty or ragged matrix")
    return np.array([[_parse_float(t.strip(), str(path)) for t in r] for r in rows])


# --- JSON ---------------------------------------------------------------------------

def _encode(obj, indent, level):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or obj is True or obj is False:
        return {None: "null", True: "true", False: "false"}[obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return format(v, ".17g") if math.isfinite(v) else "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        import json

        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{_encode(str(k), indent, level + 1)}: {_encode(v, indent, level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.number)) or v is None for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        items = [pad + _encode(v, indent, level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    if hasattr(obj, "value") and isinstance(obj.value, str):  # enums
        return _encode(obj.value, indent, level)
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj, indent: int = 2) -> str:
    """JSON with every float written to 17 significant digits; NaN/inf become null."""
    return _encode(obj, indent, 0) + "\n"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest(command: str, params: dict, inputs: dict, version: str, seed=None) -> dict:
    """Everything that determines a command's primary output."""
    return {
        "command": command,
        "params": params,
        "seed": seed,
        "version": version,
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(inputs.items())},
    }
