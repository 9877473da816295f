"""CSV ingestion and report serialization."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from pathlib import Path

import numpy as np

from .design import Dataset
from .errors import SAEError


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise SAEError("unreadable-input", f"{path}: {exc.strerror or exc}") from None


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _rows(raw: bytes, source: str):
    try:
        text = raw.decode("utf-8-sig")
    except UnicodeDecodeError as exc:
        raise SAEError("malformed-csv", f"{source}: not valid UTF-8 ({exc.reason})") from None
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            yield reader.line_num, [c.strip() for c in row]
    except csv.Error as exc:
        raise SAEError("malformed-csv", f"{source}: line {reader.line_num}: {exc}") from None


def _number(text: str, line: int, column: str, source: str) -> float:
    if text == "":
        raise SAEError("malformed-csv", f"{source}: line {line}: missing value for {column!r}")
    try:
        v = float(text)
    except ValueError:
        raise SAEError("malformed-csv", f"{source}: line {line}: {column!r} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise SAEError("malformed-csv", f"{source}: line {line}: {column!r} must be finite")
    return v


def parse_units(raw: bytes, source: str = "input") -> tuple[Dataset, list[str]]:
    """Parse ``area_id,y,x1,...,xk,z``. Returns the dataset and covariate names.

    An intercept column is prepended to the covariates.
    """
    rows = _rows(raw, source)
    try:
        line, header = next(rows)
    except StopIteration:
        raise SAEError("no-records", f"{source}: file is empty") from None
    if len(header) < 3 or header[0] != "area_id" or header[1] != "y" or header[-1] != "z":
        raise SAEError(
            "malformed-csv",
            f"{source}: line {line}: header must be area_id,y,<covariates>,z; got {','.join(header)}",
        )
    names = header[2:-1]
    ids, ys, xs, zs = [], [], [], []
    for line, row in rows:
        if len(row) != len(header):
            raise SAEError("malformed-csv", f"{source}: line {line}: expected {len(header)} fields, got {len(row)}")
        if row[0] == "":
            raise SAEError("malformed-csv", f"{source}: line {line}: missing area_id")
        ids.append(row[0])
        ys.append(_number(row[1], line, "y", source))
        xs.append([_number(v, line, c, source) for v, c in zip(row[2:-1], names)])
        zs.append(_number(row[-1], line, "z", source))
    if not ids:
        raise SAEError("no-records", f"{source}: no data rows")
    x = np.column_stack([np.ones(len(ids)), np.array(xs, dtype=float).reshape(len(ids), len(names))])
    return Dataset(area_id=ids, y=ys, x=x, z=zs), names


def parse_targets(raw: bytes, n_covariates: int, source: str = "targets") -> dict[str, np.ndarray]:
    """Parse ``area_id,xbar1,...,xbark`` into ``{area_id: xbar}`` with the intercept prepended."""
    rows = _rows(raw, source)
    try:
        line, header = next(rows)
    except StopIteration:
        raise SAEError("no-records", f"{source}: file is empty") from None
    if not header or header[0] != "area_id" or len(header) != n_covariates + 1:
        raise SAEError(
            "malformed-csv",
            f"{source}: line {line}: header must be area_id plus {n_covariates} covariate mean column(s)",
        )
    out: dict[str, np.ndarray] = {}
    for line, row in rows:
        if len(row) != len(header):
            raise SAEError("malformed-csv", f"{source}: line {line}: expected {len(header)} fields, got {len(row)}")
        if row[0] in out:
            raise SAEError("malformed-csv", f"{source}: line {line}: duplicate area_id {row[0]!r}")
        out[row[0]] = np.array([1.0] + [_number(v, line, c, source) for v, c in zip(row[1:], header[1:])])
    return out


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(report: dict) -> str:
    """Deterministic JSON: sorted keys, non-finite floats as null."""
    return json.dumps(_clean(report), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_csv(header: list[str], rows, stream) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(r)


def csv_text(header: list[str], rows) -> str:
    buf = io.StringIO()
    write_csv(header, rows, buf)
    return buf.getvalue()
