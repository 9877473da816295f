"""Unit-level data, knot placement and the working-model design matrices.

The working model stacks units area by area::

    Y = X theta + Z beta + W gamma + eps

where ``Z`` holds the polynomial terms ``z, z**2, ..., z**p`` of the
area-indicative variable and ``W`` the truncated-power spline basis
``(z - kappa_j)_+ ** p``. Both are constant within an area.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import SAEError

RANK_TOL = 1e-10
MAX_AUTO_KNOTS = 35


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    """Unit-level records ``(area_id, y, x, z)``.

    ``x`` is the full covariate row, leading intercept 1 included. Use
    :meth:`from_arrays` with ``add_intercept=True`` to have it synthesized.
    Areas are kept in order of first appearance.
    """

    area_id: np.ndarray
    y: np.ndarray
    x: np.ndarray
    z: np.ndarray
    areas: tuple = field(init=False)
    area_index: np.ndarray = field(init=False)
    area_z: np.ndarray = field(init=False)
    n_i: np.ndarray = field(init=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float).ravel()
        ids = np.asarray(self.area_id, dtype=object).ravel()
        n = y.shape[0]
        if n == 0:
            raise SAEError("no-records", "dataset has no records")
        if x.ndim == 1:
            x = x.reshape(n, -1) if x.size else np.ones((n, 1))
        if x.ndim != 2 or x.shape[0] != n or x.shape[1] < 1:
            raise SAEError("invalid-data", f"x must be an n x k matrix with k >= 1, got shape {x.shape}")
        if z.shape[0] != n or ids.shape[0] != n:
            raise SAEError("invalid-data", "area_id, y, x and z must have the same number of records")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x)) and np.all(np.isfinite(z))):
            raise SAEError("invalid-data", "y, x and z must be finite")

        areas: dict[Hashable, int] = {}
        index = np.empty(n, dtype=np.intp)
        for row, a in enumerate(ids):
            index[row] = areas.setdefault(a, len(areas))
        m = len(areas)
        n_i = np.bincount(index, minlength=m)

        first = np.full(m, -1)
        for row in range(n - 1, -1, -1):
            first[index[row]] = row
        area_z = z[first]
        spread = np.abs(z - area_z[index])
        if np.any(spread > 1e-12 * np.maximum(1.0, np.abs(area_z[index]))):
            bad = tuple(areas)[int(index[np.argmax(spread)])]
            raise SAEError("inconsistent-area-variable", f"z varies within area {bad!r}")

        object.__setattr__(self, "area_id", _frozen(ids))
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(area_z[index]))
        object.__setattr__(self, "areas", tuple(areas))
        object.__setattr__(self, "area_index", _frozen(index))
        object.__setattr__(self, "area_z", _frozen(area_z))
        object.__setattr__(self, "n_i", _frozen(n_i))

    @classmethod
    def from_arrays(cls, area_id, y, x, z, add_intercept: bool = False) -> "Dataset":
        y = np.asarray(y, dtype=float).ravel()
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(y.shape[0], -1)
        if add_intercept:
            x = np.column_stack([np.ones(y.shape[0]), x])
        return cls(area_id=area_id, y=y, x=x, z=z)

    @classmethod
    def from_records(cls, records: Iterable[tuple[Hashable, float, Sequence[float], float]]) -> "Dataset":
        records = list(records)
        if not records:
            raise SAEError("no-records", "dataset has no records")
        widths = {len(r[2]) for r in records}
        if len(widths) != 1:
            raise SAEError("invalid-data", "all x vectors must have the same length")
        return cls(
            area_id=[r[0] for r in records],
            y=[r[1] for r in records],
            x=np.array([list(r[2]) for r in records], dtype=float),
            z=[r[3] for r in records],
        )

    @property
    def n(self) -> int:
        return int(self.y.shape[0])

    @property
    def m(self) -> int:
        return len(self.areas)

    @property
    def k(self) -> int:
        return int(self.x.shape[1])

    def area_means(self) -> np.ndarray:
        """Sample means of ``x`` per area, shape ``(m, k)``."""
        sums = np.zeros((self.m, self.k))
        np.add.at(sums, self.area_index, self.x)
        return sums / self.n_i[:, None]


@dataclass(frozen=True)
class SplineConfig:
    """Spline degree and knot count (an int, or ``"auto"``)."""

    degree: int = 1
    knots: int | str = "auto"

    def __post_init__(self):
        if isinstance(self.degree, bool) or not isinstance(self.degree, (int, np.integer)) or self.degree < 1:
            raise SAEError("invalid-config", f"spline degree must be an integer >= 1, got {self.degree!r}")
        if self.knots != "auto":
            if isinstance(self.knots, bool) or not isinstance(self.knots, (int, np.integer)) or self.knots < 1:
                raise SAEError("invalid-config", f"knot count must be an integer >= 1 or 'auto', got {self.knots!r}")

    def resolve_knot_count(self, n_unique: int) -> int:
        if self.knots == "auto":
            return min(n_unique // 4, MAX_AUTO_KNOTS)
        return int(self.knots)


@dataclass(frozen=True)
class KnotSet:
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float).ravel()
        if k.size == 0:
            raise SAEError("invalid-config", "at least one knot is required")
        if np.any(np.diff(k) <= 0):
            raise SAEError("invalid-config", "knots must be strictly increasing")
        object.__setattr__(self, "knots", _frozen(k))

    def __len__(self) -> int:
        return int(self.knots.shape[0])


def place_knots(area_z, K: int) -> KnotSet:
    """Knots at the ``k/(K+1)`` quantiles of the distinct area values.

    Quantiles interpolate linearly between order statistics of the sorted
    unique values. Knots that coincide are merged with a warning.
    """
    if isinstance(K, bool) or not isinstance(K, (int, np.integer)) or K <= 0:
        raise SAEError("invalid-config", f"knot count must be a positive integer, got {K!r}")
    u = np.unique(np.asarray(area_z, dtype=float))
    if u.size < K + 1:
        raise SAEError(
            "insufficient-distinct-areas",
            f"{u.size} distinct area values cannot support {K} knots (need at least {K + 1})",
        )
    q = np.arange(1, K + 1) / (K + 1)
    knots = np.quantile(u, q, method="linear")
    merged = np.unique(knots)
    if merged.size < knots.size:
        warnings.warn(f"duplicate knots collapsed: K reduced from {knots.size} to {merged.size}", stacklevel=2)
    return KnotSet(merged)


def truncated_power(z, knot, p: int = 1):
    """``(z - knot) ** p`` where ``z > knot``, else 0. Vectorizes over ``z``."""
    z = np.asarray(z, dtype=float)
    d = z - knot
    out = np.where(d > 0, np.maximum(d, 0.0) ** p, 0.0)
    return float(out) if out.ndim == 0 else out


def spline_row(z: float, knots: KnotSet, p: int = 1) -> np.ndarray:
    d = float(z) - knots.knots
    return np.where(d > 0, np.maximum(d, 0.0) ** p, 0.0)


def spline_basis(z, knots: KnotSet, p: int = 1) -> np.ndarray:
    """Rows of :func:`spline_row` for every entry of ``z``."""
    d = np.asarray(z, dtype=float)[:, None] - knots.knots[None, :]
    return np.where(d > 0, np.maximum(d, 0.0) ** p, 0.0)


def poly_row(z, p: int) -> np.ndarray:
    """``(z, z**2, ..., z**p)``; stacked into rows when ``z`` is a vector."""
    z = np.asarray(z, dtype=float)
    return z[..., None] ** np.arange(1, p + 1)


def check_full_rank(A: np.ndarray, code: str, what: str) -> None:
    """Raise ``SAEError(code)`` if a pivoted QR shows a relative pivot below RANK_TOL."""
    if A.shape[0] < A.shape[1]:
        raise SAEError(code, f"{what} has more columns ({A.shape[1]}) than rows ({A.shape[0]})")
    R = scipy.linalg.qr(A, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(R))
    if diag.size and (diag[0] == 0 or diag[-1] < RANK_TOL * diag[0]):
        raise SAEError(code, f"{what} is rank deficient")


@dataclass(frozen=True)
class DesignMatrices:
    Y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    area_index: np.ndarray
    areas: tuple
    area_z: np.ndarray
    knots: KnotSet
    config: SplineConfig

    @property
    def U(self) -> np.ndarray:
        return np.hstack([self.X, self.Z])

    @property
    def n(self) -> int:
        return int(self.Y.shape[0])

    @property
    def k(self) -> int:
        return int(self.X.shape[1])

    @property
    def p(self) -> int:
        return int(self.Z.shape[1])

    @property
    def K(self) -> int:
        return int(self.W.shape[1])

    @property
    def m(self) -> int:
        return len(self.areas)

    def with_response(self, Y) -> "DesignMatrices":
        """Same design, different response vector."""
        Y = np.asarray(Y, dtype=float).ravel()
        if Y.shape != self.Y.shape:
            raise SAEError("invalid-data", f"response must have length {self.n}")
        return DesignMatrices(
            _frozen(Y), self.X, self.Z, self.W, self.area_index, self.areas, self.area_z, self.knots, self.config
        )


def assemble_design(data: Dataset, config: SplineConfig | None = None) -> DesignMatrices:
    config = config or SplineConfig()
    n_unique = np.unique(data.area_z).size
    K = config.resolve_knot_count(n_unique)
    if K < 1:
        raise SAEError(
            "insufficient-distinct-areas",
            f"{n_unique} distinct area values are too few for automatic knot placement",
        )
    knots = place_knots(data.area_z, K)
    p = config.degree
    Z = poly_row(data.z, p)
    W = spline_basis(data.z, knots, p)
    check_full_rank(np.hstack([data.x, Z]), "collinear-fixed-effects", "fixed-effects design [X | Z]")
    return DesignMatrices(
        Y=_frozen(data.y),
        X=data.x,
        Z=_frozen(Z),
        W=_frozen(W),
        area_index=data.area_index,
        areas=data.areas,
        area_z=data.area_z,
        knots=knots,
        config=config,
    )
