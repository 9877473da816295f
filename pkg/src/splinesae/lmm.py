"""Mixed-model algebra for ``V = sigma_gamma^2 W W^T + sigma^2 I``.

Solves against ``V`` go through the K x K reduced system::

    V^-1 = sigma^-2 (I - t W (I_K + t W^T W)^-1 W^T),   t = sigma_gamma^2 / sigma^2

so no n x n matrix is formed unless one is explicitly requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .design import DesignMatrices, check_full_rank
from .errors import SAEError


@dataclass(frozen=True)
class VarianceComponents:
    """``delta = (sigma_gamma_sq, sigma_sq)``; this order is used everywhere."""

    sigma_gamma_sq: float
    sigma_sq: float

    def __post_init__(self):
        g, s = float(self.sigma_gamma_sq), float(self.sigma_sq)
        if not (math.isfinite(s) and s > 0):
            raise SAEError("invalid-variance", f"sigma_sq must be positive, got {self.sigma_sq!r}")
        if not (math.isfinite(g) and g >= 0):
            raise SAEError("invalid-variance", f"sigma_gamma_sq must be nonnegative, got {self.sigma_gamma_sq!r}")
        object.__setattr__(self, "sigma_gamma_sq", g)
        object.__setattr__(self, "sigma_sq", s)

    @property
    def penalty(self) -> float:
        """Smoothing parameter ``lambda = sigma_sq / sigma_gamma_sq`` (inf at zero)."""
        if self.sigma_gamma_sq == 0:
            return math.inf
        return self.sigma_sq / self.sigma_gamma_sq

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma_gamma_sq, self.sigma_sq])


class CovarianceV:
    """Factorized ``V = g W W^T + s I`` (read-only once built)."""

    def __init__(self, W: np.ndarray, delta: VarianceComponents):
        if not isinstance(delta, VarianceComponents):
            delta = VarianceComponents(*delta)
        self.W = np.asarray(W, dtype=float)
        self.delta = delta
        self.n, self.K = self.W.shape
        self.g = delta.sigma_gamma_sq
        self.s = delta.sigma_sq
        self._t = self.g / self.s
        if self._t > 0 and self.K > 0:
            core = np.eye(self.K) + self._t * (self.W.T @ self.W)
            self._chol = scipy.linalg.cho_factor(core, lower=True)
        else:
            self._chol = None

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """``V^-1 rhs`` for a vector or n-row matrix."""
        rhs = np.asarray(rhs, dtype=float)
        if self._chol is None:
            return rhs / self.s
        inner = scipy.linalg.cho_solve(self._chol, self.W.T @ rhs)
        return (rhs - self._t * (self.W @ inner)) / self.s

    def logdet(self) -> float:
        out = self.n * math.log(self.s)
        if self._chol is not None:
            out += 2.0 * float(np.sum(np.log(np.diag(self._chol[0]))))
        return out

    def dense(self) -> np.ndarray:
        return self.g * (self.W @ self.W.T) + self.s * np.eye(self.n)

    def inverse(self) -> np.ndarray:
        """Explicit ``V^-1`` through the reduced system."""
        return self.solve(np.eye(self.n))

    def solve_dense(self, rhs: np.ndarray) -> np.ndarray:
        """Reference path: Cholesky of the materialized n x n matrix."""
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(self.dense(), lower=True), rhs)


def covariance_v(W: np.ndarray, delta: VarianceComponents) -> CovarianceV:
    return CovarianceV(W, delta)


@dataclass(frozen=True)
class BlupFit:
    """BLUP solution at fixed variance components.

    ``psi`` stacks ``theta`` (k entries) then ``beta`` (p entries).
    """

    psi: np.ndarray
    gamma: np.ndarray
    psi_cov: np.ndarray
    delta: VarianceComponents
    residual: np.ndarray
    k: int
    p: int

    @property
    def theta(self) -> np.ndarray:
        return self.psi[: self.k]

    @property
    def beta(self) -> np.ndarray:
        return self.psi[self.k :]

    @property
    def psi_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.psi_cov))


def _spd_inverse(A: np.ndarray, code: str, what: str) -> tuple:
    try:
        return scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SAEError(code, f"{what} is not positive definite") from exc


def blup_fit(design: DesignMatrices, delta: VarianceComponents, cov: CovarianceV | None = None) -> BlupFit:
    U, Y = design.U, design.Y
    if cov is None:
        cov = CovarianceV(design.W, delta)
    if delta.sigma_gamma_sq == 0:
        # V = sigma^2 I: ordinary least squares
        q_, r_ = np.linalg.qr(U)
        psi = scipy.linalg.solve_triangular(r_, q_.T @ Y)
        rinv = scipy.linalg.solve_triangular(r_, np.eye(U.shape[1]))
        psi_cov = delta.sigma_sq * (rinv @ rinv.T)
        gamma = np.zeros(design.K)
    else:
        VinvU = cov.solve(U)
        G = U.T @ VinvU
        G = 0.5 * (G + G.T)
        cf = _spd_inverse(G, "collinear-fixed-effects", "U^T V^-1 U")
        psi = scipy.linalg.cho_solve(cf, VinvU.T @ Y)
        psi_cov = scipy.linalg.cho_solve(cf, np.eye(U.shape[1]))
        psi_cov = 0.5 * (psi_cov + psi_cov.T)
        gamma = delta.sigma_gamma_sq * (design.W.T @ cov.solve(Y - U @ psi))
    residual = Y - U @ psi
    return BlupFit(psi=psi, gamma=gamma, psi_cov=psi_cov, delta=delta, residual=residual, k=design.k, p=design.p)


def projection_q(design: DesignMatrices, delta: VarianceComponents) -> np.ndarray:
    """``Q = V^-1 - V^-1 U (U^T V^-1 U)^-1 U^T V^-1`` as a dense matrix."""
    check_full_rank(design.U, "collinear-fixed-effects", "fixed-effects design [X | Z]")
    return _projection(CovarianceV(design.W, delta), design.U)


def projection_m(design: DesignMatrices, delta: VarianceComponents) -> np.ndarray:
    """``M = V^-1 - V^-1 X (X^T V^-1 X)^-1 X^T V^-1`` as a dense matrix."""
    check_full_rank(design.X, "collinear-fixed-effects", "covariate matrix X")
    return _projection(CovarianceV(design.W, delta), design.X)


def _projection(cov: CovarianceV, A: np.ndarray) -> np.ndarray:
    Vinv = cov.inverse()
    VinvA = Vinv @ A
    G = A.T @ VinvA
    out = Vinv - VinvA @ np.linalg.solve(G, VinvA.T)
    return 0.5 * (out + out.T)


def gls_components(design: DesignMatrices, delta: VarianceComponents) -> tuple[np.ndarray, np.ndarray]:
    """Split GLS: ``beta`` through ``M``, then ``theta`` given ``beta``.

    Returns ``(theta, beta)`` computed as
    ``beta = (Z^T M Z)^-1 Z^T M Y`` and
    ``theta = (X^T V^-1 X)^-1 X^T V^-1 (Y - Z beta)``.
    """
    cov = CovarianceV(design.W, delta)
    X, Z, Y = design.X, design.Z, design.Y
    VinvX, VinvZ, VinvY = cov.solve(X), cov.solve(Z), cov.solve(Y)
    A = X.T @ VinvX
    cfA = _spd_inverse(0.5 * (A + A.T), "collinear-fixed-effects", "X^T V^-1 X")
    XtVZ = X.T @ VinvZ
    ZMZ = Z.T @ VinvZ - XtVZ.T @ scipy.linalg.cho_solve(cfA, XtVZ)
    ZMZ = 0.5 * (ZMZ + ZMZ.T)
    ZMY = Z.T @ VinvY - XtVZ.T @ scipy.linalg.cho_solve(cfA, X.T @ VinvY)
    check_zmz(ZMZ, Z.T @ VinvZ)
    beta = np.linalg.solve(ZMZ, ZMY)
    theta = scipy.linalg.cho_solve(cfA, X.T @ (VinvY - VinvZ @ beta))
    return theta, beta


def check_zmz(ZMZ: np.ndarray, ZVZ: np.ndarray) -> None:
    scale = float(np.max(np.abs(np.diag(ZVZ)))) or 1.0
    eig = np.linalg.eigvalsh(ZMZ)
    if eig[0] <= 1e-10 * scale:
        raise SAEError("z-collinear-with-x", "Z^T M Z is singular: the area polynomial lies in the span of X")
