"""REML and ML estimation of ``delta = (sigma_gamma_sq, sigma_sq)``.

All likelihood quantities are evaluated through a spectral reduction of the
design. With ``U = [X | Z]`` and ``P_U`` its orthogonal projector, let
``mu_j`` be the nonzero eigenvalues of ``W^T (I - P_U) W`` and ``c_j`` the
coordinates of the OLS residual along the matching left singular vectors of
``(I - P_U) W``. Then, writing ``lam_j = sigma_gamma_sq * mu_j + sigma_sq``
and ``d = n - k - p``::

    Y^T Q Y     = sum c_j^2 / lam_j + rest / sigma_sq
    log|V| + log|U^T V^-1 U| = sum log lam_j + (d - r) log sigma_sq + log|U^T U|

and the score and REML information are sums over the same spectrum. The ML
determinant uses the eigenvalues ``nu_j`` of ``W^T W`` instead. Each
evaluation is O(K) once the O(n K^2) reduction is done.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .design import DesignMatrices
from .errors import SAEError, VarCompConvergenceError
from .lmm import CovarianceV, VarianceComponents, projection_q

METHODS = ("reml", "ml")
BOUNDARY_RATIO = 1e-10
SCORE_TOL = 1e-6
LOGLIK_TOL = 1e-10


def _method(method: str) -> str:
    m = str(method).lower()
    if m not in METHODS:
        raise SAEError("invalid-config", f"method must be 'reml' or 'ml', got {method!r}")
    return m


def _delta(delta) -> VarianceComponents:
    return delta if isinstance(delta, VarianceComponents) else VarianceComponents(*delta)


class LikelihoodSurface:
    """Log-likelihoods, scores and information for one design and response."""

    def __init__(self, design: DesignMatrices):
        U, W, Y = design.U, design.W, design.Y
        n, q = U.shape
        Qu, Ru = np.linalg.qr(U)
        self.n, self.q = n, q
        self.logdet_utu = 2.0 * float(np.sum(np.log(np.abs(np.diag(Ru)))))
        r0 = Y - Qu @ (Qu.T @ Y)
        self.rss0 = float(r0 @ r0)
        self.yty = float(Y @ Y)

        Wr = W - Qu @ (Qu.T @ W)
        L, sv, _ = np.linalg.svd(Wr, full_matrices=False)
        keep = sv > 1e-12 * sv[0] if sv.size and sv[0] > 0 else np.zeros(sv.shape, dtype=bool)
        self.mu = sv[keep] ** 2
        self.c2 = (L[:, keep].T @ r0) ** 2
        self.rest = max(self.rss0 - float(self.c2.sum()), 0.0)
        self.r = int(self.mu.size)

        nu = np.linalg.svd(W, compute_uv=False) ** 2
        self.nu = nu[nu > 1e-24 * nu[0]] if nu.size and nu[0] > 0 else nu[:0]
        self.rw = int(self.nu.size)

    @property
    def dof(self) -> int:
        return self.n - self.q

    # -- objective pieces -------------------------------------------------
    def yqy(self, g: float, s: float) -> float:
        lam = g * self.mu + s
        return float(np.sum(self.c2 / lam)) + self.rest / s

    def restricted_loglik(self, g: float, s: float) -> float:
        lam = g * self.mu + s
        logdet = float(np.sum(np.log(lam))) + (self.dof - self.r) * math.log(s) + self.logdet_utu
        return -0.5 * logdet - 0.5 * self.yqy(g, s)

    def logdet_v(self, g: float, s: float) -> float:
        return float(np.sum(np.log(g * self.nu + s))) + (self.n - self.rw) * math.log(s)

    def profile_loglik(self, g: float, s: float) -> float:
        return -0.5 * self.logdet_v(g, s) - 0.5 * self.yqy(g, s)

    def loglik(self, g: float, s: float, method: str) -> float:
        if method == "reml":
            return self.restricted_loglik(g, s)
        return self.profile_loglik(g, s)

    def _quad(self, g: float, s: float) -> np.ndarray:
        """``(Y^T Q B_1 Q Y, Y^T Q B_2 Q Y)`` with ``B_1 = W W^T``, ``B_2 = I``."""
        lam2 = (g * self.mu + s) ** 2
        return np.array(
            [
                float(np.sum(self.c2 * self.mu / lam2)),
                float(np.sum(self.c2 / lam2)) + self.rest / s**2,
            ]
        )

    def score(self, g: float, s: float, method: str) -> np.ndarray:
        quad = self._quad(g, s)
        if method == "reml":
            lam = g * self.mu + s
            tr = np.array([np.sum(self.mu / lam), np.sum(1.0 / lam) + (self.dof - self.r) / s])
        else:
            lv = g * self.nu + s
            tr = np.array([np.sum(self.nu / lv), np.sum(1.0 / lv) + (self.n - self.rw) / s])
        return 0.5 * quad - 0.5 * tr

    def fisher(self, g: float, s: float, method: str) -> np.ndarray:
        if method == "reml":
            ev, extra = self.mu, self.dof - self.r
        else:
            ev, extra = self.nu, self.n - self.rw
        lam2 = (g * ev + s) ** 2
        a = float(np.sum(ev**2 / lam2))
        b = float(np.sum(ev / lam2))
        c = float(np.sum(1.0 / lam2)) + extra / s**2
        return 0.5 * np.array([[a, b], [b, c]])

    # -- profiled one-dimensional problem ---------------------------------
    def _profile_divisor(self, method: str) -> int:
        return self.dof if method == "reml" else self.n

    def profiled_sigma_sq(self, tau: float, method: str) -> float:
        """Closed-form maximizer in ``sigma_sq`` for ``sigma_gamma_sq = tau * sigma_sq``."""
        R = float(np.sum(self.c2 / (1.0 + tau * self.mu))) + self.rest
        return R / self._profile_divisor(method)

    def profiled_loglik(self, tau: float, method: str) -> float:
        s = self.profiled_sigma_sq(tau, method)
        if s <= 0:
            return -math.inf
        return self.loglik(tau * s, s, method)


@dataclass(frozen=True)
class VarCompEstimate:
    delta_hat: VarianceComponents
    method: str
    fisher: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    at_boundary: bool
    score: np.ndarray

    @property
    def score_norm(self) -> float:
        return float(np.linalg.norm(self.score))


def restricted_loglik(design: DesignMatrices, delta) -> float:
    """``-1/2 log|V| - 1/2 log|U^T V^-1 U| - 1/2 Y^T Q Y`` (no additive constant)."""
    d = _delta(delta)
    return LikelihoodSurface(design).restricted_loglik(d.sigma_gamma_sq, d.sigma_sq)


def profile_loglik(design: DesignMatrices, delta) -> float:
    """``-1/2 log|V| - 1/2 Y^T Q Y`` (no additive constant)."""
    d = _delta(delta)
    return LikelihoodSurface(design).profile_loglik(d.sigma_gamma_sq, d.sigma_sq)


def reml_score(design: DesignMatrices, delta) -> np.ndarray:
    d = _delta(delta)
    return LikelihoodSurface(design).score(d.sigma_gamma_sq, d.sigma_sq, "reml")


def ml_score(design: DesignMatrices, delta) -> np.ndarray:
    d = _delta(delta)
    return LikelihoodSurface(design).score(d.sigma_gamma_sq, d.sigma_sq, "ml")


def fisher_info(design: DesignMatrices, delta, method: str = "reml", form: str = "standard") -> np.ndarray:
    """Expected information in ``(sigma_gamma_sq, sigma_sq)``.

    REML: ``1/2 tr(Q B_i Q B_j)``. ML: ``1/2 tr(V^-1 B_i V^-1 B_j)``.

    ``form`` selects, for ML only, one of two alternative expressions kept
    for diagnostics: ``"mixed_q"`` is ``tr(Q B_i Q B_j) - 1/2 tr(V^-1 B_i V^-1 B_j)``
    and ``"mixed_v"`` is ``tr(V B_i V B_j) - 1/2 tr(Q B_i Q B_j)``. Neither is
    the expected information; they are evaluated densely.
    """
    d = _delta(delta)
    method = _method(method)
    if form == "standard":
        return LikelihoodSurface(design).fisher(d.sigma_gamma_sq, d.sigma_sq, method)
    if method != "ml" or form not in ("mixed_q", "mixed_v"):
        raise SAEError("invalid-config", f"unknown information form {form!r} for method {method!r}")
    cov = CovarianceV(design.W, d)
    V = cov.dense()
    Vinv = cov.inverse()
    Q = projection_q(design, d)
    B = (design.W @ design.W.T, np.eye(design.n))

    def tr(A, i, j):
        return float(np.sum((A @ B[i]) * (A @ B[j]).T))

    out = np.empty((2, 2))
    for i in range(2):
        for j in range(2):
            if form == "mixed_q":
                out[i, j] = tr(Q, i, j) - 0.5 * tr(Vinv, i, j)
            else:
                out[i, j] = tr(V, i, j) - 0.5 * tr(Q, i, j)
    return out


def estimate_variance_components(
    design: DesignMatrices,
    method: str = "reml",
    max_iter: int = 200,
    surface: LikelihoodSurface | None = None,
) -> VarCompEstimate:
    """Maximize the REML or ML likelihood over ``sigma_gamma_sq >= 0, sigma_sq > 0``.

    A grid over the profiled log ratio ``tau = sigma_gamma_sq / sigma_sq``
    supplies the start; Fisher scoring on ``(log sigma_gamma_sq, log sigma_sq)``
    with step halving polishes it. If scoring stalls, golden-section search on
    ``log tau`` (with ``sigma_sq`` profiled) takes over and scoring restarts
    from its result. Iterates with ``sigma_gamma_sq < 1e-10 * sigma_sq`` are
    compared against the ``sigma_gamma_sq = 0`` model.

    Raises:
        SAEError: ``degenerate-response`` when ``Y`` is fitted exactly;
            ``insufficient-data`` when ``n <= k + p + 1``.
        VarCompConvergenceError: no convergence within ``max_iter`` steps.
    """
    method = _method(method)
    if design.n <= design.k + design.p + 1:
        raise SAEError("insufficient-data", f"need n > k + p + 1 units, have n = {design.n}")
    surf = surface or LikelihoodSurface(design)
    if surf.rss0 <= 1e-20 * max(surf.yty, 1e-300):
        raise SAEError("degenerate-response", "response is fitted exactly by the fixed effects")

    s0 = surf.profiled_sigma_sq(0.0, method)
    null_ll = surf.loglik(0.0, s0, method)

    if surf.r == 0:
        return _finish(surf, method, 0.0, s0, 0, at_boundary=True)

    # grid in u = log(tau * max mu)
    scale = float(surf.mu.max())
    grid = np.arange(-20.0, 25.0 + 1e-9, 0.5)
    vals = np.array([surf.profiled_loglik(math.exp(u) / scale, method) for u in grid])
    best = int(np.argmax(vals))
    if best == grid.size - 1 and surf.rest <= 1e-20 * max(surf.yty, 1e-300):
        raise SAEError("degenerate-response", "response is fitted exactly by the fixed and spline effects")

    if vals[best] <= null_ll and best == 0:
        # flat or decreasing away from the boundary
        deriv = surf.score(0.0, s0, method)[0]
        if deriv <= 0:
            return _finish(surf, method, 0.0, s0, 0, at_boundary=True)

    tau = math.exp(grid[best]) / scale
    s = surf.profiled_sigma_sq(tau, method)
    g = tau * s
    g, s, it, ok = _fisher_scoring(surf, method, g, s, max_iter)
    iterations = it
    if not ok and g >= BOUNDARY_RATIO * s:
        lo = grid[max(best - 1, 0)] - (30.0 if best == 0 else 0.0)
        hi = grid[min(best + 1, grid.size - 1)]
        res = scipy.optimize.minimize_scalar(
            lambda u: -surf.profiled_loglik(math.exp(u) / scale, method),
            bracket=(lo, grid[best], hi) if 0 < best < grid.size - 1 else (lo, hi),
            method="golden",
            tol=1e-12,
        )
        iterations += int(res.nit)
        tau = math.exp(float(res.x)) / scale
        s = surf.profiled_sigma_sq(tau, method)
        g, s, it, ok = _fisher_scoring(surf, method, tau * s, s, max(max_iter - iterations, 1))
        iterations += it

    if g < BOUNDARY_RATIO * s:
        if null_ll >= surf.loglik(g, s, method) - LOGLIK_TOL:
            return _finish(surf, method, 0.0, s0, iterations, at_boundary=True)
    if not ok:
        raise VarCompConvergenceError(
            f"{method.upper()} did not converge in {max_iter} iterations",
            {"sigma_gamma_sq": g, "sigma_sq": s, "loglik": surf.loglik(g, s, method), "iterations": iterations},
        )
    if null_ll > surf.loglik(g, s, method):
        return _finish(surf, method, 0.0, s0, iterations, at_boundary=True)
    return _finish(surf, method, g, s, iterations, at_boundary=False)


def _finish(surf, method, g, s, iterations, at_boundary) -> VarCompEstimate:
    return VarCompEstimate(
        delta_hat=VarianceComponents(g, s),
        method=method,
        fisher=surf.fisher(g, s, method),
        loglik=surf.loglik(g, s, method),
        converged=True,
        iterations=iterations,
        at_boundary=at_boundary,
        score=surf.score(g, s, method),
    )


def _fisher_scoring(surf: LikelihoodSurface, method: str, g: float, s: float, max_iter: int):
    """Scoring in ``(log g, log s)``. Returns ``(g, s, iterations, converged)``."""
    theta = np.log([g, s])
    ll = surf.loglik(g, s, method)
    for it in range(1, max_iter + 1):
        d = np.exp(theta)
        sc = surf.score(d[0], d[1], method)
        info = surf.fisher(d[0], d[1], method) * np.outer(d, d)
        try:
            step = scipy.linalg.solve(info, sc * d, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            return d[0], d[1], it, False
        t = 1.0
        for _ in range(40):
            cand = theta + t * step
            dc = np.exp(cand)
            new_ll = surf.loglik(dc[0], dc[1], method)
            if new_ll >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            return d[0], d[1], it, False
        change = new_ll - ll
        theta, ll = cand, new_ll
        dc = np.exp(theta)
        if dc[0] < BOUNDARY_RATIO * dc[1]:
            return dc[0], dc[1], it, False
        if abs(change) < LOGLIK_TOL and np.linalg.norm(surf.score(dc[0], dc[1], method)) < SCORE_TOL:
            return dc[0], dc[1], it, True
    d = np.exp(theta)
    return d[0], d[1], max_iter, False
