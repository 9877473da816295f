"""Tests for the presence of an area effect.

Two hypotheses are tested:

* H1, ``beta = 0``: the Wald-type statistic ``Y' M Z (Z' M Z)^-1 Z' M Y`` with
  REML plug-in variances, referred to chi-square with ``p`` degrees of freedom.
* H2, ``sigma_gamma_sq = 0``: the ML likelihood-ratio statistic, referred to the
  boundary mixture ``0.5 chi2_0 + 0.5 chi2_1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy import stats

from .design import Dataset, DesignMatrices
from .errors import SAEError
from .lmm import CovarianceV, VarianceComponents, check_zmz
from .varcomp import LikelihoodSurface, VarCompEstimate, estimate_variance_components

CHI2 = "chi2"
MIXTURE = "mixture_half_chi2"


@dataclass(frozen=True)
class TestResult:
    test: str
    statistic: float
    null_dist: str
    df: int
    p_value: float
    reject: bool
    alpha: float
    delta_used: VarianceComponents

    __test__ = False  # not a pytest class

    def to_dict(self) -> dict:
        return {
            "test": self.test,
            "statistic": self.statistic,
            "df_or_mixture": self.df if self.null_dist == CHI2 else "0.5*chi2_0+0.5*chi2_1",
            "p_value": self.p_value,
            "alpha": self.alpha,
            "reject": self.reject,
        }


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0 < alpha < 1:
        raise SAEError("invalid-config", f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def beta_statistic(design: DesignMatrices, delta: VarianceComponents) -> float:
    cov = CovarianceV(design.W, delta)
    X, Z, Y = design.X, design.Z, design.Y
    VinvX, VinvZ, VinvY = cov.solve(X), cov.solve(Z), cov.solve(Y)
    A = X.T @ VinvX
    cf = scipy.linalg.cho_factor(0.5 * (A + A.T), lower=True)
    XtVZ = X.T @ VinvZ
    ZMZ = Z.T @ VinvZ - XtVZ.T @ scipy.linalg.cho_solve(cf, XtVZ)
    ZMZ = 0.5 * (ZMZ + ZMZ.T)
    ZMY = Z.T @ VinvY - XtVZ.T @ scipy.linalg.cho_solve(cf, X.T @ VinvY)
    check_zmz(ZMZ, Z.T @ VinvZ)
    t = float(ZMY @ np.linalg.solve(ZMZ, ZMY))
    # roundoff when M Y vanishes
    return t if t > 1e-12 * float(Y @ VinvY) else 0.0


def test_beta(design: DesignMatrices, varest_or_delta=None, alpha: float = 0.05) -> TestResult:
    """Test ``beta = 0``.

    ``varest_or_delta`` may be a :class:`VarCompEstimate`, a
    :class:`VarianceComponents`, or ``None`` to fit REML on the full model.
    """
    alpha = _check_alpha(alpha)
    if varest_or_delta is None:
        varest_or_delta = estimate_variance_components(design, "reml")
    delta = varest_or_delta.delta_hat if isinstance(varest_or_delta, VarCompEstimate) else varest_or_delta
    if not isinstance(delta, VarianceComponents):
        delta = VarianceComponents(*delta)
    t = beta_statistic(design, delta)
    p_value = float(stats.chi2.sf(t, design.p)) if t > 0 else 1.0
    return TestResult("H1: beta = 0", t, CHI2, design.p, p_value, p_value < alpha, alpha, delta)


test_beta.__test__ = False


def mixture_pvalue(t: float) -> float:
    """Upper tail of ``0.5 chi2_0 + 0.5 chi2_1``; 1 at ``t = 0``."""
    t = float(t)
    if not t >= 0:
        raise SAEError("invalid-statistic", f"statistic must be nonnegative, got {t}")
    if t == 0:
        return 1.0
    return 0.5 * float(stats.chi2.sf(t, 1))


def lrt_area_effect(design: DesignMatrices, alpha: float = 0.05, full: VarCompEstimate | None = None) -> TestResult:
    """ML likelihood-ratio test of ``sigma_gamma_sq = 0``.

    The statistic is twice the gap between the maximized profile ML
    log-likelihoods of the full and the ``sigma_gamma_sq = 0`` models.
    """
    alpha = _check_alpha(alpha)
    surf = LikelihoodSurface(design)
    if full is None:
        full = estimate_variance_components(design, "ml", surface=surf)
    elif full.method != "ml":
        raise SAEError("invalid-config", "the likelihood-ratio test needs an ML fit")
    if full.at_boundary:
        t = 0.0
    else:
        s0 = surf.profiled_sigma_sq(0.0, "ml")
        t = max(2.0 * (full.loglik - surf.profile_loglik(0.0, s0)), 0.0)
    p_value = mixture_pvalue(t)
    return TestResult("H2: sigma_gamma_sq = 0", t, MIXTURE, 1, p_value, p_value < alpha, alpha, full.delta_hat)


@dataclass(frozen=True)
class AreaDiagnostic:
    areas: tuple
    area_z: np.ndarray
    beta1_within: float
    vtilde: np.ndarray
    corr_with_z: float


def diagnose_area_effect(data: Dataset) -> AreaDiagnostic:
    """Pooled within-area slope and the area residuals ``ybar_i - xbar_i * slope``.

    Needs exactly one covariate besides the intercept. Reports the sample
    correlation of the area residuals with the area-indicative variable.
    """
    if data.k != 2:
        raise SAEError("invalid-config", f"diagnostic needs intercept plus one covariate (k = 2), got k = {data.k}")
    idx = data.area_index
    x = data.x[:, 1]
    y = data.y
    xbar = np.bincount(idx, weights=x) / data.n_i
    ybar = np.bincount(idx, weights=y) / data.n_i
    dx = x - xbar[idx]
    dy = y - ybar[idx]
    sxx = float(dx @ dx)
    if sxx <= 1e-12 * max(float(x @ x), 1e-300):
        raise SAEError("degenerate-within-variation", "x does not vary within any area")
    slope = float(dx @ dy) / sxx
    vtilde = ybar - xbar * slope
    zc = data.area_z - data.area_z.mean()
    vc = vtilde - vtilde.mean()
    spread_v = float(np.sqrt(vc @ vc))
    spread_z = float(np.sqrt(zc @ zc))
    if spread_v <= 1e-12 * max(float(np.abs(vtilde).max()), 1.0) or spread_z == 0:
        raise SAEError("zero-variance-diagnostic", "area residuals or z do not vary; correlation undefined")
    corr = float(np.clip((zc @ vc) / (spread_v * spread_z), -1.0, 1.0))
    return AreaDiagnostic(areas=data.areas, area_z=data.area_z, beta1_within=slope, vtilde=vtilde, corr_with_z=corr)
