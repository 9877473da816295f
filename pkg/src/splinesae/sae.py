"""Area-level EBLUP predictions and their mean squared error.

For area ``i`` with population covariate means ``xbar_i`` and area value
``z_i`` the predictor is ``xbar_i' theta + zpoly_i' beta + w_i' gamma``.
Its MSE estimate adds three pieces:

* ``mse_fixed = b_i (U' V^-1 U)^-1 b_i'`` with
  ``b_i = Ubar_i - sigma_gamma_sq w_i W' V^-1 U``;
* ``mse_gamma = sigma_gamma_sq w_i (I - sigma_gamma_sq W' V^-1 W) w_i'``;
* ``mse_correction = 2 r' S' I^-1 S r`` for the residual ``r = Y - U psi_hat``,
  where the two rows of ``S`` are the derivatives of
  ``sigma_gamma_sq w_i W' V^-1`` in ``(sigma_gamma_sq, sigma_sq)`` and ``I`` is
  the information matrix of the variance-component fit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
import scipy.linalg

from .design import Dataset, DesignMatrices, poly_row, spline_row
from .errors import SAEError
from .lmm import BlupFit, CovarianceV, VarianceComponents, blup_fit
from .varcomp import VarCompEstimate

FLAG_SAMPLE_MEAN = "sample-mean-auxiliary"
FLAG_EXTRAPOLATION = "extrapolation"
FLAG_BOUNDARY = "no-correction-at-boundary"
FLAG_CLAMPED = "negative-correction-clamped"


@dataclass(frozen=True)
class AreaTarget:
    area_id: Hashable
    xbar: np.ndarray
    z: float
    w: np.ndarray
    zpoly: np.ndarray
    flags: tuple = ()

    @property
    def ubar(self) -> np.ndarray:
        return np.concatenate([self.xbar, self.zpoly])


def make_target(design: DesignMatrices, area_id, xbar: Sequence[float], z: float | None = None, flags=()) -> AreaTarget:
    """Build a target; ``w`` and the ``z`` powers always come from the design's knots."""
    if z is None:
        try:
            z = float(design.area_z[design.areas.index(area_id)])
        except ValueError:
            raise SAEError("unknown-area", f"area {area_id!r} is not in the dataset") from None
    xbar = np.asarray(xbar, dtype=float).ravel()
    if xbar.shape[0] != design.k:
        raise SAEError("target-fit-mismatch", f"xbar has {xbar.shape[0]} entries, the model has k = {design.k}")
    p = design.p
    flags = tuple(flags)
    if z < design.area_z.min() or z > design.area_z.max():
        flags += (FLAG_EXTRAPOLATION,)
    return AreaTarget(
        area_id=area_id,
        xbar=xbar,
        z=float(z),
        w=spline_row(z, design.knots, design.config.degree),
        zpoly=np.atleast_1d(poly_row(z, p)),
        flags=flags,
    )


def sample_mean_targets(data: Dataset, design: DesignMatrices) -> list[AreaTarget]:
    """Targets using within-area sample means of ``x`` as auxiliary means."""
    means = data.area_means()
    return [
        make_target(design, a, means[i], float(data.area_z[i]), flags=(FLAG_SAMPLE_MEAN,))
        for i, a in enumerate(data.areas)
    ]


@dataclass(frozen=True)
class AreaPrediction:
    area_id: Hashable
    estimate: float
    mse_fixed: float
    mse_gamma: float
    mse_correction: float
    mse_total: float
    rmse: float
    flags: tuple = field(default=())


def area_predictor(fit: BlupFit, target: AreaTarget) -> float:
    ubar = target.ubar
    if ubar.shape[0] != fit.psi.shape[0] or target.w.shape[0] != fit.gamma.shape[0]:
        raise SAEError(
            "target-fit-mismatch",
            f"target has {ubar.shape[0]} fixed and {target.w.shape[0]} spline terms, "
            f"fit has {fit.psi.shape[0]} and {fit.gamma.shape[0]}",
        )
    return float(ubar @ fit.psi + target.w @ fit.gamma)


def _check_target(design: DesignMatrices, target: AreaTarget) -> None:
    if target.ubar.shape[0] != design.k + design.p or target.w.shape[0] != design.K:
        raise SAEError("target-fit-mismatch", "target dimensions do not match the design")


def b_vector(design: DesignMatrices, delta: VarianceComponents, target: AreaTarget) -> np.ndarray:
    _check_target(design, target)
    g = delta.sigma_gamma_sq
    if g == 0:
        return target.ubar.copy()
    cov = CovarianceV(design.W, delta)
    return target.ubar - g * (target.w @ (cov.solve(design.W).T @ design.U))


def mse_known(design: DesignMatrices, delta: VarianceComponents, target: AreaTarget) -> tuple[float, float]:
    """Prediction MSE with known variance components: ``(mse_fixed, mse_gamma)``."""
    _check_target(design, target)
    parts = _Shared(design, delta)
    b = target.ubar - parts.g * (target.w @ parts.WtVinvU)
    return parts.fixed(b[None, :])[0], parts.gamma_term(target.w[None, :])[0]


def s_rows(design: DesignMatrices, delta: VarianceComponents, target: AreaTarget) -> np.ndarray:
    """Rows ``d(sigma_gamma_sq w W' V^-1)/d delta``, shape ``(2, n)``."""
    _check_target(design, target)
    cov = CovarianceV(design.W, delta)
    g = delta.sigma_gamma_sq
    VinvW = cov.solve(design.W)
    a = VinvW @ target.w
    s1 = a - g * (VinvW @ (design.W.T @ a))
    s2 = -g * cov.solve(a)
    return np.vstack([s1, s2])


class _Shared:
    """Quantities shared by every target at one ``delta``."""

    def __init__(self, design: DesignMatrices, delta: VarianceComponents):
        self.g = delta.sigma_gamma_sq
        self.cov = CovarianceV(design.W, delta)
        U = design.U
        self.VinvW = self.cov.solve(design.W)
        self.WtVinvW = design.W.T @ self.VinvW
        self.WtVinvU = self.VinvW.T @ U
        G = U.T @ self.cov.solve(U)
        self.G_cf = scipy.linalg.cho_factor(0.5 * (G + G.T), lower=True)

    def fixed(self, B: np.ndarray) -> np.ndarray:
        sol = scipy.linalg.cho_solve(self.G_cf, B.T)
        return np.maximum(np.einsum("ij,ji->i", B, sol), 0.0)

    def gamma_term(self, Wt: np.ndarray) -> np.ndarray:
        g = self.g
        if g == 0:
            return np.zeros(Wt.shape[0])
        quad = np.einsum("ij,ij->i", Wt, Wt) - g * np.einsum("ij,jk,ik->i", Wt, self.WtVinvW, Wt)
        return np.maximum(g * quad, 0.0)


def predict_areas(
    design: DesignMatrices,
    varest: VarCompEstimate,
    targets: Sequence[AreaTarget],
    fit: BlupFit | None = None,
) -> list[AreaPrediction]:
    """EBLUP and MSE estimate for each target at the estimated variance components."""
    delta = varest.delta_hat
    if fit is None:
        fit = blup_fit(design, delta)
    if not targets:
        return []
    for t in targets:
        _check_target(design, t)
    parts = _Shared(design, delta)
    g = parts.g
    Ubar = np.vstack([t.ubar for t in targets])
    Wt = np.vstack([t.w for t in targets])
    estimates = Ubar @ fit.psi + Wt @ fit.gamma
    B = Ubar - g * (Wt @ parts.WtVinvU)
    m_fixed = parts.fixed(B)
    m_gamma = parts.gamma_term(Wt)

    correction = np.zeros(len(targets))
    shared_flags: tuple = ()
    info_cf = None
    if varest.at_boundary:
        shared_flags = (FLAG_BOUNDARY,)
    else:
        try:
            info_cf = scipy.linalg.cho_factor(varest.fisher, lower=True)
        except np.linalg.LinAlgError:
            shared_flags = (FLAG_BOUNDARY,)
    if info_cf is not None:
        a = design.W.T @ parts.cov.solve(fit.residual)
        t1 = a - g * (parts.WtVinvW @ a)
        t2 = -g * (parts.VinvW.T @ parts.cov.solve(fit.residual))
        H = np.column_stack([Wt @ t1, Wt @ t2])
        correction = 2.0 * np.einsum("ij,ji->i", H, scipy.linalg.cho_solve(info_cf, H.T))

    out = []
    for j, t in enumerate(targets):
        flags = t.flags + shared_flags
        corr = float(correction[j])
        if corr < 0:
            warnings.warn(f"negative MSE correction {corr:.3g} clamped to 0 for area {t.area_id!r}", stacklevel=2)
            flags += (FLAG_CLAMPED,)
        total = float(m_fixed[j] + m_gamma[j] + max(corr, 0.0))
        out.append(
            AreaPrediction(
                area_id=t.area_id,
                estimate=float(estimates[j]),
                mse_fixed=float(m_fixed[j]),
                mse_gamma=float(m_gamma[j]),
                mse_correction=corr,
                mse_total=total,
                rmse=math.sqrt(total),
                flags=flags,
            )
        )
    return out


def mse_eblup(design: DesignMatrices, varest: VarCompEstimate, fit: BlupFit, target: AreaTarget) -> AreaPrediction:
    return predict_areas(design, varest, [target], fit=fit)[0]
