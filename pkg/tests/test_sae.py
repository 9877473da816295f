import warnings

import numpy as np
import pytest
from conftest import random_delta, random_design
from hypothesis import given, settings
from hypothesis import strategies as st

from splinesae.design import Dataset, SplineConfig, assemble_design
from splinesae.errors import SAEError
from splinesae.lmm import CovarianceV, VarianceComponents, blup_fit
from splinesae.sae import (
    FLAG_BOUNDARY,
    FLAG_EXTRAPOLATION,
    FLAG_SAMPLE_MEAN,
    AreaTarget,
    area_predictor,
    b_vector,
    make_target,
    mse_eblup,
    mse_known,
    predict_areas,
    s_rows,
    sample_mean_targets,
)
from splinesae.varcomp import estimate_variance_components


def f1_target(design):
    return make_target(design, "a1", [1.0])


def test_f1_prediction(f1, delta11):
    t = f1_target(f1)
    np.testing.assert_array_equal(t.w, [1.0])
    assert area_predictor(blup_fit(f1, delta11), t) == pytest.approx(2.0, rel=1e-12)


def test_f1_b_vector(f1, delta11):
    np.testing.assert_allclose(b_vector(f1, delta11, f1_target(f1)), [0.5], rtol=1e-12)


def test_f1_known_mse(f1, delta11):
    fixed, gamma = mse_known(f1, delta11, f1_target(f1))
    assert fixed == pytest.approx(1 / 6, rel=1e-12)
    assert gamma == pytest.approx(1 / 2, rel=1e-12)
    assert fixed + gamma == pytest.approx(2 / 3, rel=1e-12)


def test_zero_sigma_gamma():
    rng = np.random.default_rng(2)
    data, d = random_design(rng)
    delta = VarianceComponents(0.0, 1.5)
    fit = blup_fit(d, delta)
    t = sample_mean_targets(data, d)[0]
    assert area_predictor(fit, t) == pytest.approx(t.ubar @ fit.psi)
    np.testing.assert_allclose(b_vector(d, delta, t), t.ubar)
    fixed, gamma = mse_known(d, delta, t)
    assert gamma == 0
    assert fixed == pytest.approx(t.ubar @ fit.psi_cov @ t.ubar, rel=1e-10)


def test_below_first_knot():
    rng = np.random.default_rng(4)
    data, d = random_design(rng)
    t = make_target(d, d.areas[0], data.area_means()[0], z=d.knots.knots[0] - 1.0)
    assert not t.w.any()
    delta = VarianceComponents(2.0, 1.0)
    fit = blup_fit(d, delta)
    assert area_predictor(fit, t) == pytest.approx(t.ubar @ fit.psi)
    np.testing.assert_allclose(b_vector(d, delta, t), t.ubar)
    assert not s_rows(d, delta, t).any()
    assert FLAG_EXTRAPOLATION in t.flags


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_s_rows_finite_differences(seed):
    rng = np.random.default_rng(seed)
    data, d = random_design(rng)
    delta = random_delta(rng).as_array()
    t = sample_mean_targets(data, d)[-1]

    def row(dl):
        cov = CovarianceV(d.W, VarianceComponents(*dl))
        return dl[0] * cov.solve(d.W @ t.w)

    S = s_rows(d, VarianceComponents(*delta), t)
    for j in range(2):
        h = 1e-5 * delta[j]
        up, dn = delta.copy(), delta.copy()
        up[j] += h
        dn[j] -= h
        fd = (row(up) - row(dn)) / (2 * h)
        np.testing.assert_allclose(S[j], fd, rtol=1e-5, atol=1e-8 * np.abs(fd).max())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_batch_matches_single_target(seed):
    rng = np.random.default_rng(seed)
    data, d = random_design(rng, m=5, max_ni=4)
    Y = d.Y + d.W @ rng.normal(scale=2, size=d.K)
    d = d.with_response(Y)
    est = estimate_variance_components(d)
    fit = blup_fit(d, est.delta_hat)
    targets = sample_mean_targets(data, d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        batch = predict_areas(d, est, targets, fit=fit)
        for t, p in zip(targets, batch):
            single = mse_eblup(d, est, fit, t)
            assert single.estimate == pytest.approx(p.estimate)
            assert single.mse_total == pytest.approx(p.mse_total)
            fixed, gamma = mse_known(d, est.delta_hat, t)
            assert p.mse_fixed == pytest.approx(fixed, rel=1e-9, abs=1e-14)
            assert p.mse_gamma == pytest.approx(gamma, rel=1e-9, abs=1e-14)
            assert p.mse_fixed >= 0 and p.mse_gamma >= 0
            assert p.mse_total == pytest.approx(p.mse_fixed + p.mse_gamma + max(p.mse_correction, 0.0))
            assert p.rmse == pytest.approx(np.sqrt(p.mse_total))
            if not est.at_boundary:
                Sr = s_rows(d, est.delta_hat, t) @ fit.residual
                assert p.mse_correction == pytest.approx(2 * Sr @ np.linalg.solve(est.fisher, Sr), rel=1e-8, abs=1e-14)


def fixed_design():
    rng = np.random.default_rng(42)
    m, ni = 12, 3
    z = np.linspace(0.5, 2.0, m)
    area = np.repeat(np.arange(m), ni)
    x = rng.uniform(1 / 3, 3, size=m * ni)
    data = Dataset.from_arrays(area, np.zeros(m * ni), x, z[area], add_intercept=True)
    return data, assemble_design(data, SplineConfig(1, 4))


def test_known_mse_monte_carlo():
    data, d = fixed_design()
    delta = VarianceComponents(1.0, 1.0)
    targets = sample_mean_targets(data, d)
    expected = np.array([sum(mse_known(d, delta, t)) for t in targets])
    Ubar = np.vstack([t.ubar for t in targets])
    Wt = np.vstack([t.w for t in targets])
    psi = np.ones(d.U.shape[1])
    rng = np.random.default_rng(7)
    reps = 5000
    sq = np.zeros(len(targets))
    for _ in range(reps):
        gamma = rng.normal(size=d.K)
        Y = d.U @ psi + d.W @ gamma + rng.normal(size=d.n)
        fit = blup_fit(d.with_response(Y), delta)
        sq += (Ubar @ fit.psi + Wt @ fit.gamma - Ubar @ psi - Wt @ gamma) ** 2
    empirical = sq / reps
    assert empirical.mean() == pytest.approx(expected.mean(), rel=0.05)
    np.testing.assert_allclose(empirical, expected, rtol=0.1)


def test_predict_flags_and_boundary():
    rng = np.random.default_rng(0)
    m, ni = 20, 4
    z = rng.uniform(0.5, 2, m)
    area = np.repeat(np.arange(m), ni)
    x = rng.uniform(0, 3, m * ni)
    data = Dataset.from_arrays(area, 1 + x + z[area] + 0.01 * rng.normal(size=m * ni), x, z[area], add_intercept=True)
    d = assemble_design(data)
    est = estimate_variance_components(d)
    preds = predict_areas(d, est, sample_mean_targets(data, d))
    assert len(preds) == m
    assert all(FLAG_SAMPLE_MEAN in p.flags for p in preds)
    if est.at_boundary:
        assert all(FLAG_BOUNDARY in p.flags and p.mse_correction == 0 for p in preds)


def test_unknown_area_and_mismatch():
    rng = np.random.default_rng(1)
    data, d = random_design(rng)
    with pytest.raises(SAEError) as e:
        make_target(d, "nope", [1.0, 0.0])
    assert e.value.code == "unknown-area"
    with pytest.raises(SAEError) as e:
        make_target(d, d.areas[0], [1.0, 0.0, 3.0])
    assert e.value.code == "target-fit-mismatch"
    fit = blup_fit(d, VarianceComponents(1, 1))
    bad = AreaTarget("x", np.ones(2), 1.0, np.ones(d.K + 1), np.ones(1))
    with pytest.raises(SAEError) as e:
        area_predictor(fit, bad)
    assert e.value.code == "target-fit-mismatch"
