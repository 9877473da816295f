"""Monte Carlo studies under the partially linear unit-level model.

Data are generated as ``y_ij = theta_0 + theta_1 x_ij + v(z_i) + e_ij`` with
``x ~ U(x_range)``, ``z ~ U(z_range)`` and Gaussian errors. Each replicate fits
REML, predicts every area, and runs both area-effect tests. Replicate ``b``
draws from ``SeedSequence([base_seed, b])``, so any subset of replicates can be
re-run on its own and results do not depend on execution order.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .design import Dataset, SplineConfig, assemble_design
from .errors import SAEError
from .inference import lrt_area_effect, test_beta
from .lmm import blup_fit
from .sae import predict_areas, sample_mean_targets
from .varcomp import LikelihoodSurface, estimate_variance_components

MODELS = ("M1", "M2", "M3", "M4", "M5")
FAILURE_FLAG_RATE = 0.02


def v_function(model_id: str, z):
    """Area effect ``v(z)`` for the five benchmark models."""
    z = np.asarray(z, dtype=float)
    if model_id == "M1":
        out = np.sin(z)
    elif model_id == "M2":
        out = 1.0 + z
    elif model_id == "M3":
        out = np.exp(z)
    elif model_id == "M4":
        out = stats.norm.pdf(z)
    elif model_id == "M5":
        out = np.ones_like(z)
    else:
        raise SAEError("unknown-model", f"model must be one of {', '.join(MODELS)}, got {model_id!r}")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SimScenario:
    model_id: str = "M5"
    m: int = 30
    n_per_area: int = 4
    theta: tuple = (1.0, 1.0)
    sigma_e: float = 1.0
    x_range: tuple = (1 / 3, 3.0)
    z_range: tuple = (0.5, 2.0)
    p: int = 1
    K: int | str = "auto"
    B: int = 1000
    alpha: float = 0.05
    base_seed: int = 0

    def __post_init__(self):
        if self.model_id not in MODELS:
            raise SAEError("unknown-model", f"model must be one of {', '.join(MODELS)}, got {self.model_id!r}")
        if self.B < 1 or self.m < 2 or self.n_per_area < 1:
            raise SAEError("invalid-config", "need B >= 1, m >= 2 and n_per_area >= 1")
        if not self.sigma_e > 0:
            raise SAEError("invalid-config", f"sigma_e must be positive, got {self.sigma_e}")
        if not 0 < self.alpha < 1:
            raise SAEError("invalid-config", f"alpha must lie in (0, 1), got {self.alpha}")
        if len(self.theta) != 2:
            raise SAEError("invalid-config", "theta must hold an intercept and one slope")
        object.__setattr__(self, "theta", tuple(float(t) for t in self.theta))
        object.__setattr__(self, "x_range", tuple(float(t) for t in self.x_range))
        object.__setattr__(self, "z_range", tuple(float(t) for t in self.z_range))
        SplineConfig(self.p, self.K)

    def to_dict(self) -> dict:
        return asdict(self)


def replicate_rng(base_seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(b)]))


def generate_dataset(scenario: SimScenario, b: int) -> tuple[Dataset, np.ndarray]:
    """Dataset for replicate ``b`` and the per-area truth ``xbar_i' theta + v(z_i)``.

    ``xbar_i`` is the realized sample mean of the area's covariates.
    """
    rng = replicate_rng(scenario.base_seed, b)
    m, n_i = scenario.m, scenario.n_per_area
    z = rng.uniform(*scenario.z_range, size=m)
    x = rng.uniform(*scenario.x_range, size=(m, n_i))
    e = rng.normal(0.0, scenario.sigma_e, size=(m, n_i))
    t0, t1 = scenario.theta
    v = v_function(scenario.model_id, z)
    y = t0 + t1 * x + v[:, None] + e
    data = Dataset.from_arrays(
        area_id=np.repeat(np.arange(m), n_i),
        y=y.ravel(),
        x=x.ravel(),
        z=np.repeat(z, n_i),
        add_intercept=True,
    )
    truth = t0 + t1 * x.mean(axis=1) + v
    return data, truth


@dataclass(frozen=True)
class ReplicateRecord:
    rep: int
    ok: bool
    error: str | None = None
    sigma_gamma_sq: float = math.nan
    sigma_sq: float = math.nan
    at_boundary: bool = False
    estimate: np.ndarray = field(default_factory=lambda: np.empty(0))
    truth: np.ndarray = field(default_factory=lambda: np.empty(0))
    mse: np.ndarray = field(default_factory=lambda: np.empty(0))
    stat_h1: float = math.nan
    stat_h2: float = math.nan
    reject_h1: bool = False
    reject_h2: bool = False


def run_replicate(scenario: SimScenario, b: int) -> ReplicateRecord:
    """Fit, predict and test one simulated dataset. Numerical failures are recorded, not raised."""
    data, truth = generate_dataset(scenario, b)
    try:
        design = assemble_design(data, SplineConfig(scenario.p, scenario.K))
        surf = LikelihoodSurface(design)
        reml = estimate_variance_components(design, "reml", surface=surf)
        fit = blup_fit(design, reml.delta_hat)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            preds = predict_areas(design, reml, sample_mean_targets(data, design), fit=fit)
        h1 = test_beta(design, reml, alpha=scenario.alpha)
        ml = estimate_variance_components(design, "ml", surface=surf)
        h2 = lrt_area_effect(design, alpha=scenario.alpha, full=ml)
    except SAEError as exc:
        return ReplicateRecord(rep=b, ok=False, error=exc.code, truth=truth)
    return ReplicateRecord(
        rep=b,
        ok=True,
        sigma_gamma_sq=reml.delta_hat.sigma_gamma_sq,
        sigma_sq=reml.delta_hat.sigma_sq,
        at_boundary=reml.at_boundary,
        estimate=np.array([p.estimate for p in preds]),
        truth=truth,
        mse=np.array([p.mse_total for p in preds]),
        stat_h1=h1.statistic,
        stat_h2=h2.statistic,
        reject_h1=h1.reject,
        reject_h2=h2.reject,
    )


@dataclass(frozen=True)
class SimReport:
    scenario: SimScenario
    smse: np.ndarray
    mean_mse: np.ndarray
    rb: float | None
    cv: float | None
    p1: float
    p2: float
    replicates_used: int
    failures: int
    failure_flag: bool
    lrt_zero_mass: float
    records: tuple = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "sigma_e": self.scenario.sigma_e,
            "metrics": {
                "smse_mean": float(np.mean(self.smse)) if self.smse.size else None,
                "rb": self.rb,
                "cv": self.cv,
                "p1": self.p1,
                "p2": self.p2,
                "lrt_zero_mass": self.lrt_zero_mass,
            },
            "smse": [float(v) for v in self.smse],
            "mean_mse": [float(v) for v in self.mean_mse],
            "replicates_used": self.replicates_used,
            "failures": self.failures,
            "failure_flag": self.failure_flag,
        }


def summarize(scenario: SimScenario, records) -> SimReport:
    """Aggregate replicate records (in replicate order) into study metrics.

    ``SMSE_i`` is the mean squared deviation of the estimate from the truth;
    ``RB`` and ``CV`` average over areas the relative bias and relative root
    mean squared error of the MSE estimator against ``SMSE_i``.
    """
    records = sorted(records, key=lambda r: r.rep)
    good = [r for r in records if r.ok]
    failures = len(records) - len(good)
    if not good:
        raise SAEError("study-failed", f"all {len(records)} replicates failed")
    err = np.vstack([r.estimate - r.truth for r in good])
    mse = np.vstack([r.mse for r in good])
    smse = np.mean(err**2, axis=0)
    mean_mse = np.mean(mse, axis=0)
    if len(good) < 2:
        warnings.warn("fewer than two successful replicates: RB and CV are undefined", stacklevel=2)
        rb = cv = None
    else:
        rb = float(np.mean((mean_mse - smse) / smse))
        cv = float(np.mean(np.sqrt(np.mean((mse - smse) ** 2, axis=0)) / smse))
    p1 = float(np.mean([r.reject_h1 for r in good]))
    p2 = float(np.mean([r.reject_h2 for r in good]))
    zero_mass = float(np.mean([r.stat_h2 == 0.0 for r in good]))
    flag = failures > FAILURE_FLAG_RATE * len(records)
    if flag:
        warnings.warn(f"{failures} of {len(records)} replicates failed", stacklevel=2)
    return SimReport(
        scenario=scenario,
        smse=smse,
        mean_mse=mean_mse,
        rb=rb,
        cv=cv,
        p1=p1,
        p2=p2,
        replicates_used=len(good),
        failures=failures,
        failure_flag=flag,
        lrt_zero_mass=zero_mass,
        records=tuple(records),
    )


def _worker_count(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("SAE_MAX_THREADS")
        workers = int(env) if env else 1
    return max(1, min(int(workers), os.cpu_count() or 1))


def _run_chunk(args):
    scenario, reps = args
    return [run_replicate(scenario, b) for b in reps]


def run_study(scenario: SimScenario, workers: int | None = None) -> SimReport:
    """Run all ``B`` replicates and summarize.

    ``workers`` defaults to ``$SAE_MAX_THREADS`` (or 1). Output is identical for
    any worker count.
    """
    n_workers = _worker_count(workers)
    reps = list(range(scenario.B))
    if n_workers == 1:
        records = [run_replicate(scenario, b) for b in reps]
    else:
        chunks = [(scenario, reps[i::n_workers]) for i in range(n_workers)]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            records = [r for chunk in pool.map(_run_chunk, chunks) for r in chunk]
    return summarize(scenario, records)
