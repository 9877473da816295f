import numpy as np
import pytest

from splinesae.design import DesignMatrices, KnotSet, SplineConfig, assemble_design, Dataset
from splinesae.lmm import VarianceComponents


def f1_design(y=(3.0, 0.0)):
    """Two units, one intercept, one spline column active on unit 1 only."""
    return DesignMatrices(
        Y=np.asarray(y, dtype=float),
        X=np.ones((2, 1)),
        Z=np.zeros((2, 0)),
        W=np.array([[1.0], [0.0]]),
        area_index=np.array([0, 1]),
        areas=("a1", "a2"),
        area_z=np.array([1.0, 0.0]),
        knots=KnotSet((0.0,)),
        config=SplineConfig(1, 1),
    )


def random_design(rng, m=None, max_ni=4, K=None, k=2, p=1):
    """Small random design with one covariate besides the intercept."""
    m = m or int(rng.integers(3, 6))
    K = K or int(rng.integers(1, min(3, m - 1) + 1))
    n_i = rng.integers(1, max_ni + 1, size=m)
    n_i[0] = max(n_i[0], 2)
    z = np.sort(rng.uniform(0, 3, size=m))
    area = np.repeat(np.arange(m), n_i)
    n = area.size
    x = rng.normal(size=(n, k - 1))
    y = rng.normal(size=n) + z[area]
    data = Dataset.from_arrays(area, y, x, z[area], add_intercept=True)
    return data, assemble_design(data, SplineConfig(p, K))


def random_delta(rng):
    return VarianceComponents(*rng.uniform(0.1, 10, size=2))


@pytest.fixture
def f1():
    return f1_design()


@pytest.fixture
def delta11():
    return VarianceComponents(1.0, 1.0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
