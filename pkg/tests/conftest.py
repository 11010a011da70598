import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ivsubdist.data import from_arrays  # noqa: E402
from ivsubdist.simulation import SimScenario, generate_replicate  # noqa: E402


def random_dataset(seed, n=40, p=1, ties=False, censor=True, competing=True):
    """Small mixed dataset; ``ties`` draws integer times."""
    rng = np.random.default_rng(seed)
    if ties:
        time = rng.integers(1, max(3, n // 3), size=n).astype(float)
    else:
        time = rng.exponential(size=n)
    causes = [1, 2] if competing else [1]
    status = rng.choice(causes + ([0] if censor else []), size=n)
    status[0] = 1
    x_i = rng.integers(0, 2, size=n).astype(float)
    x_o = rng.standard_normal((n, p))
    x_e = 0.8 * x_i + rng.standard_normal(n) + (x_o.sum(axis=1) if p else 0)
    return from_arrays(time, status, x_e, x_i, x_o)


@pytest.fixture
def small_data():
    return random_dataset(7, n=30, p=1)


@pytest.fixture(scope="session")
def sim_data():
    scenario = SimScenario(n=400, reps=1, seed=11)
    data, _ = generate_replicate(scenario, 0, rate=0.5)
    return data


def registry_like(seed=0, n=994):
    """Binary exposure and instrument with three covariates, in the shape of a registry extract."""
    rng = np.random.default_rng(seed)
    x_i = rng.integers(0, 2, size=n).astype(float)
    x_o = np.column_stack([rng.standard_normal(n), rng.integers(0, 2, n), rng.uniform(20, 70, n)])
    x_e = (rng.random(n) < 0.15 + 0.5 * x_i).astype(float)
    hazard = 0.4 + 0.25 * x_e + 0.05 * (x_o[:, 1])
    time = rng.exponential(1 / hazard)
    cause = np.where(rng.random(n) < 0.55, 1, 2)
    cens = rng.exponential(4.0, size=n)
    status = np.where(time <= cens, cause, 0)
    return from_arrays(np.minimum(time, cens), status, x_e, x_i, x_o,
                       covariate_names=("score", "sex", "age"))


ACCEPTANCE = []


def record_criterion(label, passed, detail):
    line = f"{label}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
