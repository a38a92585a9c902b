from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

from asyncfl.objective import Dataset, load_libsvm

DATA_DIR = Path(__file__).parent / "data"
BREAST_CANCER = DATA_DIR / "breast_cancer.libsvm"


def synthetic_dataset(n: int, dim: int, seed: int, density: float = 1.0) -> Dataset:
    """Logistic data drawn from a fixed ground-truth model."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, dim))
    if density < 1.0:
        X *= rng.random((n, dim)) < density
    w_true = rng.normal(size=dim)
    prob = 1.0 / (1.0 + np.exp(-(X @ w_true)))
    y = (rng.random(n) < prob).astype(int)
    return Dataset.from_dense(X, y)


@pytest.fixture(scope="session")
def breast_cancer() -> Dataset:
    return load_libsvm(BREAST_CANCER)


@pytest.fixture
def small_dataset() -> Dataset:
    return synthetic_dataset(200, 6, seed=11)


def sim_config(clients, *, K=2000, a=5.0, b=10.0, latency=None, gate="round-lag", d=1,
               delay=None, seed=0, dp=None, step=None, lam=None, test=None, **kw):
    """Linear-schedule simulation with an affine delay large enough for d = 1."""
    from asyncfl.objective import Objective
    from asyncfl.schedules import DelayFunction, SampleSchedule, StepSchedule
    from asyncfl.simulator import LatencyLaw, NetworkModel, SimConfig

    N = sum(ds.size for ds in clients)
    net = NetworkModel(up=latency or LatencyLaw(), down=latency or LatencyLaw())
    return SimConfig(
        clients=list(clients),
        objective=Objective(lam=1.0 / N if lam is None else lam),
        step=step or StepSchedule(kind="iteration-diminishing", eta0=0.1, beta=0.001),
        delay=delay or DelayFunction(kind="affine", M1=40.0, slope=0.5),
        K=K, sample_schedule=SampleSchedule(kind="linear", a=a, b=b),
        test=test, gate=gate, d=d, dp=dp, network=net, seed=seed, **kw)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
