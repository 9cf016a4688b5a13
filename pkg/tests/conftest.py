import numpy as np
import pytest

from shiftalign.synth import ShiftSpec, generate

FD_STEP = 1e-5
FD_TOL = 1e-4

ACCEPTANCE_LINES = []


def numeric_grad(fn, params, h=FD_STEP):
    """Central differences of a scalar ``fn(params)`` w.r.t. every entry of every array."""
    grads = {}
    for name, value in params.items():
        g = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = fn(params)
            flat[i] = old - h
            down = fn(params)
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads[name] = g
    return grads


def rel_error(analytic: dict, numeric: dict) -> float:
    a = np.concatenate([np.ravel(analytic[k]) for k in sorted(numeric)])
    n = np.concatenate([np.ravel(numeric[k]) for k in sorted(numeric)])
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-10))


def gaussian_pair(target_prior=(0.5, 0.5), seed=0, sep=1.5, n=2000, transforms=None):
    spec = ShiftSpec(means=[[-sep, 0.0], [sep, 0.0]], covs=[np.eye(2)] * 2,
                     source_prior=[0.5, 0.5], target_prior=list(target_prior),
                     transforms=transforms, n_source=n, n_target=n, seed=seed)
    return generate(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
