import numpy as np
import pytest

from mclrd.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Small enough for finite differences over every parameter."""
    return ModelConfig.desk(d_in=5, d=4, H=2, d_ff=6, T=3, C=3, N_c=3, N_v=3, d_ra=2)


def fd_grad(fn, arr, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. the ndarray ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = fn()
        arr[i] = old - h
        down = fn()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def small_synth(name="mixed", seed=0, **kw):
    """A corpus small enough for sub-second adaptation runs."""
    from mclrd.datagen import generate_synthetic, preset

    base = dict(C=3, T=4, d_in=8, n_source_per_class=8, n_source_test_per_class=6,
                n_target_per_class=8, k=2, seed=seed)
    base.update(kw)
    return generate_synthetic(preset(name, **base))


def small_model(**kw):
    base = dict(d_in=8, d=8, H=2, d_ff=16, T=4, C=3, N_c=3, N_v=3, d_ra=2)
    base.update(kw)
    return ModelConfig.desk(**base)


# acceptance lines collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
