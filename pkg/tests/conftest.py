from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from mfgmm import ActionSet, ModelSpec, load_builtin

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

# RK4 on a fixed grid has no adaptive tolerance; consistency checks use this
# absolute level as the unit of "integration tolerance".
INTEGRATION_TOL = 1e-8


def _ones(x):
    return np.ones(np.asarray(x).shape[:-1])


def constant_model(
    M0=2,
    M=2,
    q0=None,
    q=None,
    f0=0.0,
    f=0.0,
    g0=0.0,
    g=0.0,
    T=1.0,
    A0=(0.0,),
    A=(0.0,),
    rate_bound=None,
    name="const",
):
    """Model with constant (state-dependent) rates and costs.

    ``q0``/``q`` are off-diagonal rate matrices (diagonal ignored); costs are
    scalars or callables of the usual signature.
    """
    Q0 = np.zeros((M0, M0)) if q0 is None else np.array(q0, dtype=float)
    Q = np.zeros((M, M)) if q is None else np.array(q, dtype=float)
    np.fill_diagonal(Q0, 0.0)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q0, -Q0.sum(axis=1))
    np.fill_diagonal(Q, -Q.sum(axis=1))

    def lift(c, nargs):
        if callable(c):
            return c
        return lambda *args: float(c) * _ones(args[-1])

    bound = rate_bound or max(1.0, float(np.abs(Q0).max()), float(np.abs(Q).max()))
    return ModelSpec(
        M0=M0, M=M, T=T, A0=ActionSet(list(A0)), A=ActionSet(list(A)),
        q0=lambda t, i0, j0, a0, x: Q0[i0, j0] * _ones(x),
        q=lambda t, i, j, a, i0, a0, x: Q[i, j] * _ones(x),
        f0=lift(f0, 4), f=lift(f, 6), g0=lift(g0, 2), g=lift(g, 3),
        rate_bound=bound, time_homogeneous=True, name=name,
    )


@pytest.fixture(scope="session")
def two_two():
    return load_builtin("two_two")


@pytest.fixture(scope="session")
def two_two_short():
    return load_builtin("two_two").with_horizon(0.25)


@pytest.fixture(scope="session")
def cyber4():
    return load_builtin("cyber4")


@pytest.fixture(scope="session")
def decoupled():
    return load_builtin("decoupled")


@pytest.fixture(scope="session")
def frozen():
    import oracles

    return oracles.load_frozen()


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
