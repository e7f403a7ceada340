import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import constant_model
from mfgmm import flow, load_builtin, mc_cost, oracle_expected_cost, simulate_pdmp, solve_hjb, vector_field
from mfgmm.exceptions import FlowLeftSimplex
from mfgmm.policies import default_policies


def _linear(a, b, T=1.0, **kw):
    return constant_model(q=[[0, a], [b, 0]], T=T, **kw)


# -- vector field --------------------------------------------------------------------


@given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 1))
def test_vector_field_linear(a, b, x):
    m = _linear(a, b, rate_bound=max(a, b, 1.0))
    v = vector_field(m, *default_policies(m), 0.0, 0, [x])
    assert v[0] == pytest.approx(-a * x + b * (1 - x), abs=1e-12)


def test_vector_field_batch_matches_single(cyber4):
    pols = default_policies(cyber4)
    xs = np.array([[0.1, 0.2, 0.3], [0.0, 0.0, 1.0], [0.25, 0.25, 0.25]])
    batch = vector_field(cyber4, *pols, 0.3, 1, xs)
    for k in range(3):
        assert np.allclose(batch[k], vector_field(cyber4, *pols, 0.3, 1, xs[k]), atol=1e-15)


@pytest.mark.parametrize("name", ["two_two", "cyber4", "decoupled"])
def test_vector_field_points_inward_at_faces(name):
    m = load_builtin(name)
    pols = default_policies(m)
    d = m.M - 1
    verts = np.vstack([np.zeros(d), np.eye(d)])
    for i0 in range(m.M0):
        v = vector_field(m, *pols, 0.0, i0, verts)
        # a zero coordinate never decreases; at the vertices e_k the implied last one never decreases
        assert np.all(v[verts == 0] >= -1e-12)
        assert np.all(v[1:].sum(axis=1) <= 1e-12)


# -- flow ---------------------------------------------------------------------------


def test_flow_constant_when_field_zero():
    m = _linear(0.0, 0.0)
    path = flow(m, *default_policies(m), 0, [0.3], 0.0, 1.0, 0.1)
    assert np.all(path.points == 0.3)


def test_flow_closed_form():
    m = _linear(1.0, 1.0)
    path = flow(m, *default_policies(m), 0, [0.0], 0.0, 1.0, 1e-3)
    want = (1 - np.exp(-2 * path.times)) / 2
    assert np.max(np.abs(path.points[:, 0] - want)) <= 1e-8


def test_flow_reversible(cyber4):
    pols = default_policies(cyber4)
    x0 = np.array([0.2, 0.3, 0.1])
    fwd = flow(cyber4, *pols, 1, x0, 0.0, 0.8, 1e-2)
    back = flow(cyber4, *pols, 1, fwd.final, 0.8, 0.0, 1e-2)
    assert np.max(np.abs(back.final - x0)) <= 1e-6


def test_flow_rk4_order():
    a, b = 3.0, 2.0
    m = _linear(a, b, rate_bound=3.0)
    exact = b / (a + b) * (1 - math.exp(-(a + b) * 1.0))
    errs = [abs(flow(m, *default_policies(m), 0, [0.0], 0.0, 1.0, h).final[0] - exact) for h in (1e-2, 5e-3, 2.5e-3)]
    orders = [math.log2(errs[k] / errs[k + 1]) for k in range(2)]
    assert min(orders) >= 3.5


def test_flow_leaving_simplex_raises():
    # a positive diagonal rate (broken row sum) pushes mass out through x_1 = 1
    table = {(0, 0): 1.0, (1, 0): 2.0, (1, 1): -2.0}
    m = _linear(0.0, 0.0).replace(
        q=lambda t, i, j, a, i0, a0, x: table.get((i, j), 0.0) * np.ones(np.asarray(x).shape[:-1])
    )
    with pytest.raises(FlowLeftSimplex):
        flow(m, *default_policies(m), 0, [1.0], 0.0, 0.5, 1e-2)


# -- PDMP ---------------------------------------------------------------------------


def test_pdmp_no_major_jumps_follows_flow():
    m = _linear(1.0, 0.5)
    pols = default_policies(m)
    res = simulate_pdmp(m, "pair", pols, (0, [0.9]), 5, 1, step=1e-2, n_output=11, keep_paths=True)
    ref = flow(m, *pols, 0, [0.9], 0.0, 1.0, 1e-2)
    for p in res.paths:
        assert len(p.major_jump_times) == 0
        assert np.max(np.abs(p.measure[:, 0] - ref.points[::10, 0])) < 1e-8


def test_pdmp_deterministic(two_two):
    pols = default_policies(two_two)
    a = simulate_pdmp(two_two, "triple", pols, (0, 1, [0.5]), 200, 9, keep_paths=True)
    b = simulate_pdmp(two_two, "triple", pols, (0, 1, [0.5]), 200, 9, keep_paths=True, threads=4)
    assert np.array_equal(a.costs, b.costs)
    assert all(np.array_equal(p.measure, q.measure) for p, q in zip(a.paths, b.paths))


@pytest.mark.parametrize("name", ["two_two", "cyber4", "decoupled"])
def test_pdmp_measure_stays_in_simplex(name):
    m = load_builtin(name)
    d = m.M - 1
    x0 = np.full(d, 1.0 / m.M)
    res = simulate_pdmp(m, "triple", default_policies(m), (0, 0, x0), 1000, 4, step=0.05, n_output=21, keep_paths=True)
    for p in res.paths:
        assert np.all(p.measure >= -1e-9) and np.all(p.measure.sum(axis=1) <= 1 + 1e-9)
        assert np.all(np.diff(p.major_jump_times) > 0)


def test_mc_cost_trivial():
    m = _linear(1.0, 1.0)
    assert mc_cost(m, "pair", default_policies(m), (0, [0.5]), 50, 0) == (0.0, 0.0)
    m = _linear(1.0, 1.0, f0=0.4, T=1.5)
    mean, se = mc_cost(m, "pair", default_policies(m), (0, [0.5]), 50, 0)
    assert mean == pytest.approx(0.6, abs=1e-12) and se == pytest.approx(0.0, abs=1e-15)


def test_mc_cost_decoupled_matches_chain(decoupled):
    pols = default_policies(decoupled)
    mean, se = mc_cost(decoupled, "triple", pols, (0, 0, [1.0, 0.0]), 20000, 13)
    want = oracle_expected_cost(decoupled, pols, 1, initial=(0, (0,)))[1]
    assert abs(mean - want) <= 4 * se


def test_pair_cost_matches_hjb_value(two_two):
    phi = default_policies(two_two)[1]
    V64, _ = solve_hjb(two_two, "major", phi, 64)
    V128, pol = solve_hjb(two_two, "major", phi, 128)
    # first-order grid error removed by extrapolating the K = 64, 128 values
    limit = 2 * V128.value(0.0, (0,), [0.5]) - V64.value(0.0, (0,), [0.5])
    mean, se = mc_cost(two_two, "pair", (pol, phi), (0, [0.5]), 20000, 3)
    assert abs(mean - limit) <= 4 * se
