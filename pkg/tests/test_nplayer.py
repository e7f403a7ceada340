import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import constant_model
from mfgmm import (
    ActionSet,
    apply_generator,
    discrete_gradient,
    load_builtin,
    oracle_expected_cost,
    simplex_grid,
    simulate_paths,
    solve_cost_ode,
    solve_value_ode,
)
from mfgmm.exceptions import OracleTooLarge, UnstableIntegration
from mfgmm.nplayer import ValueTable, oracle_distribution
from mfgmm.policies import CallablePolicy, ConstantPolicy, TablePolicy, default_policies

LABELS = {"lex": (0, 0), "mixed": (1, 0), "active": (1, 1)}


def _pair(model, b0, b):
    return ConstantPolicy.for_model(model, "major", b0), ConstantPolicy.for_model(model, "minor", b)


def _random_tables(model, N, seed):
    rng = np.random.default_rng(seed)
    g = simplex_grid(model.M, N)
    p0 = TablePolicy("major", model.A0, g, rng.integers(0, len(model.A0), (model.M0, g.size)), model.M0, model.M)
    p = TablePolicy("minor", model.A, g, rng.integers(0, len(model.A), (model.M, model.M0, g.size)), model.M0, model.M)
    return p0, p


# -- generator -----------------------------------------------------------------------


def test_generator_kills_constants(two_two, cyber4):
    for m in (two_two, cyber4):
        pols = default_policies(m)
        g = simplex_grid(m.M, 3)
        assert np.all(apply_generator(m, "major", pols, np.full((m.M0, g.size), 2.5), 0.1, 3) == 0)
        assert np.all(apply_generator(m, "minor", pols, np.full((m.M, m.M0, g.size), -1.0), 0.1, 3) == 0)


def test_generator_single_major_term():
    m = constant_model(q0=[[0, 0.7], [0.3, 0]])
    g = simplex_grid(2, 4)
    F = np.repeat(np.arange(2.0)[:, None], g.size, axis=1)
    out = apply_generator(m, "major", default_policies(m), F, 0.0, 4)
    assert np.allclose(out[0], 0.7) and np.allclose(out[1], -0.3)


@pytest.mark.parametrize("seed", range(4))
def test_generator_matches_dense_product_chain(two_two, seed):
    p0, p = _random_tables(two_two, 2, seed)
    g = simplex_grid(2, 2)
    rng = np.random.default_rng(100 + seed)
    F0 = rng.normal(size=(2, g.size))
    F = rng.normal(size=(2, 2, g.size))
    pbar = _random_tables(two_two, 2, seed + 50)[1]
    got0 = apply_generator(two_two, "major", (p0, p), F0, 0.3, 2)
    want0 = oracles.dense_generator(two_two, "major", p0, p, F0, 2, 0.3)
    assert np.max(np.abs(got0 - want0)) < 1e-13
    got = apply_generator(two_two, "minor", (p0, p, pbar), F, 0.3, 2)
    want = oracles.dense_generator(two_two, "minor", p0, p, F, 2, 0.3, phibar=pbar)
    mask = np.broadcast_to(g.full_counts.T[:, None, :] >= 1, F.shape)
    assert np.max(np.abs(got - want)[mask]) < 1e-13


def test_generator_matches_dense_cyber4(cyber4):
    p0, p = _random_tables(cyber4, 3, 9)
    g = simplex_grid(cyber4.M, 3)
    F = np.random.default_rng(1).normal(size=(cyber4.M, cyber4.M0, g.size))
    got = apply_generator(cyber4, "minor", (p0, p), F, 0.2, 3)
    want = oracles.dense_generator(cyber4, "minor", p0, p, F, 3, 0.2)
    mask = np.broadcast_to(g.full_counts.T[:, None, :] >= 1, F.shape)
    assert np.max(np.abs(got - want)[mask]) < 1e-12


# -- cost ODE ------------------------------------------------------------------------


def test_cost_zero_costs_gives_zero(two_two):
    m = two_two.replace(f0=lambda t, i0, a0, x: 0.0 * np.ones(np.asarray(x).shape[:-1]),
                        g0=lambda i0, x: 0.0 * np.ones(np.asarray(x).shape[:-1]))
    tab = solve_cost_ode(m, "major", default_policies(m), 4, 50)
    assert np.all(tab.values == 0)


def test_cost_constant_running_cost():
    m = constant_model(q0=[[0, 1.0], [2.0, 0]], q=[[0, 0.5], [1.5, 0]], f0=0.8, T=2.0)
    tab = solve_cost_ode(m, "major", default_policies(m), 5, 40)
    for k, t in enumerate(tab.times):
        assert np.allclose(tab.values[k], 0.8 * (2.0 - t), atol=1e-13)


@pytest.mark.parametrize("label", sorted(LABELS))
def test_cost_matches_frozen_product_chain(two_two, frozen, label):
    ref = frozen["two_two_N2_costs"][label]
    pols = _pair(two_two, *LABELS[label])
    major = np.array(ref["major"], dtype=float).reshape(ref["shape_major"])
    minor = np.array([np.nan if v is None else v for v in ref["minor"]]).reshape(ref["shape_minor"])
    J0 = solve_cost_ode(two_two, "major", pols, 2, 400).initial
    J = solve_cost_ode(two_two, "minor", pols, 2, 400).initial
    assert np.max(np.abs(J0 - major)) <= 1e-6
    ok = ~np.isnan(minor)
    assert np.max(np.abs(J[ok] - minor[ok])) <= 1e-6


def test_oracle_agrees_with_frozen_expm(two_two, frozen):
    ref = frozen["two_two_N2_costs"]["mixed"]
    res = oracle_expected_cost(two_two, _pair(two_two, 1, 0), 2)
    major = np.array(ref["major"]).reshape(ref["shape_major"])
    assert np.max(np.abs(res.major_table() - major)) < 1e-9


def test_frozen_product_chain_reproducible(two_two, frozen):
    p0, p = _pair(two_two, 1, 1)
    states, J = oracles.product_chain_costs(two_two, p0, p, 2)
    major, _ = oracles.aggregate(two_two, states, J, 2)
    assert np.allclose(major.ravel(), frozen["two_two_N2_costs"]["active"]["major"], atol=1e-12)


def test_oracle_cap(cyber4):
    with pytest.raises(OracleTooLarge):
        oracle_expected_cost(cyber4, default_policies(cyber4), 6)


def test_oracle_single_player_chain():
    m = constant_model(q0=[[0, 1.0], [0.5, 0]], f0=lambda t, i0, a0, x: float(i0) * np.ones(np.asarray(x).shape[:-1]))
    c = oracle_expected_cost(m, default_policies(m), 1, initial=(0, (0,)))
    v = oracles.chain_hjb(np.array([[[0, 1.0], [0.5, 0]]]), np.array([[0.0, 1.0]]), np.zeros(2), 1.0)[0][0]
    assert c[0] == pytest.approx(v[0], abs=1e-9)


def test_oracle_constant_cost():
    m = constant_model(q0=[[0, 1.0], [0.5, 0]], q=[[0, 2.0], [1.0, 0]], f0=0.3)
    c = oracle_expected_cost(m, default_policies(m), 2, t0=0.25, initial=(1, (0, 1)))
    assert c[0] == pytest.approx(0.3 * 0.75, abs=1e-12)


def test_unstable_integration_detected(two_two):
    with pytest.raises(UnstableIntegration):
        solve_cost_ode(two_two.with_horizon(40.0), "major", default_policies(two_two), 64, 2)


@pytest.mark.parametrize("name", ["two_two", "cyber4", "decoupled"])
@pytest.mark.parametrize("N", [2, 4, 8])
def test_sup_bounds(name, N):
    m = load_builtin(name)
    for role in ("major", "minor"):
        tab = solve_cost_ode(m, role, default_policies(m), N)
        assert tab.info["bound_ok"]
        assert np.max(np.abs(tab.values)) <= tab.info["bound"] * (1 + 1e-12)


def test_semigroup(two_two):
    pols = default_policies(two_two)
    full = solve_cost_ode(two_two, "major", pols, 6, 400)
    tail = solve_cost_ode(two_two, "major", pols, 6, 200, t0=0.5)
    head = solve_cost_ode(two_two, "major", pols, 6, 200, t1=0.5, terminal=tail.initial)
    assert np.max(np.abs(head.initial - full.initial)) < 1e-10


# -- value ODE ------------------------------------------------------------------------


def test_value_single_action_equals_cost(two_two):
    m = two_two.replace(A0=ActionSet([0.0]))
    pols = default_policies(m)
    V, pol = solve_value_ode(m, "major", pols[1], 4, 80)
    J = solve_cost_ode(m, "major", pols, 4, 80)
    assert np.array_equal(V.values, J.values)
    assert np.all(pol.table == 0)


def test_value_dominated_action():
    f0 = lambda t, i0, a0, x: (1.0 + a0[0]) * np.ones(np.asarray(x).shape[:-1])
    m = constant_model(q0=[[0, 1.0], [1.0, 0]], f0=f0, A0=(1.0, 0.0))
    V, pol = solve_value_ode(m, "major", default_policies(m)[1], 3, 50)
    J = solve_cost_ode(m, "major", (ConstantPolicy.for_model(m, "major", 0), default_policies(m)[1]), 3, 50)
    assert np.allclose(V.values, J.values, atol=1e-14)
    assert np.all(pol.table == 0)  # action 0.0 sorts first


def test_value_below_cost_random_policies(two_two):
    rng = np.random.default_rng(3)
    phi = default_policies(two_two)[1]
    V, _ = solve_value_ode(two_two, "major", phi, 2, 400)
    for _ in range(5):
        thr, a = rng.uniform(0, 1), int(rng.integers(0, 2))
        p0 = CallablePolicy.for_model(two_two, "major", lambda t, i0, x, thr=thr, a=a: np.where(x[:, 0] < thr, a, 1 - a))
        J = solve_cost_ode(two_two, "major", (p0, phi), 2, 400)
        assert np.all(V.values <= J.values + 1e-9 * np.maximum(1.0, np.abs(J.values)))


def test_minor_value_below_cost(two_two):
    p0, p = default_policies(two_two)
    V, pol = solve_value_ode(two_two, "minor", (p0, p), 4, 200)
    for b in range(len(two_two.A)):
        J = solve_cost_ode(two_two, "minor", (p0, p, ConstantPolicy.for_model(two_two, "minor", b)), 4, 200)
        mask = V.valid_mask()
        assert np.all(V.values[:, mask] <= J.values[:, mask] + 1e-9)


def test_value_monotone_in_terminal_cost(two_two):
    phi = default_policies(two_two)[1]
    up = two_two.replace(g0=lambda i0, x, g=two_two.g0: g(i0, x) + 1.0)
    V, _ = solve_value_ode(two_two, "major", phi, 4, 100)
    V2, _ = solve_value_ode(up, "major", phi, 4, 100)
    assert np.all(V2.values - V.values >= -1e-12)


# -- discrete gradient ---------------------------------------------------------------


def test_discrete_gradient_examples():
    g = simplex_grid(2, 5)
    const = ValueTable("major", g, np.array([0.0]), np.ones((1, 2, g.size)))
    assert discrete_gradient(const) == 0.0
    lin = ValueTable("major", g, np.array([0.0]), np.broadcast_to(g.points[:, 0], (1, 2, g.size)).copy())
    assert discrete_gradient(lin) == pytest.approx(1.0, abs=1e-12)


def test_discrete_gradient_scaling(two_two):
    pols = default_policies(two_two)
    vals = [discrete_gradient(solve_cost_ode(two_two, "major", pols, N)) for N in (4, 8, 16)]
    assert max(vals) / min(vals) <= 1.5


# -- simulation ----------------------------------------------------------------------


def test_simulation_no_jumps():
    m = constant_model(f0=1.0, T=0.7)
    res = simulate_paths(m, default_policies(m), 5, 50, seed=3)
    assert np.all(res.n_jumps == 0)
    assert np.all(res.costs["major"] == 0.7)


def test_simulation_deterministic(two_two):
    a = simulate_paths(two_two, default_policies(two_two), 4, 300, seed=11)
    b = simulate_paths(two_two, default_policies(two_two), 4, 300, seed=11, threads=4)
    for k in a.costs:
        assert np.array_equal(a.costs[k], b.costs[k])
    assert a.summary["major"] == b.summary["major"]


def test_simulation_paths_consistent(two_two):
    res = simulate_paths(two_two, default_policies(two_two), 3, 20, seed=5, keep_paths=True, x0=[2 / 3])
    for rec in res.paths:
        assert np.all(np.diff(rec.jump_times) > 0)
        assert np.all((rec.jump_times >= 0) & (rec.jump_times <= two_two.T))
        assert np.all(rec.counts.sum(axis=1) == 3)
        assert np.allclose(rec.empirical_measure, rec.counts[:, :-1] / 3)


def test_simulation_matches_ode(two_two):
    pols = _pair(two_two, 1, 0)
    res = simulate_paths(two_two, pols, 2, 20000, seed=21, i0=0, x0=[0.5], i=0)
    tab = solve_cost_ode(two_two, "major", pols, 2, 400)
    g = tab.grid
    want = tab.initial[0, int(g.index_of(np.array([[0.5]]))[0])]
    s = res.summary["major"]
    assert abs(s.mean - want) <= 4 * s.se
    tagged = solve_cost_ode(two_two, "minor", pols, 2, 400).initial[0, 0, int(g.index_of(np.array([[0.5]]))[0])]
    assert abs(res.summary["tagged"].mean - tagged) <= 4 * res.summary["tagged"].se


def test_simulation_occupancy_matches_oracle(two_two):
    pols = _pair(two_two, 0, 1)
    dist = oracle_distribution(two_two, pols, 2, (0, (0, 0)))
    res = simulate_paths(two_two, pols, 2, 20000, seed=2, i0=0, i=0)
    n = len(res.final_major)
    for (i0, counts), p in dist.items():
        hit = (res.final_major == i0) & np.all(res.final_counts == np.array(counts), axis=1)
        freq = hit.mean()
        assert abs(freq - p) <= 4 * np.sqrt(max(p * (1 - p), 1e-12) / n) + 1e-12


@settings(max_examples=15)
@given(st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_simulation_costs_bounded(N, seed):
    m = load_builtin("two_two")
    pols = default_policies(m)
    res = simulate_paths(m, pols, N, 8, seed)
    bound = solve_cost_ode(m, "major", pols, N, 20).info["bound"]
    assert np.all(res.final_counts.sum(axis=1) == N)
    assert np.all(np.abs(res.costs["major"]) <= bound + 1e-9)
