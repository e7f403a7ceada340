import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfgmm import ActionSet, best_response, exploitability, load_builtin, simplex_grid, solve_equilibrium, solve_master
from mfgmm.equilibrium import changed_fraction
from mfgmm.exceptions import BadParameter, ModelError, NonConvergenceWarning
from mfgmm.model import states_consistent
from mfgmm.policies import CallablePolicy, ConstantPolicy, TablePolicy, default_policies


def _singleton(model):
    return model.replace(A0=ActionSet([model.A0.points[0, 0]]), A=ActionSet([model.A.points[0, 0]]))


@pytest.fixture(scope="module")
def eq_short(two_two_short):
    return solve_equilibrium(two_two_short, 16, damping=0.5, tol=0.0, max_iter=50)


# -- best response -------------------------------------------------------------------


def test_best_response_decoupled_ignores_opponent(decoupled):
    p0, p = default_policies(decoupled)
    other = ConstantPolicy.for_model(decoupled, "minor", 2)
    a = best_response(decoupled, p0, p, 5, 200)
    b = best_response(decoupled, ConstantPolicy.for_model(decoupled, "major", 1), other, 5, 200)
    assert np.array_equal(a.phi0.table, b.phi0.table)
    assert np.array_equal(a.phi.table, b.phi.table)


def test_best_response_singleton_is_fixed(two_two):
    m = _singleton(two_two)
    p0, p = best_response(m, *default_policies(m), 4, 50)
    assert np.all(p0.table == 0) and np.all(p.table == 0)


def test_best_response_contracts_at_small_horizon(two_two_short):
    g = simplex_grid(2, 8)
    steps = 100
    times = np.linspace(0, two_two_short.T, steps + 1)
    valid = states_consistent(g)[:, None, :]
    p0, p = default_policies(two_two_short)
    first = best_response(two_two_short, p0, p, 8, steps)
    second = best_response(two_two_short, first.phi0, first.phi, 8, steps)

    def knots(pol, role):
        b = pol.bind(times, g)
        return np.stack([b.at_knot(k) for k in range(len(times))])

    c1 = changed_fraction(knots(p0, "major"), knots(p, "minor"), first.phi0.table, first.phi.table, valid)
    c2 = changed_fraction(first.phi0.table, first.phi.table, second.phi0.table, second.phi.table, valid)
    assert c2 < c1


def test_best_response_threads_identical(two_two):
    pols = default_policies(two_two)
    a = best_response(two_two, *pols, 6, 80, threads=1)
    b = best_response(two_two, *pols, 6, 80, threads=2)
    assert np.array_equal(a.phi0.table, b.phi0.table) and np.array_equal(a.V.values, b.V.values)


def test_best_response_requires_free_major_action(two_two):
    with pytest.raises(ModelError):
        best_response(two_two.replace(alpha0_free=False), *default_policies(two_two), 4)


# -- exploitability -------------------------------------------------------------------


def test_exploitability_zero_at_best_response(two_two):
    pols = default_policies(two_two)
    br = best_response(two_two, *pols, 6, 100)
    e0, _ = exploitability(two_two, br.phi0, pols[1], 6, 100)
    assert e0 == 0.0


def test_exploitability_singleton(two_two):
    m = _singleton(two_two)
    assert exploitability(m, *default_policies(m), 4, 50) == (0.0, 0.0)


def test_exploitability_wrong_policy_larger(two_two_short, eq_short):
    wrong = ConstantPolicy.for_model(two_two_short, "minor", 1)
    steps = eq_short.info["time_steps"]
    _, bad = exploitability(two_two_short, eq_short.phi0, wrong, 16, steps)
    assert bad > eq_short.exploitability[1]


@settings(max_examples=12)
@given(st.integers(0, 2**32 - 1))
def test_exploitability_nonnegative(seed):
    m = load_builtin("two_two").with_horizon(0.5)
    rng = np.random.default_rng(seed)
    g = simplex_grid(2, 5)
    p0 = TablePolicy("major", m.A0, g, rng.integers(0, 2, (2, g.size)), 2, 2)
    p = TablePolicy("minor", m.A, g, rng.integers(0, 2, (2, 2, g.size)), 2, 2)
    e0, e = exploitability(m, p0, p, 5, 60)
    assert e0 >= -1e-9 and e >= -1e-9


# -- fixed-point iteration ------------------------------------------------------------


def test_equilibrium_singleton_one_iteration(two_two):
    res = solve_equilibrium(_singleton(two_two), 4, 50)
    assert res.converged and res.iterations == 1 and res.final_residual == 0.0
    assert res.exploitability == (0.0, 0.0)


def test_equilibrium_decoupled(decoupled, frozen):
    res = solve_equilibrium(decoupled, 6, 400)
    assert res.converged and res.iterations <= 2
    ref = frozen["decoupled_hjb"]
    assert np.max(np.abs(res.V0.initial - np.array(ref["major"][0])[:, None])) <= 1e-9
    assert np.all(res.phi0.table[0] == np.array(ref["major_actions"][0])[:, None])


def test_equilibrium_small_horizon(eq_short, frozen):
    assert eq_short.converged and eq_short.iterations <= 50
    assert max(eq_short.exploitability) <= 1e-3
    base = frozen["baselines"]["equilibrium_T025_K16"]
    assert eq_short.iterations == base["iterations"]
    assert np.allclose(eq_short.exploitability, base["exploitability"], atol=1e-12)


def test_equilibrium_is_exact_fixed_point(two_two_short, eq_short):
    steps = eq_short.info["time_steps"]
    br = best_response(two_two_short, eq_short.phi0, eq_short.phi, 16, steps)
    assert np.array_equal(br.phi0.table, eq_short.phi0.table)
    assert np.array_equal(br.phi.table, eq_short.phi.table)
    e0, e = exploitability(two_two_short, eq_short.phi0, eq_short.phi, 16, steps)
    assert e0 <= 1e-9 and e <= 1e-9


def test_equilibrium_history_layout(eq_short):
    h = eq_short.residual_history
    assert h.shape == (eq_short.iterations + 1, 4)
    assert np.isnan(h[0, 1]) and np.array_equal(h[:, 0], np.arange(len(h)))
    assert h[-1, 1] == 0.0
    assert np.all(h[1:, 1] >= 0)


def test_equilibrium_converged_bound(two_two_short):
    tol = 0.01
    res = solve_equilibrium(two_two_short, 8, tol=tol)
    assert res.converged and res.final_residual <= tol
    # info["bound"] is |g|_inf + T |f|_inf for each role
    bound = 1 + max(res.V0.info["bound"], res.V.info["bound"])
    assert max(res.exploitability) <= 10 * tol * bound


def test_equilibrium_agrees_with_master(two_two_short, eq_short):
    sol = solve_master(two_two_short, 16, eq_short.info["time_steps"])
    valid = np.broadcast_to(states_consistent(sol.phi.grid)[:, None, :], sol.phi.table.shape[1:])
    agree = np.count_nonzero(sol.phi0.table == eq_short.phi0.table) + np.count_nonzero((sol.phi.table == eq_short.phi.table)[:, valid])
    total = sol.phi0.table.size + np.count_nonzero(valid) * sol.phi.table.shape[0]
    assert agree / total >= 0.99


def test_master_policies_reproduce_under_best_response(two_two_short):
    sol = solve_master(two_two_short, 8)
    br = best_response(two_two_short, sol.phi0, sol.phi, 8, sol.info["time_steps"])
    assert np.array_equal(br.phi0.table, sol.phi0.table)
    valid = np.broadcast_to(states_consistent(sol.phi.grid)[:, None, :], sol.phi.table.shape[1:])
    assert np.array_equal(br.phi.table[:, valid], sol.phi.table[:, valid])


def test_equilibrium_max_iter_zero(two_two_short):
    with pytest.warns(NonConvergenceWarning):
        res = solve_equilibrium(two_two_short, 4, max_iter=0)
    assert not res.converged and res.iterations == 0
    assert res.residual_history.shape == (1, 4) and np.isnan(res.final_residual)


def test_equilibrium_nonconvergence_returns_best(two_two):
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        res = solve_equilibrium(two_two, 6, max_iter=3)
    h = res.residual_history
    assert not res.converged and res.iterations == 3
    assert any(issubclass(w.category, NonConvergenceWarning) for w in rec)
    assert max(res.exploitability) == np.min(np.max(h[:, 2:], axis=1))


def test_equilibrium_init_and_bad_damping(two_two_short):
    init = (ConstantPolicy.for_model(two_two_short, "major", 1), CallablePolicy.for_model(two_two_short, "minor", lambda t, i, i0, x: 0))
    res = solve_equilibrium(two_two_short, 4, init=init, max_iter=20)
    assert res.converged
    with pytest.raises(BadParameter):
        solve_equilibrium(two_two_short, 4, damping=0.0)
    with pytest.raises(BadParameter):
        solve_equilibrium(two_two_short, 4, tol=-1.0)
