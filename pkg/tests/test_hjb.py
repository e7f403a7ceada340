import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import INTEGRATION_TOL, constant_model
from mfgmm import ActionSet, dpp_check, hamiltonian_min, load_builtin, simplex_grid, solve_hjb, solve_master
from mfgmm.exceptions import BadParameter, ModelError, NoActions
from mfgmm.hjb import extract_policy, hamiltonian_table
from mfgmm.policies import ConstantPolicy, default_policies


def _zero_costs(model):
    z = lambda *a: 0.0 * np.ones(np.asarray(a[-1]).shape[:-1])
    return model.replace(f0=z, f=z, g0=z, g=z)


def _bracket_by_hand(model, role, t, states, r, values, grid, c):
    """Hamiltonian bracket at one grid index, from integer counts."""
    K = grid.K
    counts = [int(v) for v in grid.full_counts[r]]
    x = grid.points[r][None, :]
    if role == "major":
        (i0,) = states
        a0 = model.A0[c]
        h = float(np.ravel(model.f0(t, i0, a0, x))[0])
        for j0 in range(model.M0):
            if j0 != i0:
                h += (values[j0, r] - values[i0, r]) * float(np.ravel(model.q0(t, i0, j0, a0, x))[0])
        return h
    i, i0 = states
    a = model.A[c]
    h = float(np.ravel(model.f(t, i, a, i0, model.A0[0], x))[0])
    for j in range(model.M):
        if j == i:
            continue
        if counts[i] >= 1:
            moved = list(counts)
            moved[i] -= 1
            moved[j] += 1
            rr = int(grid.rank(np.array(moved[:-1])))
        else:
            rr = r
        h += (values[j, i0, rr] - values[i, i0, r]) * float(np.ravel(model.q(t, i, j, a, i0, model.A0[0], x))[0])
    return h


# -- Hamiltonian ---------------------------------------------------------------------


def test_hamiltonian_singleton(two_two):
    m = two_two.replace(A0=ActionSet([0.7]))
    g = simplex_grid(2, 4)
    vals = np.random.default_rng(0).normal(size=(2, g.size))
    idx, act, val = hamiltonian_min(m, "major", 0.2, (1,), g.points[3], vals)
    assert idx == 0 and act.tolist() == [0.7]
    assert val == pytest.approx(_bracket_by_hand(m, "major", 0.2, (1,), 3, vals, g, 0), abs=1e-14)


def test_hamiltonian_dominance():
    f0 = lambda t, i0, a0, x: 0.5 * a0[0] * np.ones(np.asarray(x).shape[:-1])
    m = constant_model(q0=[[0, 1.0], [2.0, 0]], f0=f0, A0=(0.0, 1.0))
    g = simplex_grid(2, 3)
    vals = np.random.default_rng(1).normal(size=(2, g.size))
    idx, _, _ = hamiltonian_min(m, "major", 0.0, (0,), g.points, vals)
    assert np.all(idx == 0)


def test_hamiltonian_empty_actions(two_two):
    class Empty:
        def __len__(self):
            return 0

    with pytest.raises(NoActions):
        hamiltonian_min(two_two.replace(A0=Empty()), "major", 0.0, (0,), [0.5], np.zeros((2, 3)))


@settings(max_examples=30)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["major", "minor"]))
def test_hamiltonian_matches_hand_bracket(seed, role):
    m = load_builtin("two_two")
    rng = np.random.default_rng(seed)
    g = simplex_grid(2, 6)
    r = int(rng.integers(0, g.size))
    t = float(rng.uniform(0, m.T))
    if role == "major":
        vals = rng.normal(size=(2, g.size))
        states = (int(rng.integers(0, 2)),)
        acts = m.A0
    else:
        vals = rng.normal(size=(2, 2, g.size))
        states = (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
        acts = m.A
    idx, _, val = hamiltonian_min(m, role, t, states, g.points[r], vals)
    hand = [_bracket_by_hand(m, role, t, states, r, vals, g, c) for c in range(len(acts))]
    assert val == pytest.approx(min(hand), abs=1e-12)
    assert hand[idx] <= min(hand) + 1e-12
    assert idx == int(np.argmin(hand)) or abs(hand[idx] - min(hand)) <= 1e-12


def test_hamiltonian_table_consistent_with_pointwise(cyber4):
    g = simplex_grid(cyber4.M, 3)
    vals = np.random.default_rng(2).normal(size=(cyber4.M, cyber4.M0, g.size))
    H, arg, low = hamiltonian_table(cyber4, "minor", 0.4, vals, g)
    for r in (0, 5, g.size - 1):
        idx, _, val = hamiltonian_min(cyber4, "minor", 0.4, (2, 1), g.points[r], vals)
        assert arg[2, 1, r] == idx and low[2, 1, r] == val


# -- solve_hjb -------------------------------------------------------------------------


def test_solve_hjb_zero_costs(two_two):
    m = _zero_costs(two_two)
    V, pol = solve_hjb(m, "major", default_policies(m)[1], 4)
    assert np.all(V.values == 0) and np.all(pol.table == 0)
    V, pol = solve_hjb(m, "minor", default_policies(m), 4)
    assert np.all(V.values == 0) and np.all(pol.table == 0)


def test_solve_hjb_terminal_slice(cyber4):
    V, _ = solve_hjb(cyber4, "minor", default_policies(cyber4), 3, 60)
    pts = V.grid.points
    for i in range(cyber4.M):
        for i0 in range(cyber4.M0):
            assert np.array_equal(V.final[i, i0], np.asarray(cyber4.g(i, i0, pts), dtype=float))


def test_solve_hjb_decoupled_matches_chain(decoupled, frozen):
    ref = frozen["decoupled_hjb"]
    V0, p0 = solve_hjb(decoupled, "major", default_policies(decoupled)[1], 6, 400)
    V, p = solve_hjb(decoupled, "minor", default_policies(decoupled), 6, 400)
    for k, t in enumerate(ref["times"]):
        v0 = V0.at(t)
        assert np.max(np.abs(v0 - np.array(ref["major"][k])[:, None])) <= 1e-9
        assert np.all(p0.at_time(t) == np.array(ref["major_actions"][k])[:, None])
        v = V.at(t)
        mask = V.valid_mask()
        want = np.broadcast_to(np.array(ref["minor"][k])[:, None, None], v.shape)
        assert np.max(np.abs(v - want)[mask]) <= 1e-9
        acts = np.broadcast_to(np.array(ref["minor_actions"][k])[:, None, None], v.shape)
        assert np.all(p.at_time(t)[mask] == acts[mask])


def test_solve_hjb_refinement_is_cauchy(two_two):
    phi = default_policies(two_two)[1]
    coarse = simplex_grid(2, 16).points
    sols = {K: solve_hjb(two_two, "major", phi, K)[0] for K in (16, 32, 64)}

    def at(K):
        return np.array([[sols[K].value(0.0, (i0,), x) for x in coarse] for i0 in range(2)])

    assert np.max(np.abs(at(16) - at(32))) > np.max(np.abs(at(32) - at(64)))


def test_solve_hjb_requires_free_minor(two_two):
    m = two_two.replace(alpha0_free=False)
    with pytest.raises(ModelError):
        solve_hjb(m, "minor", default_policies(m), 4)
    with pytest.raises(BadParameter):
        solve_hjb(two_two, "major", default_policies(two_two)[1], 1)


@pytest.mark.parametrize("name", ["two_two", "cyber4", "decoupled"])
def test_solve_hjb_bounds(name):
    m = load_builtin(name)
    for role, pols in (("major", default_policies(m)[1]), ("minor", default_policies(m))):
        V, _ = solve_hjb(m, role, pols, 4)
        assert np.max(np.abs(V.values)) <= V.info["bound"] * (1 + 1e-12)


def test_solve_hjb_monotone_in_terminal_cost(two_two):
    up0 = two_two.replace(g0=lambda i0, x, g=two_two.g0: g(i0, x) + 0.3 * i0)
    up = two_two.replace(g=lambda i, i0, x, g=two_two.g: g(i, i0, x) + 0.2)
    phi0, phi = default_policies(two_two)
    base0, _ = solve_hjb(two_two, "major", phi, 8)
    base, _ = solve_hjb(two_two, "minor", (phi0, phi), 8)
    assert np.all(solve_hjb(up0, "major", phi, 8)[0].values - base0.values >= -1e-12)
    assert np.all(solve_hjb(up, "minor", (phi0, phi), 8)[0].values - base.values >= -1e-12)


def test_extract_policy_reproduces_solver_argmins(two_two):
    phi = default_policies(two_two)[1]
    V, pol = solve_hjb(two_two, "major", phi, 8, 100)
    tab = ConstantPolicy.for_model(two_two, "minor").evaluate(0.0, V.grid.points)
    again = extract_policy(two_two, "major", V.grid, V.times, V.values, phi_table=np.broadcast_to(tab, (len(V.times),) + tab.shape))
    assert np.array_equal(again.table, pol.table)


# -- master ----------------------------------------------------------------------------


def test_master_zero_costs(two_two):
    sol = solve_master(_zero_costs(two_two), 4)
    assert np.all(sol.V0.values == 0) and np.all(sol.V.values == 0)
    assert np.all(sol.phi0.table == 0) and np.all(sol.phi.table == 0)


def test_master_decoupled_matches_chain(decoupled, frozen):
    ref = frozen["decoupled_hjb"]
    sol = solve_master(decoupled, 6, 400)
    assert sol.info["consistent"]
    v0 = sol.V0.at(0.0)
    assert np.max(np.abs(v0 - np.array(ref["major"][0])[:, None])) <= 1e-9
    mask = sol.V.valid_mask()
    want = np.broadcast_to(np.array(ref["minor"][0])[:, None, None], mask.shape)
    assert np.max(np.abs(sol.V.at(0.0) - want)[mask]) <= 1e-9


def test_master_self_consistent(two_two_short):
    sol = solve_master(two_two_short, 8)
    assert sol.info["consistent"] and sol.info["tie_mismatches"] == 0


def test_master_values_reproduced_by_hjb(two_two_short):
    sol = solve_master(two_two_short, 8)
    steps = sol.info["time_steps"]
    V0, _ = solve_hjb(two_two_short, "major", sol.phi, 8, steps)
    V, _ = solve_hjb(two_two_short, "minor", (sol.phi0, sol.phi), 8, steps)
    assert np.max(np.abs(V0.values - sol.V0.values)) <= 5 * INTEGRATION_TOL
    mask = V.valid_mask()
    assert np.max(np.abs(V.values - sol.V.values)[:, mask]) <= 5 * INTEGRATION_TOL


# -- dynamic programming ---------------------------------------------------------------


def test_dpp_trivial_at_horizon(two_two):
    assert dpp_check(two_two, "major", default_policies(two_two)[1], 4, 0.3, two_two.T) == 0.0


def test_dpp_defect_small(two_two):
    phi = default_policies(two_two)[1]
    assert dpp_check(two_two, "major", phi, 8, 0.3, 0.7, 400) <= 1e-8
    assert dpp_check(two_two, "minor", default_policies(two_two), 8, 0.3, 0.7, 400) <= 1e-8


def test_dpp_split_invariance(two_two):
    phi = default_policies(two_two)[1]
    one = dpp_check(two_two, "major", phi, 8, 0.2, 0.6, 400)
    two = max(dpp_check(two_two, "major", phi, 8, 0.2, 0.4, 400), dpp_check(two_two, "major", phi, 8, 0.4, 0.6, 400))
    assert abs(one - two) <= 10 * INTEGRATION_TOL


def test_dpp_rejects_bad_interval(two_two):
    with pytest.raises(BadParameter):
        dpp_check(two_two, "major", default_policies(two_two)[1], 4, 0.6, 0.3)
