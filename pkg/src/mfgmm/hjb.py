"""Value functions of the limiting control problems.

The mean-field HJB systems are discretised by the finite-player value ODE with
``N = K``: the ``K``-player value converges uniformly to the mean-field value,
so the discrete system on ``{states} x P^K`` is the numerical scheme.  The
master system integrates both value functions in one backward sweep with the
minimisers refreshed at every RK stage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _ode, _tables
from .exceptions import BadParameter, ConsistencyFailure, ModelError, NoActions
from .model import ModelSpec, SimplexGrid, check_simplex, e_shift, simplex_grid, states_consistent
from .nplayer import ValueGrid, ValueTable, solve_value_ode
from .policies import FeedbackPolicy, index_dtype

__all__ = [
    "ValueGrid",
    "MasterSolution",
    "hamiltonian_min",
    "hamiltonian_table",
    "solve_hjb",
    "extract_policy",
    "solve_master",
    "dpp_check",
]


def _infer_grid(M: int, P: int) -> SimplexGrid:
    K = 0
    while math.comb(K + M - 1, M - 1) < P:
        K += 1
    if math.comb(K + M - 1, M - 1) != P:
        raise ValueError(f"{P} values do not fill a simplex grid with M={M}")
    return simplex_grid(M, K)


def _as_points(grid: SimplexGrid, x) -> tuple[np.ndarray, np.ndarray, bool]:
    x = check_simplex(np.asarray(x, dtype=float))
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    return xb, grid.index_of(xb), single


def _brackets(model, role, t, states, xb, ranks, values, grid, a0, phi_idx):
    """Hamiltonian bracket for every action, evaluated straight from the model.

    Returns ``(|actions|, n)``.  The shifted points are located by coordinates,
    independently of the solver's shift tables.
    """
    K = grid.K
    n = xb.shape[0]
    if role == "major":
        i0 = int(states[0])
        out = np.empty((len(model.A0), n))
        for b, act0 in enumerate(model.A0):
            s = np.zeros(n)
            for j0 in range(model.M0):
                q0 = np.broadcast_to(np.asarray(model.q0(t, i0, j0, act0, xb), dtype=float), (n,))
                s += (values[j0, ranks] - values[i0, ranks]) * q0
            h = np.broadcast_to(np.asarray(model.f0(t, i0, act0, xb), dtype=float), (n,)) + s
            if not model.alpha0_free:
                h = h + _minor_flow_term(model, t, i0, act0, xb, ranks, values, grid, phi_idx)
            out[b] = h
        return out
    i, i0 = int(states[0]), int(states[1])
    act0 = model.A0[0] if model.alpha0_free else model.A0[int(a0)]
    counts = np.rint(xb * K).astype(np.int64)
    nfull = np.concatenate([counts, K - counts.sum(axis=1, keepdims=True)], axis=1)
    occupied = nfull[:, i] >= 1
    out = np.empty((len(model.A), n))
    for c, act in enumerate(model.A):
        s = np.zeros(n)
        for j in range(model.M):
            if j == i:
                continue
            shifted = ranks.copy()
            if np.any(occupied):
                shifted[occupied] = grid.index_of(xb[occupied] + e_shift(i, j, model.M) / K)
            q = np.broadcast_to(np.asarray(model.q(t, i, j, act, i0, act0, xb), dtype=float), (n,))
            s += (values[j, i0, shifted] - values[i, i0, ranks]) * q
        out[c] = np.broadcast_to(np.asarray(model.f(t, i, act, i0, act0, xb), dtype=float), (n,)) + s
    return out


def _minor_flow_term(model, t, i0, act0, xb, ranks, values, grid, phi_idx):
    """Population jumps in the major bracket, needed only when q reads a0."""
    if phi_idx is None:
        raise ValueError("the minor policy is needed when q depends on the major action")
    K = grid.K
    n = xb.shape[0]
    counts = np.rint(xb * K).astype(np.int64)
    nfull = np.concatenate([counts, K - counts.sum(axis=1, keepdims=True)], axis=1)
    s = np.zeros(n)
    for i in range(model.M):
        occ = nfull[:, i] >= 1
        for j in range(model.M):
            if i == j:
                continue
            shifted = ranks.copy()
            if np.any(occ):
                shifted[occ] = grid.index_of(xb[occ] + e_shift(i, j, model.M) / K)
            rate = np.zeros(n)
            for c, act in enumerate(model.A):
                sel = phi_idx[i, i0] == c
                if np.any(sel):
                    rate[sel] = np.broadcast_to(np.asarray(model.q(t, i, j, act, i0, act0, xb[sel]), dtype=float), (int(sel.sum()),))
            s += (values[i0, shifted] - values[i0, ranks]) * nfull[:, i] * rate
    return s


def hamiltonian_min(
    model: ModelSpec,
    role: str,
    t: float,
    states: tuple[int, ...],
    x,
    values: np.ndarray,
    *,
    grid: SimplexGrid | None = None,
    a0: int | None = None,
    phi_idx: np.ndarray | None = None,
):
    """Minimise the Hamiltonian bracket over the role's action set.

    Parameters
    ----------
    role : {"major", "minor"}
    states : ``(i0,)`` for the major role, ``(i, i0)`` for the minor role.
    x : grid point(s) of ``grid``, shape ``(M-1,)`` or ``(n, M-1)``.
    values : ndarray
        Value slice on the grid: ``(M0, P)`` (major) or ``(M, M0, P)`` (minor).
    grid : SimplexGrid, optional
        Inferred from ``values`` when omitted.
    a0 : int, optional
        Major action index; needed for the minor role only when the model
        reads the major action.
    phi_idx : ndarray, optional
        Minor policy indices ``(M, M0, P)``; needed for the major role only
        when the model reads the major action.

    Returns
    -------
    index, action, value
        First minimiser (lexicographic order of the action set), its action
        coordinates and the minimal bracket value.  Scalars for a single
        point, arrays for a batch.

    Examples
    --------
    >>> from mfgmm.builtins import load_builtin
    >>> import numpy as np
    >>> m = load_builtin("two_two")
    >>> idx, act, val = hamiltonian_min(m, "major", 0.0, (0,), [0.5], np.zeros((2, 3)))
    >>> int(idx)
    0
    """
    actions = model.A0 if role == "major" else model.A
    if len(actions) == 0:
        raise NoActions(f"{role} action set is empty")
    values = np.asarray(values, dtype=float)
    if grid is None:
        grid = _infer_grid(model.M, values.shape[-1])
    xb, ranks, single = _as_points(grid, x)
    if phi_idx is not None and phi_idx.ndim == 3:
        phi_idx = phi_idx[..., ranks]
    H = _brackets(model, role, t, states, xb, ranks, values, grid, a0, phi_idx)
    arg = np.argmin(H, axis=0)
    low = H[arg, np.arange(H.shape[1])]
    if single:
        return int(arg[0]), actions[int(arg[0])], float(low[0])
    return arg, actions.points[arg], low


def hamiltonian_table(
    model: ModelSpec, role: str, t: float, values: np.ndarray, grid: SimplexGrid, *, phi0_idx=None, phi_idx=None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise brackets at every index of ``values``.

    Returns ``(H, argmin, min)`` with ``H`` of shape ``(|actions|,) + values.shape``.
    """
    pts = grid.points
    ranks = np.arange(grid.size)
    if role == "major":
        H = np.stack(
            [_brackets(model, "major", t, (i0,), pts, ranks, values, grid, None, phi_idx) for i0 in range(model.M0)],
            axis=1,
        )
    else:
        rows = []
        for i in range(model.M):
            cols = []
            for i0 in range(model.M0):
                if model.alpha0_free:
                    cols.append(_brackets(model, "minor", t, (i, i0), pts, ranks, values, grid, None, None))
                else:
                    per = [
                        _brackets(model, "minor", t, (i, i0), pts[r : r + 1], ranks[r : r + 1], values, grid, phi0_idx[i0, r], None)[:, 0]
                        for r in range(grid.size)
                    ]
                    cols.append(np.stack(per, axis=1))
            rows.append(np.stack(cols, axis=1))
        H = np.stack(rows, axis=1)
    arg = np.argmin(H, axis=0)
    low = np.take_along_axis(H, arg[None], axis=0)[0]
    return H, arg, low


def _require_free(model: ModelSpec, what: str) -> None:
    if not model.alpha0_free:
        raise ModelError(f"{what} requires a model whose minor rates and costs ignore the major action")


def _check_K(K: int) -> int:
    K = int(K)
    if K < 2:
        raise BadParameter(f"grid resolution K must be >= 2, got {K}")
    return K


def solve_hjb(
    model: ModelSpec,
    role: str,
    policies,
    K: int,
    time_steps: int | None = None,
    **kwargs,
) -> tuple[ValueGrid, FeedbackPolicy]:
    """Mean-field value of the major player against ``phi`` or of a minor
    player against ``(phi0, phi)`` on ``P^K``.

    Parameters
    ----------
    policies : Policy or (Policy,) for the major role; (phi0, phi) for the minor role.
    K : int
        Grid resolution, at least 2.

    Returns
    -------
    ValueGrid, FeedbackPolicy
        Values on ``P^K`` and the minimising feedback.  Off-grid values are
        available through :meth:`ValueTable.value`.
    """
    K = _check_K(K)
    if role == "minor":
        _require_free(model, "the minor HJB")
    table, policy = solve_value_ode(model, role, policies, K, time_steps, **kwargs)
    table.info["scheme"] = "finite-player value ODE with N=K"
    return table, policy


def extract_policy(
    model: ModelSpec,
    role: str,
    grid: SimplexGrid,
    times: np.ndarray,
    values: np.ndarray,
    *,
    phi0_table: np.ndarray | None = None,
    phi_table: np.ndarray | None = None,
) -> FeedbackPolicy:
    """Knot-wise minimisers of the Hamiltonian bracket of a value table.

    ``values`` has shape ``(len(times),) + state_shape + (P,)``.
    ``phi0_table`` (major indices per knot) is needed for the minor role
    when the model reads the major action; ``phi_table`` likewise for the
    major role.
    """
    problem = _ode.GridProblem(model, grid)
    actions = model.A0 if role == "major" else model.A
    out = np.empty(values.shape, dtype=index_dtype(len(actions)))
    for k, t in enumerate(times):
        tab = _tables.grid_tables(model, float(t), grid)
        if role == "major":
            if model.alpha0_free:
                H0 = tab.f0 + problem.major_jumps(tab.q0, values[k])
                _, arg, _ = _ode.argmin_with_ties(H0)
            else:
                if phi_table is None:
                    raise ValueError("phi_table required when minor rates read the major action")
                _, arg, _ = _ode.major_rhs(problem, tab, values[k], None, phi_table[k])
        else:
            phi0_idx = None if phi0_table is None else phi0_table[k]
            H, _ = _ode.minor_brackets(problem, tab, values[k], phi0_idx)
            _, arg, _ = _ode.argmin_with_ties(H)
        out[k] = arg
    return FeedbackPolicy(role, actions, grid, np.asarray(times, dtype=float), out)


@dataclass
class MasterSolution:
    """Joint solution of the coupled value system.

    Attributes
    ----------
    V0, V : ValueGrid
        Major and minor value tables on ``P^K``.
    phi0, phi : FeedbackPolicy
        Minimisers at every knot and RK stage of the sweep.
    info : dict
        ``tie_count``, ``time_steps``, ``K`` and the consistency-check outcome.
    """

    V0: ValueGrid
    V: ValueGrid
    phi0: FeedbackPolicy
    phi: FeedbackPolicy
    info: dict = field(default_factory=dict)


def _master_check(model, grid, times, V0, V, phi0, phi) -> dict:
    """Recompute the minimisers of every knot slice from the model callables."""
    valid = states_consistent(grid)[:, None, :]
    worst = 0.0
    changed = 0
    for k, t in enumerate(times):
        for role, vals, stored in (("major", V0[k], phi0[k]), ("minor", V[k], phi[k])):
            H, arg, low = hamiltonian_table(model, role, float(t), vals, grid)
            mask = np.ones(arg.shape, bool) if role == "major" else np.broadcast_to(valid, arg.shape)
            diff = (arg != stored) & mask
            if np.any(diff):
                gap = np.take_along_axis(H, stored[None].astype(np.intp), axis=0)[0] - low
                g = float(np.max(gap[diff]))
                worst = max(worst, g)
                changed += int(np.count_nonzero(diff))
                if g > _ode.TIE_TOL:
                    raise ConsistencyFailure(
                        f"{role} minimiser at knot {k} (t={t:.6g}) differs from the stored policy by {g:.3g}"
                    )
    return {"consistent": True, "tie_mismatches": changed, "max_tie_gap": worst}


def solve_master(model: ModelSpec, K: int, time_steps: int | None = None, *, check: bool = True) -> MasterSolution:
    """Backward sweep of the coupled major/minor value system on ``P^K``.

    At every RK stage the minor minimiser is taken from the current minor
    values, the major minimiser from the current major values, and both
    generators are applied with these minimisers.  With ``check`` the
    minimisers of the final knot tables are recomputed pointwise from the
    model callables and must reproduce the stored policies (up to ties within
    1e-12).

    Raises
    ------
    UnstableIntegration, ConsistencyFailure
    """
    _require_free(model, "the master system")
    K = _check_K(K)
    grid = simplex_grid(model.M, K)
    problem = _ode.GridProblem(model, grid)
    steps = _ode.default_steps(model, K, model.T) if time_steps is None else int(time_steps)
    if steps < 1:
        raise BadParameter("time_steps must be >= 1")
    times = _ode.time_grid(0.0, model.T, steps)
    g0, g = _tables.grid_terminal(model, grid)
    M0, M, P = model.M0, model.M, grid.size
    n0 = M0 * P
    rec0 = _ode.StageRecord(steps, (M0, P), len(model.A0))
    rec = _ode.StageRecord(steps, (M, M0, P), len(model.A))
    sup = {"f0": 0.0, "f": 0.0}
    seen: set[int] = set()

    def tables(t):
        tab = _tables.grid_tables(model, t, grid)
        if id(tab) not in seen:
            seen.add(id(tab))
            sup["f0"] = max(sup["f0"], float(np.max(np.abs(tab.f0), initial=0.0)))
            sup["f"] = max(sup["f"], float(np.max(np.abs(tab.f), initial=0.0)))
        return tab

    def bounds():
        T = float(times[-1] - times[0])
        return (
            float(np.max(np.abs(g0), initial=0.0)) + T * sup["f0"],
            float(np.max(np.abs(g), initial=0.0)) + T * sup["f"],
        )

    def rhs(n, s, t, y):
        tab = tables(t)
        th0 = y[:n0].reshape(M0, P)
        th = y[n0:].reshape(M, M0, P)
        H, qb = _ode.minor_brackets(problem, tab, th, None)
        h, arg, ties = _ode.argmin_with_ties(H)
        R0, arg0, ties0 = _ode.major_rhs(problem, tab, th0, None, arg)
        mj = problem.major_jumps_minor(th, _ode.major_policy_rates(tab.q0, arg0))
        R = (h + mj) + problem.field_jumps(th, _ode.policy_rates(qb, arg))
        rec0.put(n, s, arg0, ties0)
        rec.put(n, s, arg, ties)
        return np.concatenate([R0.ravel(), R.ravel()])

    tables(float(times[-1]))
    y_T = np.concatenate([np.asarray(g0, float).ravel(), np.asarray(g, float).ravel()])
    keep, vals = _ode.integrate_backward(rhs, y_T, times, 1, lambda: 10.0 * max(bounds()) + 1e-12)
    rhs(None, None, float(times[0]), vals[0])
    V0v = vals[:, :n0].reshape(len(keep), M0, P)
    Vv = vals[:, n0:].reshape(len(keep), M, M0, P)
    b0, b = bounds()
    mask = np.broadcast_to(states_consistent(grid)[:, None, :], Vv.shape[1:])
    common = {"model": model.name, "N": K, "time_steps": steps, "t0": 0.0, "t1": float(model.T), "kind": "master"}
    V0 = ValueTable(
        "major", grid, times, V0v,
        {**common, "bound": b0, "sup_abs": float(np.max(np.abs(V0v))), "bound_ok": bool(np.max(np.abs(V0v)) <= b0 * (1 + 1e-9) + 1e-12)},
    )
    peak = float(np.max(np.abs(Vv[:, mask]), initial=0.0))
    V = ValueTable("minor", grid, times, Vv, {**common, "bound": b, "sup_abs": peak, "bound_ok": bool(peak <= b * (1 + 1e-9) + 1e-12)})
    phi0 = FeedbackPolicy("major", model.A0, grid, times, rec0.knots, rec0.stage)
    phi = FeedbackPolicy("minor", model.A, grid, times, rec.knots, rec.stage)
    info = {"K": K, "time_steps": steps, "tie_count": rec0.ties + rec.ties, "tie_tolerance": _ode.TIE_TOL}
    if check:
        info.update(_master_check(model, grid, times, V0v, Vv, rec0.knots, rec.knots))
    return MasterSolution(V0, V, phi0, phi, info)


def dpp_check(
    model: ModelSpec,
    role: str,
    policies,
    K: int,
    t: float,
    s: float,
    time_steps: int | None = None,
) -> float:
    """Dynamic-programming defect between ``t`` and ``s``.

    With a uniform step ``h = T / time_steps``, compares the value at ``t``
    from one solve on ``[t, T]`` with the value obtained by solving on
    ``[s, T]`` and then on ``[t, s]`` from the intermediate table.  Returns the
    sup of the difference over reachable indices.
    """
    T = float(model.T)
    if not (0.0 <= t < s <= T):
        raise BadParameter(f"need 0 <= t < s <= T, got t={t}, s={s}")
    K = _check_K(K)
    steps = _ode.default_steps(model, K, T) if time_steps is None else int(time_steps)
    h = T / steps

    def n_steps(a, b):
        return max(1, int(round((b - a) / h)))

    if s == T:
        return 0.0
    direct, _ = solve_value_ode(model, role, policies, K, n_steps(t, T), t0=t, record_stages=False)
    tail, _ = solve_value_ode(model, role, policies, K, n_steps(s, T), t0=s, record_stages=False)
    head, _ = solve_value_ode(model, role, policies, K, n_steps(t, s), t0=t, t1=s, terminal=tail.initial, record_stages=False)
    mask = direct.valid_mask()
    return float(np.max(np.abs(direct.initial - head.initial)[mask], initial=0.0))
