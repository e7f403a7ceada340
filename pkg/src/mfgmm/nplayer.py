"""Exact computations for the game with one major and ``N`` minor players.

The state ``(i0, mu)`` of the major player and the empirical measure, and the
triple ``(i, i0, mu)`` seen by a tagged minor player, are finite Markov chains
on ``{0..M0-1} x P^N`` (resp. ``{0..M-1} x {0..M0-1} x P^N``).  Expected costs
and value functions solve linear, resp. min-plus, backward ODE systems on
these index sets, integrated here with classical RK4.
"""

from __future__ import annotations

import logging
import math
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp

from . import _ode, _tables
from ._parallel import effective_threads
from .exceptions import BoundWarning, OracleTooLarge, RateBoundViolation
from .model import ModelSpec, SimplexGrid, check_simplex, interpolate, simplex_grid, states_consistent
from .policies import FeedbackPolicy, Policy

log = logging.getLogger(__name__)

ORACLE_CAP = 4096


@dataclass
class ValueTable:
    """Cost-to-go or value function on a role's index set.

    Attributes
    ----------
    role : {"major", "minor"}
    grid : SimplexGrid
        ``P^N`` for finite-player tables, ``P^K`` for mean-field grids.
    times : ndarray
        Saved time knots, ascending.
    values : ndarray
        ``(len(times), M0, P)`` for the major role, ``(len(times), M, M0, P)``
        for the minor role.
    info : dict
        Solver diagnostics: ``time_steps``, ``bound``, ``bound_ok``,
        ``tie_count`` and the like.
    """

    role: str
    grid: SimplexGrid
    times: np.ndarray
    values: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.grid.K

    K = N

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def at(self, t: float) -> np.ndarray:
        """Slice at the saved knot closest to ``t``."""
        k = int(np.argmin(np.abs(self.times - t)))
        return self.values[k]

    def valid_mask(self) -> np.ndarray:
        """Indices that describe a reachable configuration.

        A minor index ``(i, i0, x)`` is reachable only if some player occupies
        ``i`` at ``x``; all major indices are reachable.
        """
        shape = self.values.shape[1:]
        if self.role == "major":
            return np.ones(shape, dtype=bool)
        ok = states_consistent(self.grid)[:, None, :]
        return np.broadcast_to(ok, shape)

    def value(self, t: float, states: tuple[int, ...], x) -> float | np.ndarray:
        """Interpolated value at ``(t, states, x)`` using the slice nearest ``t``."""
        return interpolate(self.grid, self.at(t)[states], x)


MajorTableN = MinorTableN = ValueGrid = ValueTable


# -- helpers -------------------------------------------------------------------


def _unpack(role: str, policies, value: bool):
    if isinstance(policies, Policy):
        policies = (policies,)
    policies = tuple(policies)
    if role == "major":
        if value:
            if len(policies) != 1:
                raise ValueError("major value solve takes the minor policy phi only")
            return None, policies[0], None
        if len(policies) != 2:
            raise ValueError("major cost solve takes (phi0, phi)")
        return policies[0], policies[1], None
    if role == "minor":
        if value:
            if len(policies) != 2:
                raise ValueError("minor value solve takes (phi0, phi)")
            return policies[0], policies[1], None
        if len(policies) == 2:
            return policies[0], policies[1], policies[1]
        if len(policies) == 3:
            return policies
        raise ValueError("minor cost solve takes (phi0, phi) or (phi0, phi, phibar)")
    raise ValueError(f"role must be 'major' or 'minor', got {role!r}")


def _check_policies(model: ModelSpec, *pols) -> None:
    for p in pols:
        if p is not None:
            p.check_model(model)


class _Solve:
    """State shared by one backward solve on ``{states} x P^N``."""

    def __init__(self, model, role, N, time_steps, t0, t1, terminal, save_every):
        self.model = model
        self.role = role
        self.grid = simplex_grid(model.M, N)
        self.problem = _ode.GridProblem(model, self.grid)
        t1 = model.T if t1 is None else float(t1)
        t0 = float(t0)
        if not (0.0 <= t0 <= t1):
            raise ValueError(f"need 0 <= t0 <= t1, got t0={t0}, t1={t1}")
        steps = _ode.default_steps(model, N, t1 - t0) if time_steps is None else int(time_steps)
        if steps < 1:
            raise ValueError("time_steps must be >= 1")
        self.steps = steps
        self.times = _ode.time_grid(t0, t1, steps)
        self.save_every = save_every
        g0, g = _tables.grid_terminal(model, self.grid)
        if terminal is None:
            term = g0 if role == "major" else g
        else:
            term = np.asarray(terminal, dtype=float)
            expect = (model.M0, self.grid.size) if role == "major" else (model.M, model.M0, self.grid.size)
            if term.shape != expect:
                raise ValueError(f"terminal table shape {term.shape} != {expect}")
        self.terminal = term
        self.f_sup = 0.0
        self._seen: set[int] = set()

    def tables(self, t: float):
        tab = _tables.grid_tables(self.model, t, self.grid)
        if id(tab) not in self._seen:
            self._seen.add(id(tab))
            f = tab.f0 if self.role == "major" else tab.f
            self.f_sup = max(self.f_sup, float(np.max(np.abs(f), initial=0.0)))
        return tab

    def bound(self) -> float:
        """``max|terminal| + (t1 - t0) sup|f|`` over the cost tables seen so far."""
        span = self.times[-1] - self.times[0]
        return float(np.max(np.abs(self.terminal), initial=0.0)) + span * self.f_sup

    def run(self, rhs):
        self.tables(float(self.times[-1]))
        keep, vals = _ode.integrate_backward(
            rhs, self.terminal, self.times, self.save_every, lambda: 10.0 * self.bound() + 1e-12
        )
        return keep, vals, self.bound()

    def table(self, keep, vals, bound, extra: dict) -> ValueTable:
        mask = np.ones(vals.shape[1:], dtype=bool)
        if self.role == "minor":
            mask = np.broadcast_to(states_consistent(self.grid)[:, None, :], vals.shape[1:])
        peak = float(np.max(np.abs(vals[:, mask]), initial=0.0))
        bound_ok = peak <= bound * (1.0 + 1e-9) + 1e-12
        if not bound_ok:
            warnings.warn(f"{self.role} table exceeds the a-priori bound: {peak:.6g} > {bound:.6g}", BoundWarning, stacklevel=3)
        info = {
            "model": self.model.name,
            "N": self.grid.K,
            "time_steps": self.steps,
            "t0": float(self.times[0]),
            "t1": float(self.times[-1]),
            "bound": bound,
            "sup_abs": peak,
            "bound_ok": bool(bound_ok),
            **extra,
        }
        return ValueTable(self.role, self.grid, self.times[keep], vals, info)


# -- public operations -----------------------------------------------------------


def apply_generator(model: ModelSpec, role: str, policies, F, t: float, N: int) -> np.ndarray:
    """Jump part of the finite-player generator applied to ``F``.

    Parameters
    ----------
    role : {"major", "minor"}
        ``"major"`` acts on functions of ``(i0, x)`` with ``policies=(phi0, phi)``;
        ``"minor"`` acts on functions of ``(i, i0, x)`` with
        ``policies=(phi0, phi[, phibar])`` where ``phibar`` drives the tagged player.
    F : ndarray
        ``(M0, P)`` or ``(M, M0, P)`` on ``P^N``.
    """
    phi0, phi, phibar = _unpack(role, policies, value=False)
    _check_policies(model, phi0, phi, phibar)
    grid = simplex_grid(model.M, N)
    problem = _ode.GridProblem(model, grid)
    F = np.asarray(F, dtype=float)
    tab = _tables.grid_tables(model, t, grid)
    pts = grid.points
    i0_idx = phi0.evaluate(t, pts)
    phi_idx = phi.evaluate(t, pts)
    if role == "major":
        if F.shape != (model.M0, grid.size):
            raise ValueError(f"F must have shape {(model.M0, grid.size)}")
        J0 = problem.major_jumps(tab.q0, F)
        if model.alpha0_free:
            return _ode.select(J0, i0_idx) + problem.minor_flow(F, _ode.policy_rates(tab.q[:, 0], phi_idx))
        full = np.stack([J0[b] + problem.minor_flow(F, _ode.policy_rates(tab.q[:, b], phi_idx)) for b in range(len(model.A0))])
        return _ode.select(full, i0_idx)
    if F.shape != (model.M, model.M0, grid.size):
        raise ValueError(f"F must have shape {(model.M, model.M0, grid.size)}")
    qb, _ = _ode.minor_tables(tab, i0_idx, model.alpha0_free)
    tagged = _ode.select(problem.tagged_jumps(F, qb), phibar.evaluate(t, pts))
    mj = problem.major_jumps_minor(F, _ode.major_policy_rates(tab.q0, i0_idx))
    return (tagged + mj) + problem.field_jumps(F, _ode.policy_rates(qb, phi_idx))


def solve_cost_ode(
    model: ModelSpec,
    role: str,
    policies: Sequence[Policy],
    N: int,
    time_steps: int | None = None,
    *,
    t0: float = 0.0,
    t1: float | None = None,
    terminal: np.ndarray | None = None,
    save_every: int = 1,
) -> ValueTable:
    """Expected cost of the major player (``role="major"``, ``policies=(phi0, phi)``)
    or of a tagged minor player (``role="minor"``, ``policies=(phi0, phi[, phibar])``).

    Integrates ``0 = d/dt theta + f + G theta`` backward from ``theta(t1) = terminal``
    (default: the terminal cost) with RK4 on ``time_steps`` uniform steps.
    The default step count is ``max(100, ceil(10 C (t1 - t0) N))``.

    Raises
    ------
    UnstableIntegration
        If the iterate exceeds ten times the a-priori bound ``|g| + (t1-t0)|f|``.
    """
    phi0, phi, phibar = _unpack(role, policies, value=False)
    _check_policies(model, phi0, phi, phibar)
    job = _Solve(model, role, N, time_steps, t0, t1, terminal, save_every)
    b0 = phi0.bind(job.times, job.grid)
    b = phi.bind(job.times, job.grid)
    problem = job.problem
    if role == "major":

        def rhs(n, s, t, theta):
            tab = job.tables(t)
            return _ode.major_rhs(problem, tab, theta, b0.at(n, s, t), b.at(n, s, t))[0]

    else:
        bb = phibar.bind(job.times, job.grid)

        def rhs(n, s, t, theta):
            tab = job.tables(t)
            return _ode.minor_rhs(problem, tab, theta, b0.at(n, s, t), b.at(n, s, t), bb.at(n, s, t))[0]

    keep, vals, bound = job.run(rhs)
    return job.table(keep, vals, bound, {"kind": "cost"})


def solve_value_ode(
    model: ModelSpec,
    role: str,
    policies,
    N: int,
    time_steps: int | None = None,
    *,
    t0: float = 0.0,
    t1: float | None = None,
    terminal: np.ndarray | None = None,
    save_every: int = 1,
    record_stages: bool = True,
) -> tuple[ValueTable, FeedbackPolicy]:
    """Value function of the major player against ``phi`` (``role="major"``)
    or of a tagged minor player against ``(phi0, phi)`` (``role="minor"``).

    The running term is the pointwise minimum of the Hamiltonian bracket over
    the role's action set, re-evaluated at every RK stage.  The returned
    policy holds the first minimiser at every knot and, with
    ``record_stages``, at every stage.
    """
    phi0, phi, _ = _unpack(role, policies, value=True)
    _check_policies(model, phi0, phi)
    job = _Solve(model, role, N, time_steps, t0, t1, terminal, save_every)
    problem = job.problem
    b = phi.bind(job.times, job.grid)
    shape = job.terminal.shape
    actions = model.A0 if role == "major" else model.A
    rec = _ode.StageRecord(job.steps, shape, len(actions), record=record_stages)
    if role == "major":

        def rhs(n, s, t, theta):
            tab = job.tables(t)
            out, arg, ties = _ode.major_rhs(problem, tab, theta, None, b.at(n, s, t))
            rec.put(n, s, arg, ties)
            return out

    else:
        b0 = phi0.bind(job.times, job.grid)

        def rhs(n, s, t, theta):
            tab = job.tables(t)
            out, arg, ties = _ode.minor_rhs(problem, tab, theta, b0.at(n, s, t), b.at(n, s, t), None)
            rec.put(n, s, arg, ties)
            return out

    keep, vals, bound = job.run(rhs)
    rhs(None, None, float(job.times[0]), vals[0])  # minimiser at knot 0
    table = job.table(keep, vals, bound, {"kind": "value", "tie_count": rec.ties})
    policy = FeedbackPolicy(role, actions, job.grid, job.times, rec.knots, rec.stage)
    return table, policy


def discrete_gradient(table: ValueTable, N: int | None = None) -> float:
    """``max N |table(x + e_jk / N) - table(x)|`` over saved knots, states,
    grid points and pairs ``j != k`` with both points in ``P^N``.

    For minor tables only reachable indices enter the comparison.
    """
    grid = table.grid
    N = grid.K if N is None else int(N)
    if N != grid.K:
        raise ValueError(f"table lives on P^{grid.K}, not P^{N}")
    S = grid.shift_index
    vals = table.values
    mask = table.valid_mask()
    best = 0.0
    for j in range(grid.M):
        for k in range(grid.M):
            if j == k:
                continue
            movable = grid.full_counts[:, j] >= 1
            target = S[j, k]
            diff = np.abs(vals[..., target] - vals)
            ok = mask & mask[..., target] & movable
            if np.any(ok):
                best = max(best, float(np.max(diff[:, ok])))
    return N * best


# -- simulation ---------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)
_CHUNK = 1024


def label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


def path_rng(seed: int, label: str, index: int) -> np.random.Generator:
    """Private stream for path ``index`` of component ``label``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(label_key(label), int(index)))
    return np.random.default_rng(ss)


class _Draws:
    """Per-path pre-drawn exponential and uniform variates, refilled on demand."""

    def __init__(self, seed: int, label: str, first: int, n: int, block: int):
        self.gens = [path_rng(seed, label, first + p) for p in range(n)]
        self.block = block
        self.E = np.empty((n, block))
        self.U = np.empty((n, block))
        for p, g in enumerate(self.gens):
            self._fill(p)
        self.ptr = np.zeros(n, dtype=np.int64)

    def _fill(self, p: int) -> None:
        g = self.gens[p]
        self.E[p] = g.standard_exponential(self.block)
        self.U[p] = g.random(self.block)

    def take(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        full = idx[self.ptr[idx] >= self.block]
        for p in full:
            self._fill(int(p))
            self.ptr[p] = 0
        e = self.E[idx, self.ptr[idx]]
        u = self.U[idx, self.ptr[idx]]
        self.ptr[idx] += 1
        return e, u


@dataclass
class PathRecord:
    """One simulated path of the finite-player game.

    Players are exchangeable, so the record keeps the aggregated state: the
    major state, the tagged player's state and the occupation counts of all
    ``N`` minor players (the empirical measure is ``counts[:, :-1] / N``).
    Row ``0`` of the state arrays is the initial state; row ``k`` is the state
    after the ``k``-th jump at ``jump_times[k-1]``.
    """

    seed: int
    index: int
    jump_times: np.ndarray
    major_states: np.ndarray
    tagged_states: np.ndarray
    counts: np.ndarray
    running_cost: np.ndarray
    terminal_cost: np.ndarray

    @property
    def empirical_measure(self) -> np.ndarray:
        N = self.counts[0].sum()
        return self.counts[:, :-1] / N


@dataclass
class CostSummary:
    mean: float
    se: float
    n_paths: int

    def as_dict(self) -> dict[str, float]:
        return {"mean": self.mean, "se": self.se, "n_paths": self.n_paths}


@dataclass
class SimulationResult:
    """Costs per path for the classes ``major``, ``tagged`` (player 1) and
    ``field`` (mean over players 2..N), plus terminal states."""

    N: int
    seed: int
    costs: dict[str, np.ndarray]
    final_major: np.ndarray
    final_tagged: np.ndarray
    final_counts: np.ndarray
    n_jumps: np.ndarray
    paths: list[PathRecord] | None = None

    @property
    def summary(self) -> dict[str, CostSummary]:
        out = {}
        for k, v in self.costs.items():
            n = len(v)
            if n == 0 or np.all(np.isnan(v)):
                out[k] = CostSummary(float("nan"), float("nan"), n)
                continue
            se = float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
            out[k] = CostSummary(float(np.mean(v)), se, n)
        return out

    @property
    def final_measure(self) -> np.ndarray:
        return self.final_counts[:, :-1] / self.N


def _simulate_chunk(model, phi0, phi, phibar, N, init, t0, seed, label, first, n, keep):
    """Thinning simulation of ``n`` paths in lock step."""
    M0, M = model.M0, model.M
    T = model.T
    lam = (N + 1) * M * model.rate_bound
    expected = lam * max(T - t0, 0.0)
    block = int(expected + 6.0 * math.sqrt(expected) + 16)
    draws = _Draws(seed, label, first, n, block)
    i0 = np.full(n, init[0], dtype=np.int64)
    it = np.full(n, init[1], dtype=np.int64)
    cnt = np.tile(np.asarray(init[2], dtype=np.int64), (n, 1))
    t = np.full(n, float(t0))
    run = np.zeros((n, 3))
    n_jumps = np.zeros(n, dtype=np.int64)
    static = model.time_homogeneous and all(p.time_independent for p in (phi0, phi, phibar))
    ev_path, ev_time, ev_state = [], [], []
    ar_all = np.arange(n)
    active = ar_all.copy()
    b_major = not model.alpha0_free

    def x_of(c):
        return c[:, :-1] / N

    def cost_rates(tt, idx):
        x = x_of(cnt[idx])
        tab0, tabm = _tables.tabulate_costs(model, tt, x)
        ar = np.arange(len(idx))
        a0 = phi0.evaluate(tt, x)[i0[idx], ar]
        b = a0 if b_major else 0
        c0 = tab0[a0, i0[idx], ar]
        abar = phibar.evaluate(tt, x)[it[idx], i0[idx], ar]
        ctag = tabm[abar, b, i0[idx], it[idx], ar]
        if N > 1:
            pol = phi.evaluate(tt, x)
            cf = np.zeros(len(idx))
            for k in range(M):
                occ = cnt[idx, k] - (it[idx] == k)
                cf += occ * tabm[pol[k, i0[idx], ar], b, i0[idx], k, ar]
            cf = cf / (N - 1)
        else:
            cf = np.full(len(idx), np.nan)
        return np.stack([c0, ctag, cf], axis=1)

    while active.size:
        e, u = draws.take(active)
        t_old = t[active]
        t_new = t_old + e / lam
        done = t_new >= T
        t_new = np.where(done, T, t_new)
        dt = t_new - t_old
        if static:
            run[active] += cost_rates(t_old, active) * dt[:, None]
        else:
            acc = np.zeros((active.size, 3))
            for node, w in zip(_GL_NODES, _GL_WEIGHTS):
                tn = t_old + 0.5 * (node + 1.0) * dt
                acc += w * cost_rates(tn, active)
            run[active] += 0.5 * dt[:, None] * acc
        t[active] = t_new
        live = active[~done]
        if live.size:
            tl = t[live]
            x = x_of(cnt[live])
            tab = _tables.tabulate(model, tl, x)
            ar = np.arange(live.size)
            a0 = phi0.evaluate(tl, x)[i0[live], ar]
            b = a0 if b_major else 0
            r_major = tab.q0[a0, i0[live], :, ar]
            r_major[ar, i0[live]] = 0.0
            abar = phibar.evaluate(tl, x)[it[live], i0[live], ar]
            r_tag = tab.q[abar, b, i0[live], it[live], :, ar]
            r_tag[ar, it[live]] = 0.0
            pol = phi.evaluate(tl, x)
            r_field = np.zeros((live.size, M, M))
            for k in range(M):
                occ = np.maximum(cnt[live, k] - (it[live] == k), 0)
                rk = tab.q[pol[k, i0[live], ar], b, i0[live], k, :, ar] * occ[:, None]
                rk[:, k] = 0.0
                r_field[:, k, :] = rk
            rates = np.concatenate([r_major, r_tag, r_field.reshape(live.size, M * M)], axis=1)
            if np.any(rates < 0):
                raise RateBoundViolation("negative jump rate met during simulation")
            cum = np.cumsum(rates, axis=1)
            total = cum[:, -1]
            if np.any(total > lam * (1.0 + 1e-12)):
                raise RateBoundViolation(
                    f"total jump rate {float(total.max()):.6g} exceeds the thinning bound {lam:.6g}"
                )
            pos = u[~done] * lam
            hit = pos < total
            if np.any(hit):
                rows = np.nonzero(hit)[0]
                ev = np.argmax(cum[rows] > pos[rows, None], axis=1)
                p = live[rows]
                is_major = ev < M0
                is_tag = (ev >= M0) & (ev < M0 + M)
                is_field = ev >= M0 + M
                i0[p[is_major]] = ev[is_major]
                tag_p, tag_j = p[is_tag], ev[is_tag] - M0
                cnt[tag_p, it[tag_p]] -= 1
                cnt[tag_p, tag_j] += 1
                it[tag_p] = tag_j
                fe = ev[is_field] - M0 - M
                fp = p[is_field]
                cnt[fp, fe // M] -= 1
                cnt[fp, fe % M] += 1
                n_jumps[p] += 1
                if keep:
                    ev_path.append(p.copy())
                    ev_time.append(t[p].copy())
                    ev_state.append(np.column_stack([i0[p], it[p], cnt[p]]))
        active = live
    x_T = x_of(cnt)
    g0, g = _tables.terminal(model, x_T)
    ar = ar_all
    term = np.zeros((n, 3))
    term[:, 0] = g0[i0, ar]
    term[:, 1] = g[it, i0, ar]
    if N > 1:
        acc = np.zeros(n)
        for k in range(M):
            acc += (cnt[:, k] - (it == k)) * g[k, i0, ar]
        term[:, 2] = acc / (N - 1)
    else:
        term[:, 2] = np.nan
    records = None
    if keep:
        records = []
        P_ = np.concatenate(ev_path) if ev_path else np.zeros(0, dtype=np.int64)
        Tm = np.concatenate(ev_time) if ev_time else np.zeros(0)
        St = np.concatenate(ev_state) if ev_state else np.zeros((0, 2 + M), dtype=np.int64)
        order = np.argsort(P_, kind="stable")
        P_, Tm, St = P_[order], Tm[order], St[order]
        start = np.zeros((1, 2 + M), dtype=np.int64)
        start[0, 0], start[0, 1], start[0, 2:] = init[0], init[1], init[2]
        for p in range(n):
            sel = P_ == p
            states = np.vstack([start, St[sel]])
            records.append(
                PathRecord(
                    seed=int(seed), index=first + p, jump_times=Tm[sel],
                    major_states=states[:, 0], tagged_states=states[:, 1], counts=states[:, 2:],
                    running_cost=run[p].copy(), terminal_cost=term[p].copy(),
                )
            )
    return run + term, i0, it, cnt, n_jumps, records


def _initial_counts(model: ModelSpec, N: int, x0, i) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.shape == (model.M,) and np.issubdtype(x0.dtype, np.floating) and np.all(x0 == np.round(x0)) and x0.sum() == N:
        counts = x0.astype(np.int64)
    else:
        grid = simplex_grid(model.M, N)
        k = grid.counts[grid.index_of(check_simplex(x0))]
        counts = np.append(k, N - k.sum())
    if counts[i] < 1:
        raise ValueError(f"tagged player in state {i} but no minor player occupies it")
    return counts


def simulate_paths(
    model: ModelSpec,
    policies: Sequence[Policy],
    N: int,
    n_paths: int,
    seed: int,
    *,
    i0: int = 0,
    i: int = 0,
    x0=None,
    t0: float = 0.0,
    keep_paths: bool = False,
    label: str = "nplayer",
    threads: int | None = None,
) -> SimulationResult:
    """Event-driven simulation of the ``N + 1`` player game.

    Parameters
    ----------
    policies : (phi0, phi) or (phi0, phi, phibar)
        ``phibar`` (default ``phi``) is used by minor player 1, the tagged player.
    x0 : array_like, optional
        Initial empirical measure on ``P^N`` (first ``M-1`` coordinates) or a
        vector of ``M`` integer counts.  Defaults to all players in state ``i``.
    seed : int
        Path ``p`` draws from the stream ``(seed, label, p)`` so results do not
        depend on chunking or thread count.

    Jumps are sampled by thinning a Poisson clock of rate ``(N+1) M C``;
    running costs are integrated exactly for time-homogeneous models under
    time-independent policies and by 5-point Gauss-Legendre otherwise.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    phi0, phi, phibar = _unpack("minor", policies, value=False)
    _check_policies(model, phi0, phi, phibar)
    if x0 is None:
        counts = np.zeros(model.M, dtype=np.int64)
        counts[i] = N
    else:
        counts = _initial_counts(model, N, x0, i)
    init = (int(i0), int(i), counts)
    starts = list(range(0, n_paths, _CHUNK))

    def work(first):
        n = min(_CHUNK, n_paths - first)
        return _simulate_chunk(model, phi0, phi, phibar, N, init, t0, seed, label, first, n, keep_paths)

    nthreads = effective_threads(threads)
    if nthreads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as ex:
            parts = list(ex.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    if parts:
        total = np.concatenate([p[0] for p in parts])
        fi0 = np.concatenate([p[1] for p in parts])
        fit = np.concatenate([p[2] for p in parts])
        fcnt = np.concatenate([p[3] for p in parts])
        nj = np.concatenate([p[4] for p in parts])
    else:
        total = np.zeros((0, 3))
        fi0 = fit = nj = np.zeros(0, dtype=np.int64)
        fcnt = np.zeros((0, model.M), dtype=np.int64)
    paths = [r for p in parts for r in p[5]] if keep_paths else None
    costs = {"major": total[:, 0], "tagged": total[:, 1], "field": total[:, 2]}
    return SimulationResult(N, int(seed), costs, fi0, fit, fcnt, nj, paths)


# -- product-chain oracle -------------------------------------------------------------


@dataclass
class OracleResult:
    """Expected costs of every player from every product state at ``t0``.

    ``costs[s, 0]`` is the major player's cost and ``costs[s, n]`` that of minor
    player ``n`` (player 1 is the tagged one) from product state ``s``.
    """

    model: ModelSpec
    N: int
    t0: float
    states: np.ndarray  # (S, 1 + N) digits (i0, i1, .., iN)
    costs: np.ndarray  # (S, 1 + N)

    def index(self, i0: int, minors: Sequence[int]) -> int:
        return int(np.ravel_multi_index((i0, *minors), (self.model.M0,) + (self.model.M,) * self.N))

    def major_table(self) -> np.ndarray:
        """Major cost aggregated to ``(i0, x in P^N)``: shape ``(M0, P)``."""
        grid = simplex_grid(self.model.M, self.N)
        out = np.full((self.model.M0, grid.size), np.nan)
        ranks = self._ranks(grid)
        out[self.states[:, 0], ranks] = self.costs[:, 0]
        return out

    def minor_table(self) -> np.ndarray:
        """Tagged player's cost on ``(i, i0, x)``: shape ``(M, M0, P)``; NaN where unreachable."""
        grid = simplex_grid(self.model.M, self.N)
        out = np.full((self.model.M, self.model.M0, grid.size), np.nan)
        ranks = self._ranks(grid)
        out[self.states[:, 1], self.states[:, 0], ranks] = self.costs[:, 1]
        return out

    def _ranks(self, grid: SimplexGrid) -> np.ndarray:
        M = self.model.M
        counts = np.stack([(self.states[:, 1:] == k).sum(axis=1) for k in range(M - 1)], axis=1)
        return grid.rank(counts)


def _product_states(model: ModelSpec, N: int) -> np.ndarray:
    S = model.M0 * model.M ** N
    if S > ORACLE_CAP:
        raise OracleTooLarge(f"product chain has {S} states > cap {ORACLE_CAP}")
    return np.stack(np.unravel_index(np.arange(S), (model.M0,) + (model.M,) * N), axis=1)


def _product_generator(model, phi0, phi, phibar, N, t, digits):
    """Sparse product generator and per-player running costs at time ``t``."""
    M0, M = model.M0, model.M
    S = digits.shape[0]
    x = np.stack([(digits[:, 1:] == k).sum(axis=1) for k in range(M - 1)], axis=1) / N
    tab = _tables.tabulate(model, t, x)
    ar = np.arange(S)
    a0 = phi0.evaluate(t, x)[digits[:, 0], ar]
    b = a0 if not model.alpha0_free else 0
    strides = np.empty(N + 1, dtype=np.int64)
    strides[0] = M ** N
    for n in range(1, N + 1):
        strides[n] = M ** (N - n)
    rows, cols, vals = [], [], []
    for j0 in range(M0):
        r = tab.q0[a0, digits[:, 0], j0, ar]
        move = digits[:, 0] != j0
        rows.append(ar[move])
        cols.append(ar[move] + (j0 - digits[move, 0]) * strides[0])
        vals.append(r[move])
    pol = phi.evaluate(t, x)
    polbar = phibar.evaluate(t, x)
    costs = np.empty((S, N + 1))
    costs[:, 0] = tab.f0[a0, digits[:, 0], ar]
    fm = tab.f
    for n in range(1, N + 1):
        own = digits[:, n]
        src = polbar if n == 1 else pol
        a = src[own, digits[:, 0], ar]
        costs[:, n] = fm[a, b, digits[:, 0], own, ar]
        for j in range(M):
            r = tab.q[a, b, digits[:, 0], own, j, ar]
            move = own != j
            rows.append(ar[move])
            cols.append(ar[move] + (j - own[move]) * strides[n])
            vals.append(r[move])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    Q = sparse.csr_matrix((vals, (rows, cols)), shape=(S, S))
    Q = Q - sparse.diags(np.asarray(Q.sum(axis=1)).ravel())
    return Q.tocsr(), costs


def oracle_expected_cost(
    model: ModelSpec,
    policies: Sequence[Policy],
    N: int,
    t0: float = 0.0,
    initial: tuple[int, Sequence[int]] | None = None,
    *,
    rtol: float = 1e-12,
    atol: float = 1e-12,
):
    """Ground-truth expected costs from the full ``M0 * M**N`` product chain.

    Solves the backward Kolmogorov equation ``-dJ/dt = Q(t) J + f(t)`` for all
    players at once with an adaptive 8th-order Runge-Kutta method.  Minor
    player 1 follows ``phibar`` (third policy, default ``phi``).

    Returns the ``N + 1`` costs from ``initial = (i0, (i1, .., iN))`` if given,
    otherwise an :class:`OracleResult` covering every product state.
    """
    phi0, phi, phibar = _unpack("minor", policies, value=False)
    _check_policies(model, phi0, phi, phibar)
    digits = _product_states(model, N)
    S = digits.shape[0]
    x = np.stack([(digits[:, 1:] == k).sum(axis=1) for k in range(model.M - 1)], axis=1) / N
    g0, g = _tables.terminal(model, x)
    ar = np.arange(S)
    JT = np.empty((S, N + 1))
    JT[:, 0] = g0[digits[:, 0], ar]
    for n in range(1, N + 1):
        JT[:, n] = g[digits[:, n], digits[:, 0], ar]
    static = model.time_homogeneous and all(p.time_independent for p in (phi0, phi, phibar))
    cache = {}

    def gen(t):
        if static:
            if "q" not in cache:
                cache["q"] = _product_generator(model, phi0, phi, phibar, N, t, digits)
            return cache["q"]
        return _product_generator(model, phi0, phi, phibar, N, t, digits)

    def rhs(t, y):
        Q, c = gen(t)
        J = y.reshape(S, N + 1)
        return (-(Q @ J) - c).ravel()

    if model.T > t0:
        sol = solve_ivp(rhs, (model.T, t0), JT.ravel(), method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise ArithmeticError(f"oracle integration failed: {sol.message}")
        J0 = sol.y[:, -1].reshape(S, N + 1)
    else:
        J0 = JT
    result = OracleResult(model, N, float(t0), digits, J0)
    if initial is not None:
        i0, minors = initial
        return J0[result.index(i0, minors)]
    return result


def oracle_distribution(
    model: ModelSpec, policies: Sequence[Policy], N: int, initial: tuple[int, Sequence[int]], t1: float | None = None
) -> dict[tuple[int, tuple[int, ...]], float]:
    """Law of ``(i0, counts)`` at ``t1`` (default ``T``) from a product state at 0,
    by the forward Kolmogorov equation on the product chain."""
    phi0, phi, phibar = _unpack("minor", policies, value=False)
    digits = _product_states(model, N)
    S = digits.shape[0]
    p0 = np.zeros(S)
    p0[int(np.ravel_multi_index((initial[0], *initial[1]), (model.M0,) + (model.M,) * N))] = 1.0
    t1 = model.T if t1 is None else float(t1)

    def rhs(t, p):
        Q, _ = _product_generator(model, phi0, phi, phibar, N, t, digits)
        return Q.T @ p

    sol = solve_ivp(rhs, (0.0, t1), p0, method="DOP853", rtol=1e-12, atol=1e-14)
    p = sol.y[:, -1]
    out: dict = {}
    for s in range(S):
        counts = tuple(int((digits[s, 1:] == k).sum()) for k in range(model.M))
        key = (int(digits[s, 0]), counts)
        out[key] = out.get(key, 0.0) + float(p[s])
    return out
