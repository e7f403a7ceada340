"""Mean-field limit dynamics.

In the limit the empirical measure follows the deterministic flow
``dx/dt = v(t, i0, x)`` between jumps of the major player, so ``(X0, mu)`` and
``(X, X0, mu)`` are piecewise-deterministic Markov processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _tables
from ._parallel import effective_threads
from .exceptions import FlowLeftSimplex, RateBoundViolation
from .model import ModelSpec, check_simplex, full_distribution
from .nplayer import CostSummary, _Draws
from .policies import Policy

EXCURSION_TOL = 1e-6
_CHUNK = 4096


def _field(model: ModelSpec, phi0: Policy, phi: Policy, t, i0: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Vector field for a batch: ``i0`` (n,), ``x`` (n, M-1) -> (n, M-1)."""
    n = x.shape[0]
    ar = np.arange(n)
    tab = _tables.tabulate(model, t, x)
    xs = _clip(x)  # RK stages may step a hair outside the simplex
    a0 = phi0.evaluate(t, xs)[i0, ar]
    b = a0 if not model.alpha0_free else 0
    pol = phi.evaluate(t, xs)
    xf = full_distribution(x)
    v = np.zeros((n, model.M - 1))
    for i in range(model.M):
        rates = tab.q[pol[i, i0, ar], b, i0, i, :, ar]  # (n, M)
        v += xf[:, i : i + 1] * rates[:, : model.M - 1]
    return v


def vector_field(model: ModelSpec, phi0: Policy, phi: Policy, t, i0, x) -> np.ndarray:
    """``v_j(t, i0, x) = sum_i x_i q_{phi0,phi}(t, i, j, i0, x)`` for ``j < M``.

    The sum runs over all ``M`` states, diagonal rates included, with
    ``x_M = 1 - sum(x)``.  Accepts one point ``(M-1,)`` or a batch ``(n, M-1)``.
    """
    x = check_simplex(x)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    i0b = np.broadcast_to(np.asarray(i0, dtype=np.int64), (xb.shape[0],))
    out = _field(model, phi0, phi, t, i0b, xb)
    return out[0] if single else out


@dataclass
class FlowPath:
    times: np.ndarray
    points: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.points[-1]


def _excursion(x: np.ndarray) -> np.ndarray:
    return np.maximum(-np.min(x, axis=-1), np.sum(x, axis=-1) - 1.0)


def _clip(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, None)
    s = x.sum(axis=-1, keepdims=True)
    return x / np.maximum(s, 1.0)


def flow(
    model: ModelSpec, phi0: Policy, phi: Policy, i0: int, x0, t0: float, t1: float, step: float = 1e-3
) -> FlowPath:
    """RK4 integration of the characteristic ODE with the major state held at ``i0``.

    ``t1 < t0`` integrates backward in time.  Uses ``ceil(|t1 - t0| / step)``
    equal substeps.  Recorded points are clipped onto the simplex; an
    excursion larger than 1e-6 raises :class:`FlowLeftSimplex`.
    """
    x = check_simplex(np.asarray(x0, dtype=float)).reshape(1, -1)
    if step <= 0:
        raise ValueError("step must be positive")
    n = max(1, int(math.ceil(abs(t1 - t0) / step)))
    times = np.linspace(t0, t1, n + 1)
    i0a = np.array([int(i0)])
    pts = np.empty((n + 1, model.M - 1))
    pts[0] = x[0]

    def v(t, y):
        return _field(model, phi0, phi, t, i0a, y)

    for k in range(n):
        ta, tb = float(times[k]), float(times[k + 1])
        h = tb - ta
        tm = 0.5 * (ta + tb)
        k1 = v(ta, x)
        k2 = v(tm, x + 0.5 * h * k1)
        k3 = v(tm, x + 0.5 * h * k2)
        k4 = v(tb, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        exc = float(_excursion(x)[0])
        if exc > EXCURSION_TOL:
            raise FlowLeftSimplex(f"flow left the simplex by {exc:.3g} at t={tb:.6g}")
        pts[k + 1] = x[0]
    return FlowPath(times, _clip(pts))


@dataclass
class PdmpPath:
    """One path of the limiting process.

    ``measure`` is sampled at ``output_times``; the measure does not jump.
    """

    seed: int
    index: int
    major_jump_times: np.ndarray
    major_states: np.ndarray
    tagged_jump_times: np.ndarray
    tagged_states: np.ndarray
    output_times: np.ndarray
    measure: np.ndarray
    running_cost: float
    terminal_cost: float


@dataclass
class PdmpResult:
    mode: str
    seed: int
    costs: np.ndarray
    final_major: np.ndarray
    final_tagged: np.ndarray
    final_measure: np.ndarray
    paths: list[PdmpPath] | None = None

    @property
    def summary(self) -> CostSummary:
        n = len(self.costs)
        se = float(np.std(self.costs, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
        return CostSummary(float(np.mean(self.costs)) if n else float("nan"), se, n)


def _pdmp_chunk(model, mode, phi0, phi, phibar, init, seed, label, first, n, step, out_times, keep):
    M0, M = model.M0, model.M
    T = model.T
    t0 = float(out_times[0])
    lam = model.rate_bound * (M0 + M)
    expected = lam * max(T - t0, 0.0)
    draws = _Draws(seed, label, first, n, int(expected + 6.0 * math.sqrt(expected) + 16))
    triple = mode == "triple"
    i0 = np.full(n, init[0], dtype=np.int64)
    it = np.full(n, init[1], dtype=np.int64)
    x = np.tile(np.asarray(init[2], dtype=float), (n, 1))
    t = np.full(n, t0)
    cost = np.zeros(n)
    e, _ = draws.take(np.arange(n))
    tau = t0 + e / lam
    k_out = np.ones(n, dtype=np.int64)  # out_times[0] is recorded at start
    n_out = len(out_times)
    meas = np.empty((n, n_out, M - 1)) if keep else None
    if keep:
        meas[:, 0] = x
    jumps = {"major": ([], [], []), "tagged": ([], [], [])}
    active = np.arange(n)

    def running(tt, idx, xx):
        f0, fm = _tables.tabulate_costs(model, tt, xx)
        xx = _clip(xx)
        ar = np.arange(len(idx))
        a0 = phi0.evaluate(tt, xx)[i0[idx], ar]
        if not triple:
            return f0[a0, i0[idx], ar]
        b = a0 if not model.alpha0_free else 0
        ab = phibar.evaluate(tt, xx)[it[idx], i0[idx], ar]
        return fm[ab, b, i0[idx], it[idx], ar]

    def deriv(tt, idx, xx):
        return _field(model, phi0, phi, tt, i0[idx], xx), running(tt, idx, xx)

    while active.size:
        nxt = out_times[np.minimum(k_out[active], n_out - 1)]
        stop = np.minimum(np.minimum(tau[active], nxt), T)
        ta = t[active]
        h = np.minimum(step, stop - ta)
        tb = np.where(h == stop - ta, stop, ta + h)
        tm = 0.5 * (ta + tb)
        xa = x[active]
        hc = h[:, None]
        d1, c1 = deriv(ta, active, xa)
        d2, c2 = deriv(tm, active, xa + 0.5 * hc * d1)
        d3, c3 = deriv(tm, active, xa + 0.5 * hc * d2)
        d4, c4 = deriv(tb, active, xa + hc * d3)
        xn = xa + (hc / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
        exc = _excursion(xn)
        if np.any(exc > EXCURSION_TOL):
            raise FlowLeftSimplex(f"measure left the simplex by {float(exc.max()):.3g}")
        xn = _clip(xn)
        cost[active] += (h / 6.0) * (c1 + 2.0 * c2 + 2.0 * c3 + c4)
        x[active] = xn
        t[active] = tb
        reached = tb >= stop
        # output grid
        at_out = reached & (tb >= nxt) & (k_out[active] < n_out)
        if np.any(at_out):
            p = active[at_out]
            if keep:
                meas[p, k_out[p]] = x[p]
            k_out[p] += 1
        # candidate jumps
        cand = reached & (tb >= tau[active]) & (tb < T)
        if np.any(cand):
            p = active[cand]
            tt = t[p]
            xx = x[p]
            ar = np.arange(p.size)
            tab = _tables.tabulate(model, tt, xx)
            a0 = phi0.evaluate(tt, xx)[i0[p], ar]
            r = tab.q0[a0, i0[p], :, ar]
            r[ar, i0[p]] = 0.0
            if triple:
                b = a0 if not model.alpha0_free else 0
                ab = phibar.evaluate(tt, xx)[it[p], i0[p], ar]
                rt = tab.q[ab, b, i0[p], it[p], :, ar]
                rt[ar, it[p]] = 0.0
                r = np.concatenate([r, rt], axis=1)
            cum = np.cumsum(r, axis=1)
            total = cum[:, -1]
            if np.any(total > lam * (1.0 + 1e-12)) or np.any(r < 0):
                raise RateBoundViolation(f"jump rate {float(total.max()):.6g} outside [0, {lam:.6g}]")
            e, u = draws.take(p)
            pos = u * lam
            hit = pos < total
            if np.any(hit):
                rows = np.nonzero(hit)[0]
                ev = np.argmax(cum[rows] > pos[rows, None], axis=1)
                q = p[rows]
                maj = ev < M0
                i0[q[maj]] = ev[maj]
                tg = q[~maj]
                it[tg] = ev[~maj] - M0
                if keep:
                    jumps["major"][0].append(q[maj])
                    jumps["major"][1].append(t[q[maj]])
                    jumps["major"][2].append(i0[q[maj]])
                    jumps["tagged"][0].append(tg)
                    jumps["tagged"][1].append(t[tg])
                    jumps["tagged"][2].append(it[tg])
            tau[p] = t[p] + e / lam
        active = active[~(t[active] >= T)]
    g0, g = _tables.terminal(model, x)
    ar = np.arange(n)
    term = g[it, i0, ar] if triple else g0[i0, ar]
    records = None
    if keep:
        records = []
        cat = {k: [np.concatenate(v) if v else np.zeros(0) for v in vals] for k, vals in jumps.items()}
        for p in range(n):
            sel_m = cat["major"][0] == p
            sel_t = cat["tagged"][0] == p
            records.append(
                PdmpPath(
                    seed=int(seed), index=first + p,
                    major_jump_times=cat["major"][1][sel_m],
                    major_states=np.concatenate([[init[0]], cat["major"][2][sel_m]]).astype(np.int64),
                    tagged_jump_times=cat["tagged"][1][sel_t],
                    tagged_states=np.concatenate([[init[1]], cat["tagged"][2][sel_t]]).astype(np.int64),
                    output_times=out_times.copy(), measure=meas[p],
                    running_cost=float(cost[p]), terminal_cost=float(term[p]),
                )
            )
    return cost + term, i0, it, x, records


def simulate_pdmp(
    model: ModelSpec,
    mode: str,
    policies: Sequence[Policy],
    initial: tuple,
    n_paths: int,
    seed: int,
    *,
    step: float = 1e-2,
    n_output: int = 200,
    t0: float = 0.0,
    keep_paths: bool = False,
    label: str = "pdmp",
    threads: int | None = None,
) -> PdmpResult:
    """Simulate the limiting process ``(X0, mu)`` (``mode="pair"``) or
    ``(X, X0, mu)`` (``mode="triple"``).

    Parameters
    ----------
    policies : (phi0, phi) or (phi0, phi, phibar)
        ``phibar`` (default ``phi``) drives the tagged player in triple mode.
    initial : (i0, x) for pair mode, (i0, i, x) for triple mode.

    Jumps are sampled by thinning against ``C (M0 + M)``; between candidate
    times the measure and the running cost are integrated together by RK4
    with substeps of at most ``step``, stopping exactly at every output time.
    """
    if mode not in ("pair", "triple"):
        raise ValueError("mode must be 'pair' or 'triple'")
    pols = tuple(policies)
    if len(pols) == 2:
        phi0, phi = pols
        phibar = phi
    elif len(pols) == 3:
        phi0, phi, phibar = pols
    else:
        raise ValueError("policies must be (phi0, phi) or (phi0, phi, phibar)")
    for p in (phi0, phi, phibar):
        p.check_model(model)
    if mode == "pair":
        i0, x0 = initial
        i = 0
    else:
        i0, i, x0 = initial
    x0 = check_simplex(np.asarray(x0, dtype=float))
    init = (int(i0), int(i), x0)
    out_times = np.linspace(t0, model.T, max(2, int(n_output)))
    starts = list(range(0, n_paths, _CHUNK))

    def work(first):
        n = min(_CHUNK, n_paths - first)
        return _pdmp_chunk(model, mode, phi0, phi, phibar, init, seed, label, first, n, step, out_times, keep_paths)

    nthreads = effective_threads(threads)
    if nthreads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as ex:
            parts = list(ex.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    if not parts:
        return PdmpResult(mode, int(seed), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, model.M - 1)), [] if keep_paths else None)
    costs = np.concatenate([p[0] for p in parts])
    paths = [r for p in parts for r in p[4]] if keep_paths else None
    return PdmpResult(
        mode, int(seed), costs,
        np.concatenate([p[1] for p in parts]), np.concatenate([p[2] for p in parts]),
        np.concatenate([p[3] for p in parts]), paths,
    )


def mc_cost(model: ModelSpec, mode: str, policies, initial, n_paths: int, seed: int, **kwargs) -> tuple[float, float]:
    """Monte Carlo mean and standard error of the mode's cost functional."""
    s = simulate_pdmp(model, mode, policies, initial, n_paths, seed, **kwargs).summary
    return s.mean, (0.0 if n_paths == 1 else s.se)
