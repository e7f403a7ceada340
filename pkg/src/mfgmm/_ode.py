"""Generator kernels and the backward RK4 driver shared by every grid solver.

Cost, value and master solves all assemble their right-hand sides from the
same kernels in the same order, so a value solve and a cost solve under the
value solve's own minimisers produce bit-identical tables.

Array layout: major tables are ``(M0, P)``; minor tables are ``(M, M0, P)``
indexed by (own state, major state, grid point).  Bracket arrays carry a
leading action axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import IndexBug, UnstableIntegration
from .model import ModelSpec, SimplexGrid
from .policies import index_dtype

TIE_TOL = 1e-12


class GridProblem:
    """Shift tables and occupation numbers of ``P^N`` for one model."""

    def __init__(self, model: ModelSpec, grid: SimplexGrid):
        self.model = model
        self.grid = grid
        self.N = grid.K
        S = grid.shift_index
        if S.min() < 0 or S.max() >= grid.size:
            raise IndexBug("shift table leaves the grid")
        self.S = S
        self.counts = grid.full_counts.T.astype(float)  # (M, P)
        M = grid.M
        self.pairs = [(i, j) for i in range(M) for j in range(M) if i != j]
        # field occupancy (n_k - 1[k == i])^+ laid out as (k, i, 1, P)
        occ = self.counts[:, None, :] - np.eye(M)[:, :, None]
        self.field_occ = np.maximum(occ, 0.0)[:, :, None, :]

    # -- kernels -----------------------------------------------------------

    def major_jumps(self, q0: np.ndarray, theta0: np.ndarray) -> np.ndarray:
        """``sum_j0 (theta0[j0] - theta0[i0]) q0[..., i0, j0, :]`` -> q0.shape[:-3] + (M0, P)."""
        M0 = theta0.shape[0]
        out = np.zeros(q0.shape[:-3] + theta0.shape)
        for j0 in range(M0):
            out += (theta0[j0] - theta0) * q0[..., :, j0, :]
        return out

    def minor_flow(self, theta0: np.ndarray, qphi: np.ndarray) -> np.ndarray:
        """Jumps of the minor population seen by the major player.

        ``qphi`` has shape ``(M0, M, M, P)``; returns ``(M0, P)``.
        """
        out = np.zeros_like(theta0)
        S, n = self.S, self.counts
        for i, j in self.pairs:
            out += (theta0[:, S[i, j]] - theta0) * n[i] * qphi[:, i, j]
        return out

    def tagged_jumps(self, theta: np.ndarray, qb: np.ndarray) -> np.ndarray:
        """Own jumps of the tagged minor player for every action.

        ``theta`` is ``(M, M0, P)``, ``qb`` is ``(A, M0, M, M, P)``; returns ``(A, M, M0, P)``.
        """
        M = theta.shape[0]
        out = np.zeros((qb.shape[0],) + theta.shape)
        S = self.S
        for i in range(M):
            for j in range(M):
                if i != j:
                    out[:, i] += (theta[j][:, S[i, j]] - theta[i]) * qb[:, :, i, j]
        return out

    def major_jumps_minor(self, theta: np.ndarray, q0phi: np.ndarray) -> np.ndarray:
        """Major jumps in the minor table: ``q0phi`` is ``(M0, M0, P)``."""
        out = np.zeros_like(theta)
        for j0 in range(theta.shape[1]):
            out += (theta[:, j0][:, None, :] - theta) * q0phi[:, j0]
        return out

    def field_jumps(self, theta: np.ndarray, qphi: np.ndarray) -> np.ndarray:
        """Jumps of the other ``N - 1`` minor players; ``qphi`` is ``(M0, M, M, P)``."""
        out = np.zeros_like(theta)
        S = self.S
        for k, j in self.pairs:
            out += (theta[:, :, S[k, j]] - theta) * (self.field_occ[k] * qphi[:, k, j])
        return out


# -- gathering helpers ---------------------------------------------------------


def select(H: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """``H[idx[...], ...]`` along the leading action axis."""
    idx = np.broadcast_to(idx, H.shape[1:])
    return np.take_along_axis(H, idx[None].astype(np.intp), axis=0)[0]


def minor_tables(tab, phi0_idx: np.ndarray | None, alpha0_free: bool) -> tuple[np.ndarray, np.ndarray]:
    """Minor rates ``(A, M0, M, M, P)`` and costs ``(A, M, M0, P)`` with the
    major action fixed by ``phi0_idx`` (``(M0, P)``)."""
    if alpha0_free or tab.q.shape[1] == 1:
        qb, fb = tab.q[:, 0], tab.f[:, 0]
    else:
        A = tab.q.shape[0]
        b = np.broadcast_to(phi0_idx[None, None, :, None, None, :], (A, 1) + tab.q.shape[2:]).astype(np.intp)
        qb = np.take_along_axis(tab.q, b, axis=1)[:, 0]
        b = np.broadcast_to(phi0_idx[None, None, :, None, :], (A, 1) + tab.f.shape[2:]).astype(np.intp)
        fb = np.take_along_axis(tab.f, b, axis=1)[:, 0]
    return qb, np.swapaxes(fb, 1, 2)


def policy_rates(qb: np.ndarray, phi_idx: np.ndarray) -> np.ndarray:
    """Minor rates under policy ``phi_idx`` (``(M, M0, P)``) -> ``(M0, M, M, P)``."""
    idx = np.swapaxes(phi_idx, 0, 1)[:, :, None, :]
    return select(qb, idx)


def major_policy_rates(q0: np.ndarray, phi0_idx: np.ndarray) -> np.ndarray:
    return select(q0, phi0_idx[:, None, :])


def argmin_with_ties(H: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Minimum, first minimiser and number of near-ties along axis 0."""
    arg = np.argmin(H, axis=0)
    low = select(H, arg)
    ties = 0
    if H.shape[0] > 1:
        second = np.partition(H, 1, axis=0)[1]
        ties = int(np.count_nonzero(second - low <= TIE_TOL))
    return low, arg.astype(index_dtype(H.shape[0])), ties


# -- right-hand sides ------------------------------------------------------------


@dataclass
class StageRecord:
    """Collects minimisers and tie counts of a value or master solve."""

    steps: int
    shape: tuple[int, ...]
    n_actions: int
    record: bool = True
    stage: np.ndarray | None = None
    knots: np.ndarray | None = None
    ties: int = 0

    def __post_init__(self):
        dt = index_dtype(self.n_actions)
        if self.record:
            self.stage = np.zeros((self.steps, 4) + self.shape, dtype=dt)
        self.knots = np.zeros((self.steps + 1,) + self.shape, dtype=dt)

    def put(self, n: int | None, s: int | None, arg: np.ndarray, ties: int) -> None:
        if n is None:
            self.knots[0] = arg
            return
        self.ties += ties
        if self.stage is not None:
            self.stage[n, s] = arg
        if s == 0:
            self.knots[n + 1] = arg


def major_rhs(problem: GridProblem, tab, theta0, phi0_idx, phi_idx):
    """Right-hand side of the major system.

    ``phi0_idx is None`` selects the pointwise minimum over A0 (value solve);
    returns ``(R, argmin or None, ties)``.
    """
    model = problem.model
    H0 = tab.f0 + problem.major_jumps(tab.q0, theta0)
    if model.alpha0_free:
        L = problem.minor_flow(theta0, policy_rates(tab.q[:, 0], phi_idx))
        if phi0_idx is None:
            h, arg, ties = argmin_with_ties(H0)
            return h + L, arg, ties
        return select(H0, phi0_idx) + L, None, 0
    Hfull = np.stack([H0[b] + problem.minor_flow(theta0, policy_rates(tab.q[:, b], phi_idx)) for b in range(H0.shape[0])])
    if phi0_idx is None:
        h, arg, ties = argmin_with_ties(Hfull)
        return h, arg, ties
    return select(Hfull, phi0_idx), None, 0


def minor_brackets(problem: GridProblem, tab, theta, phi0_idx) -> np.ndarray:
    qb, fb = minor_tables(tab, phi0_idx, problem.model.alpha0_free)
    return fb + problem.tagged_jumps(theta, qb), qb


def minor_rhs(problem: GridProblem, tab, theta, phi0_idx, phi_idx, phibar_idx):
    """Right-hand side of the minor (tagged player) system.

    ``phibar_idx is None`` selects the pointwise minimum over A.
    """
    H, qb = minor_brackets(problem, tab, theta, phi0_idx)
    if phibar_idx is None:
        h, arg, ties = argmin_with_ties(H)
    else:
        h, arg, ties = select(H, phibar_idx), None, 0
    mj = problem.major_jumps_minor(theta, major_policy_rates(tab.q0, phi0_idx))
    fld = problem.field_jumps(theta, policy_rates(qb, phi_idx))
    return (h + mj) + fld, arg, ties


# -- driver ------------------------------------------------------------------------


def time_grid(t0: float, t1: float, steps: int) -> np.ndarray:
    return np.linspace(t0, t1, steps + 1)


def default_steps(model: ModelSpec, N: int, duration: float) -> int:
    return max(100, int(math.ceil(10.0 * model.rate_bound * duration * N)))


def saved_knots(steps: int, save_every: int) -> np.ndarray:
    keep = np.arange(0, steps + 1, max(1, int(save_every)))
    if keep[-1] != steps:
        keep = np.append(keep, steps)
    return keep


def integrate_backward(
    rhs: Callable[[int, int, float, np.ndarray], np.ndarray],
    terminal: np.ndarray,
    times: np.ndarray,
    save_every: int,
    threshold: Callable[[], float],
) -> tuple[np.ndarray, np.ndarray]:
    """Classical RK4 from ``times[-1]`` down to ``times[0]``.

    Stage 0 sits at ``t_{n+1}``, stages 1 and 2 at the midpoint and stage 3 at
    ``t_n``.  ``threshold()`` is re-read after every step; exceeding it
    raises :class:`UnstableIntegration`.  Returns (saved knot indices, saved values).
    """
    steps = len(times) - 1
    keep = saved_knots(steps, save_every)
    out = np.empty((len(keep),) + terminal.shape)
    slot = {int(k): s for s, k in enumerate(keep)}
    theta = np.array(terminal, dtype=float)
    if steps in slot:
        out[slot[steps]] = theta
    for n in range(steps - 1, -1, -1):
        t_hi, t_lo = float(times[n + 1]), float(times[n])
        h = t_hi - t_lo
        t_mid = 0.5 * (t_lo + t_hi)
        k1 = rhs(n, 0, t_hi, theta)
        k2 = rhs(n, 1, t_mid, theta + (0.5 * h) * k1)
        k3 = rhs(n, 2, t_mid, theta + (0.5 * h) * k2)
        k4 = rhs(n, 3, t_lo, theta + h * k3)
        theta = theta + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        peak = float(np.max(np.abs(theta), initial=0.0))
        limit = threshold()
        if not math.isfinite(peak) or peak > limit:
            raise UnstableIntegration(
                f"values reached {peak:.3g} > {limit:.3g} at t={t_lo:.6g} with {steps} steps",
                suggested_steps=2 * steps,
            )
        if n in slot:
            out[slot[n]] = theta
    return keep, out
