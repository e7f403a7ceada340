"""Feedback policies for the major and minor players.

A policy returns *action indices* into its :class:`~mfgmm.model.ActionSet`.
Index tables have shape ``(M0, P)`` for the major player (state ``i0``, grid
point) and ``(M, M0, P)`` for a minor player (own state ``i``, major state
``i0``, grid point).

Solvers consume a policy through :meth:`Policy.bind`, which fixes the time
grid and simplex grid of one solve and answers "which table at RK stage
``s`` of step ``n``".
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .model import ActionSet, ModelSpec, SimplexGrid, check_simplex, interpolate

ROLES = ("major", "minor")


def _state_shape(role: str, M0: int, M: int) -> tuple[int, ...]:
    if role == "major":
        return (M0,)
    if role == "minor":
        return (M, M0)
    raise ValueError(f"role must be 'major' or 'minor', got {role!r}")


def index_dtype(n_actions: int):
    return np.int8 if n_actions <= 127 else np.int32


def knot_of(times: np.ndarray, t) -> np.ndarray:
    """Knot whose value holds at time ``t``: on ``(t_k, t_{k+1}]`` the value of
    knot ``k+1`` is used, and knot 0 at ``t <= t_0``."""
    k = np.searchsorted(times, t, side="left")
    return np.clip(k, 0, len(times) - 1)


class Policy:
    """Base class. Subclasses implement :meth:`evaluate`."""

    role: str
    actions: ActionSet
    M0: int
    M: int
    time_independent: bool = False

    def evaluate(self, t, x) -> np.ndarray:
        """Action indices at times ``t`` and points ``x`` of shape ``(n, M-1)``.

        Returns ``(M0, n)`` (major) or ``(M, M0, n)`` (minor).
        """
        raise NotImplementedError

    @property
    def state_shape(self) -> tuple[int, ...]:
        return _state_shape(self.role, self.M0, self.M)

    def bind(self, times: np.ndarray, grid: SimplexGrid) -> "BoundPolicy":
        return BoundPolicy(self, times, grid)

    def action_values(self, t, x) -> np.ndarray:
        """Action coordinates at ``(t, x)``; shape ``state_shape + (n, dim)``."""
        return self.actions.points[self.evaluate(t, x)]

    def check_model(self, model: ModelSpec) -> None:
        if self.actions != (model.A0 if self.role == "major" else model.A):
            raise ValueError(f"{self.role} policy uses a different action set than the model")
        if (self.M0, self.M) != (model.M0, model.M):
            raise ValueError("policy state counts do not match the model")


class BoundPolicy:
    """A policy attached to one (time grid, simplex grid) pair."""

    def __init__(self, policy: Policy, times: np.ndarray, grid: SimplexGrid):
        self.policy = policy
        self.times = times
        self.grid = grid
        self._static = None
        self._mode = "evaluate"
        if isinstance(policy, FeedbackPolicy) and policy.grid == grid:
            if policy.stage_table is not None and np.array_equal(policy.times, times):
                self._mode = "stage"
            else:
                self._mode = "knot"
        elif policy.time_independent:
            self._static = policy.evaluate(0.0, grid.points)

    def at(self, n: int | None, s: int | None, t: float) -> np.ndarray:
        """Index table for RK stage ``s`` of step ``n`` (from knot ``n+1`` down to ``n``).

        ``n=None`` asks for the knot holding at ``t``.
        """
        if self._static is not None:
            return self._static
        p = self.policy
        if n is None:
            return self.at_knot(int(knot_of(self.times, t)))
        if self._mode == "stage":
            return p.stage_table[n, s]
        if self._mode == "knot":
            return p.table[int(knot_of(p.times, t))]
        return p.evaluate(t, self.grid.points)

    def at_knot(self, k: int) -> np.ndarray:
        if self._static is not None:
            return self._static
        p = self.policy
        if self._mode in ("stage", "knot") and np.array_equal(p.times, self.times):
            return p.table[k]
        t = float(self.times[k])
        if self._mode == "evaluate":
            return p.evaluate(t, self.grid.points)
        return p.table[int(knot_of(p.times, t))]


class ConstantPolicy(Policy):
    """The same action everywhere (index into the action set)."""

    time_independent = True

    def __init__(self, role: str, actions: ActionSet, M0: int, M: int, index: int = 0):
        _state_shape(role, M0, M)
        if not 0 <= index < len(actions):
            raise IndexError(f"action index {index} outside 0..{len(actions) - 1}")
        self.role, self.actions, self.M0, self.M, self.index = role, actions, M0, M, int(index)

    @classmethod
    def for_model(cls, model: ModelSpec, role: str, index: int = 0) -> "ConstantPolicy":
        return cls(role, model.A0 if role == "major" else model.A, model.M0, model.M, index)

    def evaluate(self, t, x) -> np.ndarray:
        n = np.asarray(x).shape[0]
        return np.full(self.state_shape + (n,), self.index, dtype=index_dtype(len(self.actions)))

    def __repr__(self) -> str:
        return f"ConstantPolicy({self.role!r}, index={self.index})"


class CallablePolicy(Policy):
    """Policy given by a function returning action indices.

    ``fn(t, i0, x)`` for the major role, ``fn(t, i, i0, x)`` for the minor
    role; ``x`` has shape ``(n, M-1)`` and the result broadcasts to ``(n,)``.
    """

    def __init__(self, role: str, actions: ActionSet, M0: int, M: int, fn: Callable, time_independent: bool = False):
        _state_shape(role, M0, M)
        self.role, self.actions, self.M0, self.M, self.fn = role, actions, M0, M, fn
        self.time_independent = bool(time_independent)

    @classmethod
    def for_model(cls, model: ModelSpec, role: str, fn: Callable, time_independent: bool = False):
        return cls(role, model.A0 if role == "major" else model.A, model.M0, model.M, fn, time_independent)

    def evaluate(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        out = np.empty(self.state_shape + (n,), dtype=index_dtype(len(self.actions)))
        for states in np.ndindex(*self.state_shape):
            out[states] = np.broadcast_to(np.asarray(self.fn(t, *states, x)), (n,))
        if out.size and (out.min() < 0 or out.max() >= len(self.actions)):
            raise IndexError("policy function returned an action index outside the action set")
        return out


class TablePolicy(Policy):
    """Time-independent policy given by an index table on a grid."""

    time_independent = True

    def __init__(self, role: str, actions: ActionSet, grid: SimplexGrid, table, M0: int, M: int):
        self.role, self.actions, self.grid, self.M0, self.M = role, actions, grid, M0, M
        table = np.asarray(table)
        if table.shape != self.state_shape + (grid.size,):
            raise ValueError(f"table shape {table.shape} != {self.state_shape + (grid.size,)}")
        self.table = table.astype(index_dtype(len(actions)))

    def evaluate(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.table[..., self.grid.nearest_index(x)]


class FeedbackPolicy(Policy):
    """Action-index table on (time knot, state(s), grid point).

    Parameters
    ----------
    role : {"major", "minor"}
    actions : ActionSet
    grid : SimplexGrid
    times : ndarray, shape (n_knots,)
    table : ndarray, shape (n_knots,) + state_shape + (P,)
    stage_table : ndarray, shape (n_knots - 1, 4) + state_shape + (P,), optional
        Minimisers recorded at every RK stage of the solve that produced the
        policy.  When a later solve uses the same time grid and simplex grid
        it reads these instead of holding knot values, which reproduces the
        producing solve exactly.

    Off-grid ``x`` maps to the nearest grid node.  Time ``t`` in
    ``(t_k, t_{k+1}]`` uses knot ``k+1``.
    """

    def __init__(self, role, actions, grid, times, table, stage_table=None):
        self.role, self.actions, self.grid = role, actions, grid
        table = np.asarray(table)
        _state_shape(role, 1, 2)
        self.M = grid.M
        self.M0 = table.shape[1] if role == "major" else table.shape[2]
        if table.shape[1:] != self.state_shape + (grid.size,):
            raise ValueError(f"table shape {table.shape[1:]} does not match role {role!r} on {grid}")
        self.times = np.asarray(times, dtype=float)
        if len(self.times) != table.shape[0]:
            raise ValueError("one table slice per time knot required")
        self.table = table
        if stage_table is not None and stage_table.shape != (len(self.times) - 1, 4) + table.shape[1:]:
            raise ValueError("stage table shape mismatch")
        self.stage_table = stage_table

    def evaluate(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        node = self.grid.nearest_index(x)
        knot = knot_of(self.times, t)
        if np.ndim(knot) == 0:
            return self.table[int(knot)][..., node]
        knot = np.broadcast_to(knot, node.shape)
        if self.role == "major":
            picked = self.table[knot, :, node]
        else:
            picked = self.table[knot, :, :, node]
        return np.moveaxis(picked, 0, -1)

    def smooth_action_values(self, t, x) -> np.ndarray:
        """Interpolated action coordinates (numeric action sets only)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        k = int(knot_of(self.times, t))
        vals = self.actions.points[self.table[k]]
        vals = np.moveaxis(vals, -1, 0)
        out = interpolate(self.grid, vals, check_simplex(x))
        return np.moveaxis(np.asarray(out), 0, -1)

    def knot_policy(self) -> "FeedbackPolicy":
        """Same knot values without stage records."""
        return FeedbackPolicy(self.role, self.actions, self.grid, self.times, self.table)

    def at_time(self, t: float) -> np.ndarray:
        return self.table[int(knot_of(self.times, t))]

    def __repr__(self) -> str:
        return f"FeedbackPolicy({self.role!r}, {self.grid!r}, knots={len(self.times)})"


def default_policies(model: ModelSpec) -> tuple[ConstantPolicy, ConstantPolicy]:
    """Lexicographic-first actions everywhere."""
    return ConstantPolicy.for_model(model, "major"), ConstantPolicy.for_model(model, "minor")
