"""Game primitives, simplex-grid combinatorics and pointwise hypothesis checks.

States are 0-based throughout: the major player lives in ``{0, .., M0-1}`` and
a minor player in ``{0, .., M-1}``.  A distribution over minor states is
stored by its first ``M-1`` coordinates; the mass of the last state is
``1 - sum(x)``.

Model plug-in interface
-----------------------
Rate and cost callables are evaluated in batch.  ``t`` is a float or an array
broadcastable against ``x[..., 0]``; ``x`` has shape ``(..., M-1)``; states are
Python ints; actions are 1-D float arrays (one point of the action set).  The
return value must broadcast to ``x.shape[:-1]``.

    q0(t, i0, j0, a0, x)           major jump rate i0 -> j0
    q(t, i, j, a, i0, a0, x)       minor jump rate i -> j
    f0(t, i0, a0, x)               major running cost
    f(t, i, a, i0, a0, x)          minor running cost
    g0(i0, x)                      major terminal cost
    g(i, i0, x)                    minor terminal cost
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .exceptions import (
    Alpha0DependenceDetected,
    ExtinctionViolated,
    GridTooLarge,
    HypothesisViolation,
    InvalidShift,
    NegativeOffDiagonal,
    OutOfSimplex,
    RateBoundExceeded,
    RowSumNonzero,
)

ROW_SUM_TOL = 1e-12
SIMPLEX_TOL = 1e-9
MAX_GRID_POINTS = 2_000_000


class ActionSet:
    """Finite, lexicographically ordered set of action points.

    The ordering makes "first minimiser" a deterministic tie-break.
    """

    def __init__(self, points: Any):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 0:
            pts = pts.reshape(1, 1)
        elif pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.shape[0] == 0:
            from .exceptions import NoActions

            raise NoActions("action set must be nonempty")
        order = np.lexsort(pts.T[::-1])
        pts = pts[order]
        if len(pts) > 1 and np.any(np.all(np.diff(pts, axis=0) == 0, axis=1)):
            raise ValueError("action set contains duplicate points")
        pts.setflags(write=False)
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, index: int) -> np.ndarray:
        return self.points[index]

    def __iter__(self):
        return iter(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, ActionSet) and np.array_equal(self.points, other.points)

    def __hash__(self) -> int:
        return hash(self.points.tobytes())

    def __repr__(self) -> str:
        return f"ActionSet({self.points.tolist()})"


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Primitives of a finite-state game with one major and many minor players.

    Attributes
    ----------
    q0, q : rate callables ``q0(t, i0, j0, a0, x)`` and ``q(t, i, j, a, i0, a0, x)``.
    f0, f, g0, g : running and terminal costs.
    rate_bound : declared bound ``C`` on every rate; drives step sizes and thinning.
    extinction_eps : minor rates out of a state vanish once its mass drops
        below this level; 0 disables the check.
    alpha0_free : the minor rates and running cost ignore the major action;
        required by the minor HJB, the master system and best responses.
    time_homogeneous : the primitives do not depend on ``t``; solvers then
        evaluate rate and cost tables once instead of at every RK stage.
    """

    M0: int
    M: int
    T: float
    A0: ActionSet
    A: ActionSet
    q0: Callable[..., Any]
    q: Callable[..., Any]
    f0: Callable[..., Any]
    f: Callable[..., Any]
    g0: Callable[..., Any]
    g: Callable[..., Any]
    rate_bound: float
    extinction_eps: float = 0.0
    alpha0_free: bool = True
    time_homogeneous: bool = False
    name: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.M0 < 1 or self.M < 2:
            raise ValueError("need M0 >= 1 and M >= 2")
        if not self.T >= 0:
            raise ValueError("horizon T must be nonnegative")
        if not self.rate_bound > 0:
            raise ValueError("rate_bound must be positive")
        if self.extinction_eps < 0:
            raise ValueError("extinction_eps must be nonnegative")

    def with_horizon(self, T: float) -> "ModelSpec":
        return replace(self, T=float(T), params={**self.params, "T": float(T)})

    def replace(self, **changes: Any) -> "ModelSpec":
        return replace(self, **changes)


def _as_batch(value: Any, shape: tuple[int, ...]) -> np.ndarray:
    return np.broadcast_to(np.asarray(value, dtype=float), shape)


def full_distribution(x: np.ndarray) -> np.ndarray:
    """Append the implied mass of the last state: ``(..., M-1) -> (..., M)``."""
    x = np.asarray(x, dtype=float)
    return np.concatenate([x, 1.0 - x.sum(axis=-1, keepdims=True)], axis=-1)


def e_shift(i: int, j: int, M: int) -> np.ndarray:
    """Displacement of the empirical measure when one player jumps ``i -> j``.

    Returns ``1[j != M-1] e_j - 1[i != M-1] e_i`` in ``R^(M-1)``.
    """
    if not (0 <= i < M and 0 <= j < M):
        raise InvalidShift(f"states ({i}, {j}) outside 0..{M - 1}")
    if i == j:
        raise InvalidShift("shift needs i != j")
    out = np.zeros(M - 1)
    if j != M - 1:
        out[j] += 1.0
    if i != M - 1:
        out[i] -= 1.0
    return out


class SimplexGrid:
    """The lattice ``{k/K : k in N^(M-1), sum(k) <= K}``.

    Points are ranked by the combinatorial number system applied to the
    strictly increasing sequence ``c_m = k_1 + .. + k_m + (m - 1)``, which is the
    colexicographic order of the corresponding ``(M-1)``-subsets.
    """

    def __init__(self, M: int, K: int, max_points: int = MAX_GRID_POINTS):
        if M < 2 or K < 1:
            raise ValueError("simplex grid needs M >= 2 and K >= 1")
        size = math.comb(K + M - 1, M - 1)
        if size > max_points:
            raise GridTooLarge(f"grid (M={M}, K={K}) has {size} points > cap {max_points}")
        self.M = int(M)
        self.K = int(K)
        self.size = size
        self._binom = np.array(
            [[math.comb(n, r) for r in range(M)] for n in range(K + M)], dtype=np.int64
        )
        counts = self._enumerate()
        ranks = self.rank(counts)
        order = np.argsort(ranks)
        counts = counts[order]
        if not np.array_equal(self.rank(counts), np.arange(size)):
            raise AssertionError("simplex ranking is not a bijection")
        counts.setflags(write=False)
        self.counts = counts
        full = np.concatenate([counts, K - counts.sum(axis=1, keepdims=True)], axis=1)
        full.setflags(write=False)
        self.full_counts = full
        pts = counts / K
        pts.setflags(write=False)
        self.points = pts

    def _enumerate(self) -> np.ndarray:
        d = self.M - 1
        rows = [c for c in itertools.product(range(self.K + 1), repeat=d) if sum(c) <= self.K] if d <= 3 else list(self._compositions(d, self.K))
        return np.array(rows, dtype=np.int64).reshape(-1, d)

    @staticmethod
    def _compositions(d: int, budget: int):
        if d == 0:
            yield ()
            return
        for k in range(budget + 1):
            for rest in SimplexGrid._compositions(d - 1, budget - k):
                yield (k,) + rest

    def __len__(self) -> int:
        return self.size

    def __eq__(self, other: object) -> bool:
        return isinstance(other, SimplexGrid) and (self.M, self.K) == (other.M, other.K)

    def __hash__(self) -> int:
        return hash((self.M, self.K))

    def __repr__(self) -> str:
        return f"SimplexGrid(M={self.M}, K={self.K}, size={self.size})"

    def rank(self, counts: Any) -> np.ndarray:
        """Index of integer count vectors ``(..., M-1)``."""
        k = np.asarray(counts, dtype=np.int64)
        c = np.cumsum(k, axis=-1) + np.arange(self.M - 1)
        out = np.zeros(k.shape[:-1], dtype=np.int64)
        for m in range(self.M - 1):
            out = out + self._binom[c[..., m], m + 1]
        return out

    def unrank(self, n: int) -> np.ndarray:
        if not 0 <= n < self.size:
            raise IndexError(f"rank {n} outside grid of size {self.size}")
        r = int(n)
        c = [0] * (self.M - 1)
        top = self.K + self.M - 2
        for m in range(self.M - 1, 0, -1):
            v = top
            while self._binom[v, m] > r:
                v -= 1
            c[m - 1] = v
            r -= int(self._binom[v, m])
            top = v - 1
        s = np.array(c) - np.arange(self.M - 1)
        return np.diff(s, prepend=0)

    def index_of(self, x: Any) -> np.ndarray:
        """Rank of points given as coordinates on the lattice (exact multiples of 1/K)."""
        y = np.asarray(x, dtype=float) * self.K
        k = np.rint(y).astype(np.int64)
        if np.any(np.abs(y - k) > 1e-7) or np.any(k < 0) or np.any(k.sum(axis=-1) > self.K):
            raise OutOfSimplex("point is not on the grid")
        return self.rank(k)

    def nearest_index(self, x: Any) -> np.ndarray:
        """Rank of a nearby lattice point (largest-remainder rounding of the full composition)."""
        full = full_distribution(check_simplex(x)) * self.K
        base = np.floor(full).astype(np.int64)
        deficit = self.K - base.sum(axis=-1)
        rem = full - base
        order = np.argsort(-rem, axis=-1, kind="stable")
        bump = np.zeros_like(base)
        ranks_in_order = np.argsort(order, axis=-1, kind="stable")
        bump = (ranks_in_order < deficit[..., None]).astype(np.int64)
        k = (base + bump)[..., :-1]
        return self.rank(k)

    @cached_property
    def shift_index(self) -> np.ndarray:
        """``S[i, j, p]``: rank of ``x_p + e_ij / K``; ``p`` itself when the jump is
        impossible (``i == j`` or no player in state ``i``)."""
        M, P = self.M, self.size
        S = np.tile(np.arange(P), (M, M, 1))
        for i in range(M):
            for j in range(M):
                if i == j:
                    continue
                ok = self.full_counts[:, i] >= 1
                k = self.counts.copy()
                if j != M - 1:
                    k[:, j] += 1
                if i != M - 1:
                    k[:, i] -= 1
                S[i, j, ok] = self.rank(k[ok])
        S.setflags(write=False)
        return S

    def interpolation_weights(self, x: Any) -> tuple[np.ndarray, np.ndarray]:
        """Corner ranks and weights for multilinear interpolation at ``x``.

        Corners outside the simplex are dropped and the remaining weights are
        renormalised.  Returns arrays of shape ``(n, 2**(M-1))``.
        """
        x = check_simplex(np.atleast_2d(np.asarray(x, dtype=float)))
        d = self.M - 1
        y = x * self.K
        base = np.clip(np.floor(y), 0, self.K - 1).astype(np.int64)
        frac = y - base
        corners = np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)
        k = base[:, None, :] + corners[None, :, :]
        w = np.prod(np.where(corners[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=-1)
        inside = k.sum(axis=-1) <= self.K
        w = np.where(inside, w, 0.0)
        w = w / w.sum(axis=1, keepdims=True)
        k = np.where(inside[..., None], k, 0)
        return self.rank(k), w


def simplex_grid(M: int, K: int, max_points: int = MAX_GRID_POINTS) -> SimplexGrid:
    return _cached_grid(int(M), int(K), int(max_points))


_GRID_CACHE: dict[tuple[int, int, int], SimplexGrid] = {}


def _cached_grid(M: int, K: int, max_points: int) -> SimplexGrid:
    key = (M, K, max_points)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        grid = SimplexGrid(M, K, max_points)
        if len(_GRID_CACHE) > 64:
            _GRID_CACHE.clear()
        _GRID_CACHE[key] = grid
    return grid


def check_simplex(x: Any, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate points of the simplex and clip round-off below ``tol``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        raise OutOfSimplex("x must have M-1 coordinates")
    if np.any(~np.isfinite(x)) or np.any(x < -tol) or np.any(x.sum(axis=-1) > 1.0 + tol):
        raise OutOfSimplex(f"point outside the simplex beyond tolerance {tol}")
    x = np.clip(x, 0.0, None)
    s = x.sum(axis=-1, keepdims=True)
    return x / np.maximum(s, 1.0)


def interpolate(grid: SimplexGrid, table: Any, x: Any) -> np.ndarray | float:
    """Evaluate a grid table at arbitrary points of the simplex.

    ``table`` has the grid index on its last axis.  A single point returns the
    leading shape of ``table`` (a float for a 1-D table); ``n`` points append an
    axis of length ``n``.
    """
    table = np.asarray(table, dtype=float)
    if table.shape[-1] != grid.size:
        raise ValueError(f"table last axis {table.shape[-1]} != grid size {grid.size}")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    idx, w = grid.interpolation_weights(x)
    out = np.sum(table[..., idx] * w, axis=-1)
    if single:
        out = out[..., 0]
        return float(out) if out.ndim == 0 else out
    return out


# -- hypothesis validation ---------------------------------------------------


@dataclass(frozen=True)
class SamplePlan:
    """Where the rate functions are probed: ``n_times`` equispaced times, the
    lattice ``P^K`` and ``n_random`` uniform points of the simplex."""

    n_times: int = 5
    K: int = 8
    n_random: int = 64
    seed: int = 0
    max_violations: int = 200


@dataclass
class ValidationReport:
    model: str
    violations: list[HypothesisViolation] = field(default_factory=list)
    n_points: int = 0

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def raise_if_failed(self) -> None:
        if self.violations:
            raise self.violations[0]

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "ok": self.ok,
            "n_points": self.n_points,
            "violations": [v.to_dict() for v in self.violations],
        }


def sample_points(M: int, plan: SamplePlan) -> np.ndarray:
    lattice = simplex_grid(M, plan.K).points
    rng = np.random.default_rng(plan.seed)
    rand = rng.dirichlet(np.ones(M), size=plan.n_random)[:, :-1] if plan.n_random else np.empty((0, M - 1))
    return np.vstack([lattice, rand])


def validate_rates(model: ModelSpec, sample_plan: SamplePlan | None = None) -> ValidationReport:
    """Check the Q-matrix, rate-bound, extinction and control-independence
    hypotheses at every sampled point.  An empty report means all pass."""
    plan = sample_plan or SamplePlan()
    x = sample_points(model.M, plan)
    n = x.shape[0]
    times = np.linspace(0.0, model.T, plan.n_times) if plan.n_times > 1 else np.array([0.0])
    report = ValidationReport(model=model.name, n_points=n * len(times))
    found: list[HypothesisViolation] = report.violations

    def add(v: HypothesisViolation) -> None:
        if len(found) < plan.max_violations:
            found.append(v)

    def witness(t, p, **kw):
        return {"t": float(t), "x": x[p].tolist(), **kw}

    C = model.rate_bound
    xfull = full_distribution(x)
    for t in times:
        for a0i, a0 in enumerate(model.A0):
            Q0 = np.zeros((n, model.M0, model.M0))
            for i0 in range(model.M0):
                for j0 in range(model.M0):
                    Q0[:, i0, j0] = _as_batch(model.q0(t, i0, j0, a0, x), (n,))
            _check_qmatrix(Q0, "q0", lambda p, r, c: witness(t, p, i0=r, j0=c, a0=a0.tolist()), add, C)
            for i0 in range(model.M0):
                for ai, a in enumerate(model.A):
                    Q = np.zeros((n, model.M, model.M))
                    for i in range(model.M):
                        for j in range(model.M):
                            Q[:, i, j] = _as_batch(model.q(t, i, j, a, i0, a0, x), (n,))
                    wit = lambda p, r, c: witness(t, p, i=r, j=c, a=a.tolist(), i0=i0, a0=a0.tolist())
                    _check_qmatrix(Q, "q", wit, add, C)
                    if model.extinction_eps > 0:
                        _check_extinction(Q, xfull, model.extinction_eps, wit, add)
                    if model.alpha0_free and a0i > 0:
                        ref = model.A0[0]
                        for i in range(model.M):
                            fa = _as_batch(model.f(t, i, a, i0, a0, x), (n,))
                            fr = _as_batch(model.f(t, i, a, i0, ref, x), (n,))
                            bad = np.nonzero(fa != fr)[0]
                            if bad.size:
                                add(Alpha0DependenceDetected("f reads the major control", wit(bad[0], i, i)))
                            for j in range(model.M):
                                qr = _as_batch(model.q(t, i, j, a, i0, ref, x), (n,))
                                bad = np.nonzero(Q[:, i, j] != qr)[0]
                                if bad.size:
                                    add(Alpha0DependenceDetected("q reads the major control", wit(bad[0], i, j)))
    return report


def _check_qmatrix(Q: np.ndarray, label: str, wit, add, bound: float) -> None:
    n, m, _ = Q.shape
    off = ~np.eye(m, dtype=bool)
    neg = np.argwhere((Q < 0) & off[None])
    for p, r, c in neg[:5]:
        add(NegativeOffDiagonal(f"{label}[{r},{c}] = {Q[p, r, c]:.3g} < 0", wit(p, int(r), int(c))))
    rows = Q.sum(axis=2)
    bad = np.argwhere(np.abs(rows) > ROW_SUM_TOL)
    for p, r in bad[:5]:
        add(RowSumNonzero(f"{label} row {r} sums to {rows[p, r]:.3g}", wit(p, int(r), int(r))))
    over = np.argwhere(np.abs(Q) > bound * (1 + 1e-12))
    for p, r, c in over[:5]:
        add(RateBoundExceeded(f"|{label}[{r},{c}]| = {abs(Q[p, r, c]):.3g} > {bound}", wit(p, int(r), int(c))))


def _check_extinction(Q: np.ndarray, xfull: np.ndarray, eps: float, wit, add) -> None:
    m = Q.shape[1]
    for i in range(m):
        low = xfull[:, i] < eps
        for j in range(m):
            if i == j or (i < m - 1 and j == m - 1):
                continue
            bad = np.nonzero(low & (Q[:, i, j] != 0))[0]
            if bad.size:
                add(ExtinctionViolated(f"state {i} nearly extinct but q[{i},{j}] = {Q[bad[0], i, j]:.3g}", wit(bad[0], i, j)))


def states_consistent(grid: SimplexGrid) -> np.ndarray:
    """``mask[i, p]``: at least one player occupies state ``i`` at grid point ``p``."""
    return (grid.full_counts >= 1).T


__all__: Sequence[str] = [
    "ActionSet",
    "ModelSpec",
    "SimplexGrid",
    "SamplePlan",
    "ValidationReport",
    "check_simplex",
    "e_shift",
    "full_distribution",
    "interpolate",
    "simplex_grid",
    "validate_rates",
]
