"""Finite-population versus mean-field comparisons.

The mean-field reference is a high-resolution exact solve on ``P^{K_ref}``:
finite-player costs and values converge uniformly to their mean-field
counterparts, so a large ``K_ref`` stands in for the limit without Monte Carlo
noise.  Errors are sup norms over the ``t = 0`` slice at the points of
``P^N``.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._parallel import effective_threads
from .exceptions import BadParameter, InfeasibleN
from .model import ModelSpec, interpolate, simplex_grid, states_consistent
from .nplayer import ValueTable, simulate_paths, solve_cost_ode, solve_value_ode
from .policies import Policy

__all__ = [
    "DEFAULT_GRID_CAP",
    "StudyResult",
    "DeviationGain",
    "cost_convergence_study",
    "value_convergence_study",
    "successive_gaps",
    "fit_loglog",
    "approx_nash_check",
]

DEFAULT_GRID_CAP = 200_000
FIT_FLOOR = 1e-10


@dataclass
class StudyResult:
    """Per-N sup-norm errors against the reference and their log-log fits.

    ``slope``/``intercept`` refer to the major errors, ``slope_minor``/
    ``intercept_minor`` to the tagged minor player.  A fit with fewer than two
    errors above 1e-10 is reported as NaN with ``slope_defined`` false.
    """

    kind: str
    N_list: list[int]
    errors_major: np.ndarray
    errors_minor: np.ndarray
    runtimes: np.ndarray
    slope: float
    intercept: float
    slope_minor: float
    intercept_minor: float
    slope_defined: bool
    slope_minor_defined: bool
    config: dict = field(default_factory=dict)

    def error(self, N: int, role: str = "major") -> float:
        k = self.N_list.index(int(N))
        return float((self.errors_major if role == "major" else self.errors_minor)[k])


def fit_loglog(N_list: Sequence[int], errors: Sequence[float]) -> tuple[float, float, bool]:
    """Least-squares line through ``(log N, log error)`` for errors above 1e-10."""
    N = np.asarray(N_list, dtype=float)
    e = np.asarray(errors, dtype=float)
    keep = e > FIT_FLOOR
    if np.count_nonzero(keep) < 2:
        return math.nan, math.nan, False
    slope, intercept = np.polyfit(np.log(N[keep]), np.log(e[keep]), 1)
    return float(slope), float(intercept), True


def _normalise(model: ModelSpec, N_list, K_ref: int, cap: int) -> list[int]:
    Ns = sorted({int(n) for n in N_list})
    if not Ns:
        raise BadParameter("N_list is empty")
    if Ns[0] < 1:
        raise BadParameter("every N must be >= 1")
    if K_ref < Ns[-1]:
        raise BadParameter(f"K_ref={K_ref} must be at least max(N_list)={Ns[-1]}")
    for n in Ns + [K_ref]:
        size = math.comb(n + model.M - 1, model.M - 1)
        if size > cap:
            raise InfeasibleN(f"P^{n} has {size} points, above the cap {cap}")
    return Ns


def _compare(table: ValueTable, ref: ValueTable) -> float:
    """Sup over the t=0 slice of ``table`` of the gap to ``ref`` at the same points."""
    grid, rgrid = table.grid, ref.grid
    pts = grid.points
    if rgrid.K % grid.K == 0:
        at = ref.initial[..., rgrid.index_of(pts)]
    else:
        at = np.asarray(interpolate(rgrid, ref.initial, pts))
    gap = np.abs(table.initial - at)
    if table.role == "minor":
        gap = gap[np.broadcast_to(states_consistent(grid)[:, None, :], gap.shape)]
    return float(np.max(gap, initial=0.0))


def _run(kind, model, solve, Ns, K_ref, time_steps, threads, reference, config) -> StudyResult:
    ref = reference if reference is not None else solve(K_ref)

    def one(n):
        t = time.perf_counter()
        major, minor = solve(n)
        return _compare(major, ref[0]), _compare(minor, ref[1]), time.perf_counter() - t

    nthreads = effective_threads(threads)
    if nthreads > 1 and len(Ns) > 1:
        with ThreadPoolExecutor(max_workers=nthreads) as ex:
            out = list(ex.map(one, Ns))
    else:
        out = [one(n) for n in Ns]
    e0 = np.array([o[0] for o in out])
    e = np.array([o[1] for o in out])
    rt = np.array([o[2] for o in out])
    s0, c0, ok0 = fit_loglog(Ns, e0)
    s1, c1, ok1 = fit_loglog(Ns, e)
    cfg = {"kind": kind, "model": model.name, "params": dict(model.params), "T": model.T, "N_list": Ns, "K_ref": K_ref,
           "time_steps": time_steps, **config}
    return StudyResult(kind, Ns, e0, e, rt, s0, c0, s1, c1, ok0, ok1, cfg)


def cost_convergence_study(
    model: ModelSpec,
    policies: Sequence[Policy],
    N_list: Sequence[int],
    K_ref: int = 128,
    time_steps: int | None = None,
    *,
    grid_cap: int = DEFAULT_GRID_CAP,
    threads: int | None = None,
    reference: tuple[ValueTable, ValueTable] | None = None,
) -> StudyResult:
    """Sup-norm gap between finite-player costs and the reference costs.

    Parameters
    ----------
    policies : (phi0, phi) or (phi0, phi, phibar)
        Fixed feedback strategies, evaluable on every grid; ``phibar`` drives
        the tagged minor player.
    N_list : sequence of int
        Sorted and deduplicated before use.
    K_ref : int
        Resolution of the reference solve, at least ``max(N_list)``.
    time_steps : int, optional
        Steps for every solve; the default scales with each grid's ``N``.
    reference : (major, minor) tables, optional
        Precomputed reference solves, reused as is.

    Raises
    ------
    InfeasibleN
        If any grid exceeds ``grid_cap`` points.
    """
    Ns = _normalise(model, N_list, int(K_ref), grid_cap)
    pols = tuple(policies)
    if len(pols) == 2:
        pols = pols + (pols[1],)

    def solve(n):
        return (
            solve_cost_ode(model, "major", pols[:2], n, time_steps),
            solve_cost_ode(model, "minor", pols, n, time_steps),
        )

    return _run("cost", model, solve, Ns, int(K_ref), time_steps, threads, reference, {})


def value_convergence_study(
    model: ModelSpec,
    policies: Sequence[Policy],
    N_list: Sequence[int],
    K_ref: int = 128,
    time_steps: int | None = None,
    *,
    grid_cap: int = DEFAULT_GRID_CAP,
    threads: int | None = None,
    reference: tuple[ValueTable, ValueTable] | None = None,
) -> StudyResult:
    """As :func:`cost_convergence_study` for the value functions.

    The major value is computed against ``phi`` and the minor value against
    ``(phi0, phi)``.  No rate is implied; the errors are expected to decrease.
    """
    Ns = _normalise(model, N_list, int(K_ref), grid_cap)
    phi0, phi = tuple(policies)[:2]

    def solve(n):
        return (
            solve_value_ode(model, "major", phi, n, time_steps, record_stages=False)[0],
            solve_value_ode(model, "minor", (phi0, phi), n, time_steps, record_stages=False)[0],
        )

    return _run("value", model, solve, Ns, int(K_ref), time_steps, threads, reference, {})


def successive_gaps(
    model: ModelSpec, policies: Sequence[Policy], N_list: Sequence[int], *, role: str = "major", kind: str = "value",
    time_steps: int | None = None,
) -> np.ndarray:
    """``sup |W^N - W^{2N}|`` at ``t = 0`` over the points of ``P^N`` for each ``N``.

    ``W`` is the value (``kind="value"``) or the cost (``kind="cost"``) of ``role``.
    """
    pols = tuple(policies)
    phi0, phi = pols[:2]

    def solve(n):
        if kind == "value":
            arg = phi if role == "major" else (phi0, phi)
            return solve_value_ode(model, role, arg, n, time_steps, record_stages=False)[0]
        arg = (phi0, phi) if role == "major" else (phi0, phi, pols[2] if len(pols) > 2 else phi)
        return solve_cost_ode(model, role, arg, n, time_steps)

    out = []
    for n in sorted({int(v) for v in N_list}):
        out.append(_compare(solve(n), solve(2 * n)))
    return np.array(out)


@dataclass
class DeviationGain:
    """Cost change from one unilateral deviation, estimated with common random numbers.

    ``gain = J(deviation) - J(equilibrium)``; a negative gain means the
    deviation pays off.
    """

    role: str
    gain: float
    se: float
    baseline: float
    deviated: float
    n_paths: int


def approx_nash_check(
    model: ModelSpec,
    phi0: Policy,
    phi: Policy,
    N: int,
    deviations: Sequence[tuple[str, Policy]],
    n_paths: int,
    seed: int,
    *,
    i0: int = 0,
    i: int = 0,
    x0=None,
    threads: int | None = None,
) -> list[DeviationGain]:
    """Monte Carlo gains of unilateral deviations in the ``N + 1`` player game.

    Each deviation is ``("major", policy)`` for the major player or
    ``("minor", policy)`` for minor player 1.  Baseline and deviation runs use
    the same seed, so identical policies give a gain of exactly zero.
    """
    base = simulate_paths(model, (phi0, phi), N, n_paths, seed, i0=i0, i=i, x0=x0, threads=threads)
    out = []
    for role, dev in deviations:
        if role == "major":
            run = simulate_paths(model, (dev, phi), N, n_paths, seed, i0=i0, i=i, x0=x0, threads=threads)
            key = "major"
        elif role == "minor":
            run = simulate_paths(model, (phi0, phi, dev), N, n_paths, seed, i0=i0, i=i, x0=x0, threads=threads)
            key = "tagged"
        else:
            raise BadParameter(f"deviation role must be 'major' or 'minor', got {role!r}")
        d = run.costs[key] - base.costs[key]
        se = float(np.std(d, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
        out.append(
            DeviationGain(role, float(np.mean(d)), se, float(np.mean(base.costs[key])), float(np.mean(run.costs[key])), n_paths)
        )
    return out
