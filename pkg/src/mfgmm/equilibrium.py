"""Best responses, exploitability and the damped fixed-point iteration.

Policies are discrete, so damping acts on value tables: the blended tables
``B_k = w V_k + (1 - w) B_{k-1}`` are turned back into feedback policies by
taking the knot-wise minimisers of their Hamiltonian brackets.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _ode
from ._parallel import effective_threads
from .exceptions import BadParameter, NonConvergenceWarning
from .hjb import _check_K, _require_free, extract_policy, solve_hjb
from .model import ModelSpec, simplex_grid, states_consistent
from .nplayer import ValueGrid, solve_cost_ode
from .policies import FeedbackPolicy, Policy, default_policies

log = logging.getLogger(__name__)

__all__ = ["BestResponse", "EquilibriumResult", "best_response", "exploitability", "solve_equilibrium", "changed_fraction"]


@dataclass
class BestResponse:
    """Best-response policies together with the value tables they minimise."""

    phi0: FeedbackPolicy
    phi: FeedbackPolicy
    V0: ValueGrid
    V: ValueGrid

    def __iter__(self):
        yield self.phi0
        yield self.phi


def _steps(model: ModelSpec, K: int, time_steps: int | None) -> int:
    steps = _ode.default_steps(model, K, model.T) if time_steps is None else int(time_steps)
    if steps < 1:
        raise BadParameter("time_steps must be >= 1")
    return steps


def best_response(
    model: ModelSpec,
    phi0: Policy,
    phi: Policy,
    K: int,
    time_steps: int | None = None,
    *,
    threads: int | None = None,
) -> BestResponse:
    """Optimal feedback of the major player against ``phi`` and of a minor
    player against ``(phi0, phi)``.

    The two value solves share only immutable inputs and run concurrently
    when more than one thread is allowed.  The result unpacks as
    ``phi0_star, phi_star``.
    """
    _require_free(model, "best_response")
    K = _check_K(K)
    steps = _steps(model, K, time_steps)

    def major():
        return solve_hjb(model, "major", phi, K, steps)

    def minor():
        return solve_hjb(model, "minor", (phi0, phi), K, steps)

    if effective_threads(threads) > 1:
        with ThreadPoolExecutor(max_workers=2) as ex:
            f0, f = ex.submit(major), ex.submit(minor)
            (V0, b0), (V, b) = f0.result(), f.result()
    else:
        (V0, b0), (V, b) = major(), minor()
    return BestResponse(b0, b, V0, V)


def _gaps(model, phi0, phi, K, steps, V0: ValueGrid, V: ValueGrid) -> tuple[float, float]:
    J0 = solve_cost_ode(model, "major", (phi0, phi), K, steps)
    J = solve_cost_ode(model, "minor", (phi0, phi, phi), K, steps)
    e0 = float(np.max(J0.initial - V0.initial))
    mask = J.valid_mask()
    e = float(np.max((J.initial - V.initial)[mask]))
    return e0, e


def exploitability(
    model: ModelSpec,
    phi0: Policy,
    phi: Policy,
    K: int,
    time_steps: int | None = None,
    *,
    threads: int | None = None,
) -> tuple[float, float]:
    """``(eps_major, eps_minor)``: largest gain from a unilateral deviation at ``t = 0``.

    ``eps_major = sup (J0(phi0, phi) - V0(phi))`` over ``(i0, x)`` and
    ``eps_minor = sup (J(phi0, phi, phi) - V(phi0, phi))`` over reachable
    ``(i, i0, x)``, both on ``P^K`` with the same time grid.  At a best
    response the costs and values are computed by identical arithmetic, so
    both entries are exactly zero.
    """
    K = _check_K(K)
    steps = _steps(model, K, time_steps)
    br = best_response(model, phi0, phi, K, steps, threads=threads)
    return _gaps(model, phi0, phi, K, steps, br.V0, br.V)


def _knot_tables(policy: Policy, role: str, times: np.ndarray, grid) -> np.ndarray:
    b = policy.bind(times, grid)
    return np.stack([b.at_knot(k) for k in range(len(times))])


def changed_fraction(old0, old, new0, new, valid: np.ndarray) -> float:
    """Fraction of policy entries that differ; minor entries count only where reachable.

    ``old0``/``new0`` are ``(knots, M0, P)``; ``old``/``new`` are
    ``(knots, M, M0, P)``; ``valid`` is the ``(M, M0, P)`` reachability mask.
    """
    n_major = old0.size
    mask = np.broadcast_to(valid, old.shape)
    n_minor = int(np.count_nonzero(mask))
    diff = int(np.count_nonzero(old0 != new0)) + int(np.count_nonzero((old != new) & mask))
    total = n_major + n_minor
    return diff / total if total else 0.0


@dataclass
class EquilibriumResult:
    """Output of :func:`solve_equilibrium`.

    Attributes
    ----------
    phi0, phi : FeedbackPolicy
        Knot policies of the returned iterate.
    V0, V : ValueGrid
        Best-response values against the returned iterate.
    residual_history : ndarray, shape (rows, 4)
        ``(iteration, changed_fraction, eps_major, eps_minor)``.  Row 0 holds
        the initial policies with ``changed_fraction = nan``; row ``k`` holds
        the iterate evaluated in iteration ``k``: the fraction of its entries
        that the best response changes and its exploitability.
    exploitability : (float, float)
    iterations : int
    converged : bool
    """

    phi0: FeedbackPolicy
    phi: FeedbackPolicy
    V0: ValueGrid
    V: ValueGrid
    residual_history: np.ndarray
    exploitability: tuple[float, float]
    iterations: int
    converged: bool
    info: dict = field(default_factory=dict)

    @property
    def final_residual(self) -> float:
        return float(self.residual_history[-1, 1]) if len(self.residual_history) > 1 else math.nan


def solve_equilibrium(
    model: ModelSpec,
    K: int,
    time_steps: int | None = None,
    damping: float = 0.5,
    tol: float = 0.0,
    max_iter: int = 50,
    init: tuple[Policy, Policy] | None = None,
    *,
    threads: int | None = None,
) -> EquilibriumResult:
    """Damped best-response iteration on ``P^K``.

    Iteration ``k`` evaluates the current policies ``phi_{k-1}``: best
    responses, their value tables and the exploitability.  If the best
    response changes at most a fraction ``tol`` of the policy entries the
    iteration stops and returns ``phi_{k-1}``.  Otherwise the value tables are
    blended, ``B_k = w V_k + (1 - w) B_{k-1}`` with ``B_1 = V_1``, and
    ``phi_k`` is read off ``B_k`` knot by knot.

    When no knot entry changes, the returned policies are the best responses
    themselves: identical knot tables that also carry the RK-stage minimisers,
    which makes them an exact fixed point of the discrete best-response map.

    Without convergence the iterate with the smallest ``max(eps)`` is
    returned with ``converged=False`` and a :class:`NonConvergenceWarning`.
    """
    _require_free(model, "solve_equilibrium")
    K = _check_K(K)
    if not (0.0 < damping <= 1.0):
        raise BadParameter(f"damping must lie in (0, 1], got {damping}")
    if tol < 0:
        raise BadParameter("tol must be nonnegative")
    if max_iter < 0:
        raise BadParameter("max_iter must be nonnegative")
    steps = _steps(model, K, time_steps)
    grid = simplex_grid(model.M, K)
    times = _ode.time_grid(0.0, model.T, steps)
    valid = states_consistent(grid)[:, None, :]
    phi0, phi = default_policies(model) if init is None else init

    def knots(p0, p):
        return _knot_tables(p0, "major", times, grid), _knot_tables(p, "minor", times, grid)

    def evaluate(p0, p):
        br = best_response(model, p0, p, K, steps, threads=threads)
        return br, _gaps(model, p0, p, K, steps, br.V0, br.V)

    cur0, cur = knots(phi0, phi)
    br, eps = evaluate(phi0, phi)
    rows = [(0, math.nan, eps[0], eps[1])]
    best = (max(eps), phi0, phi, br, eps)
    converged = False
    iterations = 0
    B0 = B = None
    for k in range(1, max_iter + 1):
        iterations = k
        res = changed_fraction(cur0, cur, br.phi0.table, br.phi.table, valid)
        rows.append((k, res, eps[0], eps[1]))
        log.info("iteration %d: changed %.6g, eps %.3g / %.3g", k, res, eps[0], eps[1])
        if res <= tol:
            converged = True
            best = (max(eps), phi0, phi, br, eps)
            if res == 0.0:
                # same knot tables plus the RK-stage minimisers: an exact fixed point of the discrete map
                br2, eps2 = evaluate(br.phi0, br.phi)
                if max(eps2) <= max(eps):
                    best = (max(eps2), br.phi0, br.phi, br2, eps2)
            break
        if k == max_iter:
            break
        if B0 is None:
            B0, B = br.V0.values, br.V.values
        else:
            B0 = damping * br.V0.values + (1.0 - damping) * B0
            B = damping * br.V.values + (1.0 - damping) * B
        phi0 = extract_policy(model, "major", grid, times, B0)
        phi = extract_policy(model, "minor", grid, times, B, phi0_table=phi0.table)
        cur0, cur = phi0.table, phi.table
        br, eps = evaluate(phi0, phi)
        if max(eps) < best[0]:
            best = (max(eps), phi0, phi, br, eps)
    _, rphi0, rphi, rbr, reps = best
    if not converged:
        warnings.warn(
            f"no fixed point after {max_iter} iterations; returning the least exploitable iterate",
            NonConvergenceWarning,
            stacklevel=2,
        )
    if not isinstance(rphi0, FeedbackPolicy) or rphi0.grid != grid:
        rphi0 = FeedbackPolicy("major", model.A0, grid, times, _knot_tables(rphi0, "major", times, grid))
        rphi = FeedbackPolicy("minor", model.A, grid, times, _knot_tables(rphi, "minor", times, grid))
    info = {"K": K, "time_steps": steps, "damping": damping, "tol": tol, "max_iter": max_iter}
    return EquilibriumResult(
        rphi0, rphi, rbr.V0, rbr.V, np.array(rows, dtype=float), (float(reps[0]), float(reps[1])), iterations, converged, info
    )
