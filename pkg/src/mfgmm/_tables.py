"""Batch tabulation of model primitives over every state and action.

All solvers consume the model through these arrays, so each callable is
evaluated once per (time, point set) instead of once per index.
"""

from __future__ import annotations

import threading
import weakref
from dataclasses import dataclass

import numpy as np

from .model import ModelSpec


@dataclass(frozen=True)
class RateTables:
    """Rates and running costs at one time for a batch of ``n`` points.

    ``q`` and ``f`` carry a major-action axis of length 1 when the model is
    ``alpha0_free``.

    q0 : (|A0|, M0, M0, n)
    q  : (|A|, B0, M0, M, M, n)
    f0 : (|A0|, M0, n)
    f  : (|A|, B0, M0, M, n)
    """

    q0: np.ndarray
    q: np.ndarray
    f0: np.ndarray
    f: np.ndarray


def _eval(fn, shape, *args) -> np.ndarray:
    out = np.asarray(fn(*args), dtype=float)
    return np.array(np.broadcast_to(out, shape), dtype=float)


def tabulate(model: ModelSpec, t, x: np.ndarray) -> RateTables:
    """Evaluate q0, q, f0, f on every (state, action) combination.

    ``t`` is a scalar or an array of shape ``(n,)``; ``x`` has shape ``(n, M-1)``.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    M0, M = model.M0, model.M
    A0, A = model.A0, model.A
    B0 = 1 if model.alpha0_free else len(A0)
    q0 = np.empty((len(A0), M0, M0, n))
    f0 = np.empty((len(A0), M0, n))
    for b, a0 in enumerate(A0):
        for i0 in range(M0):
            f0[b, i0] = _eval(model.f0, (n,), t, i0, a0, x)
            for j0 in range(M0):
                q0[b, i0, j0] = _eval(model.q0, (n,), t, i0, j0, a0, x)
    q = np.empty((len(A), B0, M0, M, M, n))
    f = np.empty((len(A), B0, M0, M, n))
    for c, a in enumerate(A):
        for b in range(B0):
            a0 = A0[b]
            for i0 in range(M0):
                for i in range(M):
                    f[c, b, i0, i] = _eval(model.f, (n,), t, i, a, i0, a0, x)
                    for j in range(M):
                        q[c, b, i0, i, j] = _eval(model.q, (n,), t, i, j, a, i0, a0, x)
    return RateTables(q0=q0, q=q, f0=f0, f=f)


def tabulate_costs(model: ModelSpec, t, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Running costs only: ``f0`` as (|A0|, M0, n) and ``f`` as (|A|, B0, M0, M, n)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    M0, M = model.M0, model.M
    B0 = 1 if model.alpha0_free else len(model.A0)
    f0 = np.empty((len(model.A0), M0, n))
    for b, a0 in enumerate(model.A0):
        for i0 in range(M0):
            f0[b, i0] = _eval(model.f0, (n,), t, i0, a0, x)
    f = np.empty((len(model.A), B0, M0, M, n))
    for c, a in enumerate(model.A):
        for b in range(B0):
            for i0 in range(M0):
                for i in range(M):
                    f[c, b, i0, i] = _eval(model.f, (n,), t, i, a, i0, model.A0[b], x)
    return f0, f


def terminal(model: ModelSpec, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Terminal costs ``g0`` with shape (M0, n) and ``g`` with shape (M, M0, n)."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    g0 = np.stack([_eval(model.g0, (n,), i0, x) for i0 in range(model.M0)])
    g = np.stack([np.stack([_eval(model.g, (n,), i, i0, x) for i0 in range(model.M0)]) for i in range(model.M)])
    return g0, g


_cache: "weakref.WeakKeyDictionary[ModelSpec, dict]" = weakref.WeakKeyDictionary()
_lock = threading.Lock()
_MAX_ENTRIES = 4096


def grid_tables(model: ModelSpec, t: float, grid) -> RateTables:
    """:func:`tabulate` on the points of ``grid``, memoised per model.

    Time-homogeneous models share one entry for all ``t``.
    """
    key = (grid.M, grid.K, None if model.time_homogeneous else float(t))
    with _lock:
        store = _cache.setdefault(model, {})
        hit = store.get(key)
    if hit is not None:
        return hit
    tables = tabulate(model, t, grid.points)
    for arr in (tables.q0, tables.q, tables.f0, tables.f):
        arr.setflags(write=False)
    with _lock:
        if len(store) >= _MAX_ENTRIES:
            store.clear()
        store[key] = tables
    return tables


def grid_terminal(model: ModelSpec, grid) -> tuple[np.ndarray, np.ndarray]:
    key = ("terminal", grid.M, grid.K)
    with _lock:
        store = _cache.setdefault(model, {})
        hit = store.get(key)
    if hit is None:
        hit = terminal(model, grid.points)
        for arr in hit:
            arr.setflags(write=False)
        with _lock:
            store[key] = hit
    return hit


def cost_sup(model: ModelSpec, grid, times) -> tuple[float, float, float, float]:
    """Sup norms of (f0, f, g0, g) over the grid, both action sets and ``times``."""
    sf0 = sf = 0.0
    seen = set()
    for t in times:
        tab = grid_tables(model, t, grid)
        if id(tab) in seen:
            continue
        seen.add(id(tab))
        sf0 = max(sf0, float(np.max(np.abs(tab.f0), initial=0.0)))
        sf = max(sf, float(np.max(np.abs(tab.f), initial=0.0)))
    g0, g = grid_terminal(model, grid)
    return sf0, sf, float(np.max(np.abs(g0), initial=0.0)), float(np.max(np.abs(g), initial=0.0))
