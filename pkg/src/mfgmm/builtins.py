"""Built-in games used by the tests and the command line.

``two_two``
    Two-state epidemic with an attacker.  Minor players are susceptible (0) or
    infected (1) and choose a protection effort ``a in {0, 1}`` that halves
    their infection rate and speeds up recovery.  The major player is dormant
    (0) or attacking (1); its effort ``a0 in {0, 1}`` pushes it toward the
    attacking state, and it is rewarded for a large infected fraction.
``cyber4``
    Four minor states ``DI, DS, UI, US`` (defended/undefended x infected/
    susceptible) and two attack regimes for the major player.  Minor players
    request a change of defence status with ``a = 1``.  Out-rates of a state
    are switched off smoothly below the extinction threshold.
``decoupled``
    Three minor states and two major states with no interaction at all: minor
    primitives ignore ``(i0, x)`` and major primitives ignore ``x``.  Every
    value function reduces to a plain finite-state control problem.
"""

from __future__ import annotations

import math
from typing import Any, Callable, Mapping

import numpy as np

from .exceptions import BadParameter, UnknownModel
from .model import ActionSet, ModelSpec, SamplePlan, validate_rates


def _zeros(x):
    return np.zeros(np.shape(x)[:-1])


def _ones(x):
    return np.ones(np.shape(x)[:-1])


def _merge(name: str, defaults: Mapping[str, float], params: Mapping[str, Any] | None) -> dict[str, float]:
    out = dict(defaults)
    for key, value in (params or {}).items():
        if key not in out:
            raise BadParameter(f"{name}: unknown parameter {key!r} (known: {sorted(out)})")
        try:
            v = float(value)
        except (TypeError, ValueError):
            raise BadParameter(f"{name}: parameter {key!r} must be a number, got {value!r}") from None
        if not math.isfinite(v):
            raise BadParameter(f"{name}: parameter {key!r} must be finite")
        out[key] = v
    if out["T"] < 0:
        raise BadParameter(f"{name}: horizon T must be nonnegative")
    return out


def _nonnegative(name: str, p: Mapping[str, float], keys: str) -> None:
    for k in keys.split():
        if p[k] < 0:
            raise BadParameter(f"{name}: parameter {k!r} must be nonnegative, got {p[k]}")


def _q_from_offdiag(offdiag: Callable[[int, int], Any], i: int, j: int, M: int, x):
    """Q-matrix entry from an off-diagonal rate function; the diagonal is the
    negated row sum, accumulated in a fixed order."""
    if i != j:
        return offdiag(i, j) * _ones(x)
    total = _zeros(x)
    for k in range(M):
        if k != i:
            total = total + offdiag(i, k)
    return -total


TWO_TWO_DEFAULTS = {
    "T": 1.0,
    "beta0": 0.3,
    "beta1": 0.7,
    "kappa": 1.0,
    "rho": 0.5,
    "nu": 1.0,
    "c_inf": 1.0,
    "c_act": 0.3,
    "g_inf": 0.5,
    "c_a0": 0.4,
    "reward": 1.0,
    "g_reward": 0.5,
}


def two_two(params: Mapping[str, Any] | None = None) -> ModelSpec:
    p = _merge("two_two", TWO_TWO_DEFAULTS, params)
    _nonnegative("two_two", p, "beta0 beta1 kappa rho nu c_inf c_act g_inf c_a0 reward g_reward")

    def infected(x):
        return 1.0 - x[..., 0]

    def q0(t, i0, j0, a0, x):
        a0 = a0[0]
        up = p["nu"] * (0.2 + a0)
        down = p["nu"] * (1.2 - a0)
        rate = {(0, 1): up, (1, 0): down}
        return _q_from_offdiag(lambda a, b: rate[(a, b)], i0, j0, 2, x)

    def q(t, i, j, a, i0, a0, x):
        a = a[0]
        lam = (p["beta0"] + p["beta1"] * infected(x)) * (1.0 + p["kappa"] * i0) * (1.0 - 0.5 * a)
        rec = p["rho"] * (1.0 + a) * _ones(x)
        rate = {(0, 1): lam, (1, 0): rec}
        return _q_from_offdiag(lambda u, v: rate[(u, v)], i, j, 2, x)

    def f0(t, i0, a0, x):
        return p["c_a0"] * a0[0] - p["reward"] * infected(x) ** 2

    def f(t, i, a, i0, a0, x):
        return (p["c_inf"] * (i == 1) + p["c_act"] * a[0]) * _ones(x)

    def g0(i0, x):
        return -p["g_reward"] * infected(x) ** 2

    def g(i, i0, x):
        return p["g_inf"] * (i == 1) * _ones(x)

    lam_max = (p["beta0"] + p["beta1"]) * (1.0 + p["kappa"])
    bound = max(lam_max, 2.0 * p["rho"], 1.2 * p["nu"], 1e-12)
    return ModelSpec(
        M0=2, M=2, T=p["T"], A0=ActionSet([0.0, 1.0]), A=ActionSet([0.0, 1.0]),
        q0=q0, q=q, f0=f0, f=f, g0=g0, g=g, rate_bound=bound,
        extinction_eps=0.0, alpha0_free=True, time_homogeneous=True,
        name="two_two", params=p,
    )


CYBER4_DEFAULTS = {
    "T": 1.0,
    "eps": 0.01,
    "v_D": 0.1,
    "v_U": 0.4,
    "kappa": 1.0,
    "beta_DD": 0.3,
    "beta_UD": 0.4,
    "beta_DU": 0.3,
    "beta_UU": 0.5,
    "rec_D": 0.5,
    "rec_U": 0.3,
    "lam": 0.8,
    "nu0": 1.0,
    "k_D": 0.4,
    "k_I": 1.0,
    "c_a0": 0.2,
    "reward": 1.0,
}

DI, DS, UI, US = range(4)


def cyber4(params: Mapping[str, Any] | None = None) -> ModelSpec:
    p = _merge("cyber4", CYBER4_DEFAULTS, params)
    _nonnegative("cyber4", p, " ".join(k for k in CYBER4_DEFAULTS if k != "T"))
    eps = p["eps"]

    def full(x):
        return np.concatenate([x, 1.0 - x.sum(axis=-1, keepdims=True)], axis=-1)

    def ramp(xi):
        if eps == 0:
            return np.ones_like(xi)
        return np.clip((xi - eps) / eps, 0.0, 1.0)

    def offdiag(i, j, a, i0, xf):
        attack = 1.0 + p["kappa"] * i0
        if (i, j) == (DS, DI):
            r = p["v_D"] * attack + p["beta_DD"] * xf[..., DI] + p["beta_UD"] * xf[..., UI]
        elif (i, j) == (US, UI):
            r = p["v_U"] * attack + p["beta_DU"] * xf[..., DI] + p["beta_UU"] * xf[..., UI]
        elif (i, j) == (DI, DS):
            r = p["rec_D"] * np.ones(xf.shape[:-1])
        elif (i, j) == (UI, US):
            r = p["rec_U"] * np.ones(xf.shape[:-1])
        elif (i, j) in ((DI, UI), (UI, DI), (DS, US), (US, DS)):
            r = p["lam"] * a * np.ones(xf.shape[:-1])
        else:
            r = np.zeros(xf.shape[:-1])
        return r * ramp(xf[..., i])

    def q(t, i, j, a, i0, a0, x):
        xf = full(np.asarray(x, dtype=float))
        return _q_from_offdiag(lambda u, v: offdiag(u, v, a[0], i0, xf), i, j, 4, x)

    def q0(t, i0, j0, a0, x):
        a0 = a0[0]
        rate = {(0, 1): p["nu0"] * (0.5 + a0), (1, 0): p["nu0"] * (1.0 - 0.5 * a0)}
        return _q_from_offdiag(lambda u, v: rate[(u, v)], i0, j0, 2, x)

    def infected(x):
        xf = full(np.asarray(x, dtype=float))
        return xf[..., DI] + xf[..., UI]

    def f0(t, i0, a0, x):
        return p["c_a0"] * a0[0] * (1.0 + i0) - p["reward"] * infected(x)

    def f(t, i, a, i0, a0, x):
        return (p["k_D"] * (i in (DI, DS)) + p["k_I"] * (i in (DI, UI))) * _ones(x)

    def g0(i0, x):
        return _zeros(x)

    def g(i, i0, x):
        return _zeros(x)

    attack = 1.0 + p["kappa"]
    out_DS = p["v_D"] * attack + max(p["beta_DD"], p["beta_UD"]) + p["lam"]
    out_US = p["v_U"] * attack + max(p["beta_DU"], p["beta_UU"]) + p["lam"]
    out_DI = p["rec_D"] + p["lam"]
    out_UI = p["rec_U"] + p["lam"]
    bound = max(out_DS, out_US, out_DI, out_UI, 1.5 * p["nu0"], 1e-12)
    return ModelSpec(
        M0=2, M=4, T=p["T"], A0=ActionSet([0.0, 1.0]), A=ActionSet([0.0, 1.0]),
        q0=q0, q=q, f0=f0, f=f, g0=g0, g=g, rate_bound=bound,
        extinction_eps=eps, alpha0_free=True, time_homogeneous=True,
        name="cyber4", params=p,
    )


DECOUPLED_DEFAULTS = {
    "T": 1.0,
    "r01": 0.6,
    "r12": 0.4,
    "r20": 0.8,
    "r10": 0.3,
    "boost": 1.0,
    "major_up": 0.5,
    "major_down": 0.7,
    "c_state": 1.0,
    "c_act": 0.5,
    "c_a0": 0.3,
    "g_state": 0.5,
}


def decoupled(params: Mapping[str, Any] | None = None) -> ModelSpec:
    p = _merge("decoupled", DECOUPLED_DEFAULTS, params)
    _nonnegative("decoupled", p, " ".join(k for k in DECOUPLED_DEFAULTS if k != "T"))

    def minor_rate(i, j, a):
        base = {(0, 1): p["r01"], (1, 2): p["r12"], (2, 0): p["r20"], (1, 0): p["r10"]}.get((i, j), 0.0)
        if (i, j) in ((1, 0), (2, 0)):
            base = base * (1.0 + p["boost"] * a)
        return base

    def q(t, i, j, a, i0, a0, x):
        return _q_from_offdiag(lambda u, v: minor_rate(u, v, a[0]), i, j, 3, x)

    def q0(t, i0, j0, a0, x):
        a0 = a0[0]
        rate = {(0, 1): p["major_up"] * (1.0 + a0), (1, 0): p["major_down"] * (1.0 - 0.5 * a0)}
        return _q_from_offdiag(lambda u, v: rate[(u, v)], i0, j0, 2, x)

    def f0(t, i0, a0, x):
        return (p["c_a0"] * a0[0] + float(i0 == 0)) * _ones(x)

    def f(t, i, a, i0, a0, x):
        return (p["c_state"] * i + p["c_act"] * a[0]) * _ones(x)

    def g0(i0, x):
        return 0.5 * i0 * _ones(x)

    def g(i, i0, x):
        return p["g_state"] * i * _ones(x)

    bound = max(
        p["r01"],
        p["r12"] + p["r10"] * (1 + p["boost"]),
        p["r20"] * (1 + p["boost"]),
        2.0 * p["major_up"],
        p["major_down"],
        1e-12,
    )
    return ModelSpec(
        M0=2, M=3, T=p["T"], A0=ActionSet([0.0, 1.0]), A=ActionSet([0.0, 0.5, 1.0]),
        q0=q0, q=q, f0=f0, f=f, g0=g0, g=g, rate_bound=bound,
        extinction_eps=0.0, alpha0_free=True, time_homogeneous=True,
        name="decoupled", params=p,
    )


BUILTINS: dict[str, Callable[[Mapping[str, Any] | None], ModelSpec]] = {
    "two_two": two_two,
    "cyber4": cyber4,
    "decoupled": decoupled,
}

_LIGHT_PLAN = SamplePlan(n_times=2, K=4, n_random=8, seed=0, max_violations=1)


def load_builtin(name: str, params: Mapping[str, Any] | None = None, *, validate: bool = True) -> ModelSpec:
    """Build one of the built-in models with optional parameter overrides.

    Parameters
    ----------
    name : {"two_two", "cyber4", "decoupled"}
    params : mapping, optional
        Flat overrides of the model's numeric parameters; ``"T"`` sets the horizon.
    validate : bool
        Run a light :func:`validate_rates` pass and reject the overrides if
        it finds a violation.
    """
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise UnknownModel(f"unknown model {name!r}; choose from {sorted(BUILTINS)}") from None
    model = factory(params)
    if validate:
        report = validate_rates(model, _LIGHT_PLAN)
        if not report.ok:
            v = report.violations[0]
            raise BadParameter(f"{name}: parameters break a model hypothesis: {v}")
    return model
