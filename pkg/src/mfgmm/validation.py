"""Argument checks shared by the estimator layer and the command line."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .exceptions import BadParameter, ModelError
from .model import ModelSpec, check_simplex
from .policies import Policy, default_policies


def check_model(model) -> ModelSpec:
    if not isinstance(model, ModelSpec):
        raise TypeError(f"expected a ModelSpec, got {type(model).__name__}")
    return model


def check_resolution(K, name: str = "K", minimum: int = 2) -> int:
    if isinstance(K, bool) or int(K) != K:
        raise BadParameter(f"{name} must be an integer, got {K!r}")
    K = int(K)
    if K < minimum:
        raise BadParameter(f"{name} must be >= {minimum}, got {K}")
    return K


def check_time_steps(steps) -> int | None:
    if steps is None:
        return None
    return check_resolution(steps, "time_steps", 1)


def check_damping(w) -> float:
    w = float(w)
    if not 0.0 < w <= 1.0:
        raise BadParameter(f"damping must lie in (0, 1], got {w}")
    return w


def check_role(role: str) -> str:
    if role not in ("major", "minor"):
        raise BadParameter(f"role must be 'major' or 'minor', got {role!r}")
    return role


def check_policies(model: ModelSpec, policies: Sequence[Policy] | None, n: int = 2) -> tuple[Policy, ...]:
    """Default lexicographic-first policies when ``policies`` is None; otherwise
    check each one against the model."""
    if policies is None:
        return default_policies(model)
    pols = tuple(policies)
    if len(pols) not in (2, 3) or len(pols) < n:
        raise BadParameter(f"expected {n} policies, got {len(pols)}")
    for p in pols:
        if not isinstance(p, Policy):
            raise TypeError(f"expected a Policy, got {type(p).__name__}")
        p.check_model(model)
    return pols


def check_points(model: ModelSpec, x) -> np.ndarray:
    """Points of the simplex as a ``(n, M-1)`` array."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1) if model.M > 2 or x.size == 1 else x.reshape(-1, 1)
    if x.shape[-1] != model.M - 1:
        raise ModelError(f"points need {model.M - 1} coordinates, got shape {x.shape}")
    return check_simplex(x)
