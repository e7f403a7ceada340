"""Estimator-style wrappers over the functional solvers.

``fit(model)`` runs a solve and stores the result in trailing-underscore
attributes; ``predict(x, t)`` interpolates values and ``predict_action(x, t)``
returns nearest-node action indices.  Hyperparameters follow the usual
``get_params``/``set_params`` protocol.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import equilibrium, hjb
from .model import interpolate
from .nplayer import ValueTable
from .policies import FeedbackPolicy
from .validation import check_damping, check_model, check_points, check_policies, check_resolution, check_role, check_time_steps

__all__ = ["HJBSolver", "MasterSolver", "EquilibriumSolver"]


def _values_at(table: ValueTable, t: float, x: np.ndarray) -> np.ndarray:
    """Interpolated slice at ``t``: ``(n,) + state_shape``."""
    vals = np.asarray(interpolate(table.grid, table.at(t), x))
    return np.moveaxis(vals, -1, 0)


def _actions_at(policy: FeedbackPolicy, t: float, x: np.ndarray) -> np.ndarray:
    return np.moveaxis(policy.evaluate(t, x), -1, 0)


class _GridSolver(BaseEstimator):
    def _tables(self):
        raise NotImplementedError

    def predict(self, x, t: float = 0.0, role: str = "major") -> np.ndarray:
        """Values at points ``x`` (``(n, M-1)``) and time ``t``.

        Returns ``(n, M0)`` for the major role, ``(n, M, M0)`` for the minor role.
        """
        check_is_fitted(self, "model_")
        table, _ = self._tables()[check_role(role)]
        return _values_at(table, t, check_points(self.model_, x))

    def predict_action(self, x, t: float = 0.0, role: str = "major") -> np.ndarray:
        """Action indices of the nearest grid node at ``(t, x)``."""
        check_is_fitted(self, "model_")
        _, policy = self._tables()[check_role(role)]
        return _actions_at(policy, t, check_points(self.model_, x))


class HJBSolver(_GridSolver):
    """Mean-field value of one player against fixed opponents.

    Parameters
    ----------
    role : {"major", "minor"}
    K : int
        Grid resolution.
    time_steps : int, optional
    """

    def __init__(self, role: str = "major", K: int = 16, time_steps: int | None = None):
        self.role = role
        self.K = K
        self.time_steps = time_steps

    def fit(self, model, policies=None):
        """``policies`` is ``(phi0, phi)``; lexicographic-first when omitted."""
        model = check_model(model)
        role = check_role(self.role)
        K = check_resolution(self.K)
        steps = check_time_steps(self.time_steps)
        phi0, phi = check_policies(model, policies)[:2]
        arg = phi if role == "major" else (phi0, phi)
        self.value_, self.policy_ = hjb.solve_hjb(model, role, arg, K, steps)
        self.model_ = model
        return self

    def _tables(self):
        return {self.role: (self.value_, self.policy_)}

    def predict(self, x, t: float = 0.0, role: str | None = None) -> np.ndarray:
        return super().predict(x, t, self.role if role is None else role)

    def predict_action(self, x, t: float = 0.0, role: str | None = None) -> np.ndarray:
        return super().predict_action(x, t, self.role if role is None else role)


class MasterSolver(_GridSolver):
    """Joint backward sweep of the coupled major/minor system."""

    def __init__(self, K: int = 16, time_steps: int | None = None, check: bool = True):
        self.K = K
        self.time_steps = time_steps
        self.check = check

    def fit(self, model, y=None):
        model = check_model(model)
        self.solution_ = hjb.solve_master(model, check_resolution(self.K), check_time_steps(self.time_steps), check=self.check)
        self.model_ = model
        return self

    def _tables(self):
        s = self.solution_
        return {"major": (s.V0, s.phi0), "minor": (s.V, s.phi)}


class EquilibriumSolver(_GridSolver):
    """Damped best-response iteration."""

    def __init__(
        self,
        K: int = 16,
        time_steps: int | None = None,
        damping: float = 0.5,
        tol: float = 0.0,
        max_iter: int = 50,
        threads: int | None = None,
    ):
        self.K = K
        self.time_steps = time_steps
        self.damping = damping
        self.tol = tol
        self.max_iter = max_iter
        self.threads = threads

    def fit(self, model, init=None):
        model = check_model(model)
        init = None if init is None else check_policies(model, init)[:2]
        res = equilibrium.solve_equilibrium(
            model,
            check_resolution(self.K),
            check_time_steps(self.time_steps),
            check_damping(self.damping),
            float(self.tol),
            int(self.max_iter),
            init,
            threads=self.threads,
        )
        self.result_ = res
        self.exploitability_ = res.exploitability
        self.converged_ = res.converged
        self.n_iter_ = res.iterations
        self.model_ = model
        return self

    def _tables(self):
        r = self.result_
        return {"major": (r.V0, r.phi0), "minor": (r.V, r.phi)}
