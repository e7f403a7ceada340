"""Solvers for finite-state mean field games with a major player.

Modules
-------
model       game primitives, hypothesis checks, simplex grids
nplayer     exact finite-player costs and values, simulation, product-chain oracle
meanfield   measure flow and piecewise-deterministic limit simulation
hjb         mean-field value functions and the coupled master system
equilibrium best responses, exploitability, damped fixed-point iteration
chaos       finite-population versus mean-field studies
cli         command-line front end
"""

__version__ = "0.1.0"

from .builtins import BUILTINS, load_builtin
from .chaos import StudyResult, approx_nash_check, cost_convergence_study, value_convergence_study
from .equilibrium import EquilibriumResult, best_response, exploitability, solve_equilibrium
from .estimators import EquilibriumSolver, HJBSolver, MasterSolver
from .hjb import MasterSolution, dpp_check, hamiltonian_min, solve_hjb, solve_master
from .meanfield import flow, mc_cost, simulate_pdmp, vector_field
from .model import ActionSet, ModelSpec, SamplePlan, SimplexGrid, e_shift, interpolate, simplex_grid, validate_rates
from .nplayer import (
    ValueGrid,
    ValueTable,
    apply_generator,
    discrete_gradient,
    oracle_expected_cost,
    simulate_paths,
    solve_cost_ode,
    solve_value_ode,
)
from .policies import CallablePolicy, ConstantPolicy, FeedbackPolicy, TablePolicy, default_policies

__all__ = [
    "ActionSet", "BUILTINS", "CallablePolicy", "ConstantPolicy", "EquilibriumResult", "EquilibriumSolver",
    "FeedbackPolicy", "HJBSolver", "MasterSolution", "MasterSolver", "ModelSpec", "SamplePlan", "SimplexGrid",
    "StudyResult", "TablePolicy", "ValueGrid", "ValueTable", "apply_generator", "approx_nash_check",
    "best_response", "cost_convergence_study", "default_policies", "discrete_gradient", "dpp_check", "e_shift",
    "exploitability", "flow", "hamiltonian_min", "interpolate", "load_builtin", "mc_cost", "oracle_expected_cost",
    "simplex_grid", "simulate_paths", "simulate_pdmp", "solve_cost_ode", "solve_equilibrium", "solve_hjb",
    "solve_master", "solve_value_ode", "validate_rates", "value_convergence_study", "vector_field",
]
