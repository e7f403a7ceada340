"""Command-line front end.

``mfgmm <command> --config run.json [--out DIR] [--threads N] [--verbose]``

Commands: ``solve-hjb``, ``master``, ``equilibrium``, ``simulate``,
``chaos-study``, ``validate``.  Exit codes: 0 success, 2 configuration
error, 3 solver non-convergence (artifacts are still written), 4 model
validation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__
from ._parallel import set_threads
from .builtins import BUILTINS, load_builtin
from .exceptions import BadParameter, ConfigError, HypothesisViolation, MFGError, NonConvergenceWarning, UnknownModel
from .model import ModelSpec, SamplePlan, validate_rates

log = logging.getLogger("mfgmm")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_VALIDATION = 0, 2, 3, 4
COMMANDS = ("solve-hjb", "master", "equilibrium", "simulate", "chaos-study", "validate")
OUT_ENV = "MFGMM_OUT"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Section):
    name: str = "two_two"
    params: dict[str, float] = Field(default_factory=dict)

    @field_validator("name")
    @classmethod
    def _known(cls, v: str) -> str:
        if v not in BUILTINS:
            raise ValueError(f"unknown model {v!r}; choose from {sorted(BUILTINS)}")
        return v


class GridConfig(_Section):
    K: int = Field(16, ge=2)
    time_steps: Optional[int] = Field(None, ge=1)


class SolverConfig(_Section):
    damping: float = Field(0.5, gt=0.0, le=1.0)
    tol: float = Field(0.0, ge=0.0)
    max_iter: int = Field(50, ge=0)
    role: Literal["major", "minor"] = "major"


class SimulationConfig(_Section):
    n_paths: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0, le=2**64 - 1)
    mode: Literal["nplayer", "pair", "triple"] = "nplayer"
    N: int = Field(8, ge=1)
    i0: int = Field(0, ge=0)
    i: int = Field(0, ge=0)
    x0: Optional[list[float]] = None
    step: float = Field(1e-2, gt=0.0)
    n_output: int = Field(200, ge=2)
    keep_paths: bool = False
    policies: Literal["default", "master"] = "default"


class StudyConfig(_Section):
    kind: Literal["cost", "value"] = "cost"
    N_list: list[int] = Field(default_factory=lambda: [4, 8, 16, 32], min_length=1)
    K_ref: int = Field(128, ge=2)
    policies: Literal["default", "master"] = "default"

    @field_validator("N_list")
    @classmethod
    def _positive(cls, v: list[int]) -> list[int]:
        if any(n < 1 for n in v):
            raise ValueError("every N must be >= 1")
        return v


class OutputConfig(_Section):
    dir: str = "mfgmm_out"
    save_every: int = Field(1, ge=1)
    record_runtimes: bool = False


class RunConfig(_Section):
    """One JSON document configures a run; unknown keys are rejected."""

    model: ModelConfig = Field(default_factory=ModelConfig)
    horizon: Optional[float] = Field(None, ge=0.0)
    grid: GridConfig = Field(default_factory=GridConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    study: StudyConfig = Field(default_factory=StudyConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)


def load_config(path: str | os.PathLike | None) -> RunConfig:
    """Parse and validate a config file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def parse_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        parts = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            parts.append(f"{loc}: {err['msg']}")
        raise ConfigError("invalid config: " + "; ".join(parts)) from exc


# -- command implementations -------------------------------------------------------


def _model(cfg: RunConfig) -> ModelSpec:
    params = dict(cfg.model.params)
    if cfg.horizon is not None:
        params["T"] = cfg.horizon
    try:
        return load_builtin(cfg.model.name, params, validate=False)
    except (UnknownModel, BadParameter) as exc:
        raise ConfigError(str(exc)) from exc


def _policies(model: ModelSpec, cfg: RunConfig, which: str):
    from .hjb import solve_master
    from .policies import default_policies

    if which == "master":
        sol = solve_master(model, cfg.grid.K, cfg.grid.time_steps)
        return sol.phi0, sol.phi
    return default_policies(model)


def _cmd_validate(model, cfg, out: Path) -> tuple[int, dict]:
    from .io import write_json

    report = validate_rates(model, SamplePlan())
    write_json(out / "validation.json", report.to_dict())
    return (EXIT_OK if report.ok else EXIT_VALIDATION), {"violations": len(report.violations)}


def _cmd_solve_hjb(model, cfg, out):
    from .hjb import solve_hjb
    from .io import write_results

    phi0, phi = _policies(model, cfg, "default")
    role = cfg.solver.role
    arg = phi if role == "major" else (phi0, phi)
    table, policy = solve_hjb(model, role, arg, cfg.grid.K, cfg.grid.time_steps)
    write_results((table, policy), out, save_every=cfg.output.save_every)
    return EXIT_OK, {"role": role, "time_steps": table.info["time_steps"], "bound_ok": table.info["bound_ok"]}


def _cmd_master(model, cfg, out):
    from .hjb import solve_master
    from .io import write_master

    sol = solve_master(model, cfg.grid.K, cfg.grid.time_steps)
    write_master(sol, out, model_name=model.name, save_every=cfg.output.save_every)
    return EXIT_OK, {"tie_count": sol.info["tie_count"]}


def _cmd_equilibrium(model, cfg, out):
    from .equilibrium import solve_equilibrium
    from .io import write_equilibrium

    s = cfg.solver
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergenceWarning)
        res = solve_equilibrium(model, cfg.grid.K, cfg.grid.time_steps, s.damping, s.tol, s.max_iter)
    write_equilibrium(res, out, model_name=model.name, save_every=cfg.output.save_every)
    code = EXIT_OK if res.converged else EXIT_NONCONVERGENCE
    return code, {"converged": res.converged, "iterations": res.iterations, "exploitability": list(res.exploitability)}


def _cmd_simulate(model, cfg, out):
    from .io import write_pdmp, write_simulation
    from .meanfield import simulate_pdmp
    from .nplayer import simulate_paths

    s = cfg.simulation
    phi0, phi = _policies(model, cfg, s.policies)
    if s.mode == "nplayer":
        res = simulate_paths(model, (phi0, phi), s.N, s.n_paths, s.seed, i0=s.i0, i=s.i, x0=s.x0, keep_paths=False)
        write_simulation(res, out)
        summary = {k: v.as_dict() for k, v in res.summary.items()}
    else:
        x0 = s.x0 if s.x0 is not None else [1.0 if k == s.i else 0.0 for k in range(model.M - 1)]
        initial = (s.i0, x0) if s.mode == "pair" else (s.i0, s.i, x0)
        res = simulate_pdmp(model, s.mode, (phi0, phi), initial, s.n_paths, s.seed, step=s.step, n_output=s.n_output,
                            keep_paths=s.keep_paths)
        write_pdmp(res, out)
        summary = res.summary.__dict__
    return EXIT_OK, summary


def _cmd_chaos(model, cfg, out):
    from .chaos import cost_convergence_study, value_convergence_study
    from .io import write_study

    st = cfg.study
    pols = _policies(model, cfg, st.policies)
    study = cost_convergence_study if st.kind == "cost" else value_convergence_study
    res = study(model, pols, st.N_list, st.K_ref, cfg.grid.time_steps)
    write_study(res, out, record_runtimes=cfg.output.record_runtimes)
    return EXIT_OK, {"slope": res.slope, "slope_minor": res.slope_minor}


_DISPATCH = {
    "validate": _cmd_validate,
    "solve-hjb": _cmd_solve_hjb,
    "master": _cmd_master,
    "equilibrium": _cmd_equilibrium,
    "simulate": _cmd_simulate,
    "chaos-study": _cmd_chaos,
}


def run(command: str, cfg: RunConfig, out: Path, threads: int | None = None) -> int:
    """Execute one command and write its artifacts plus ``manifest.json``."""
    from .io import write_json

    if command not in _DISPATCH:
        raise ConfigError(f"unknown command {command!r}")
    start = time.perf_counter()
    set_threads(threads)
    try:
        model = _model(cfg)
        if command != "validate":
            report = validate_rates(model, SamplePlan(K=4, n_random=16))
            if not report.ok:
                write_json(out / "validation.json", report.to_dict())
                log.error("model validation failed: %s", report.violations[0])
                code, extra = EXIT_VALIDATION, {"violations": len(report.violations)}
            else:
                code, extra = _DISPATCH[command](model, cfg, out)
        else:
            code, extra = _DISPATCH[command](model, cfg, out)
    finally:
        set_threads(None)
    manifest = {
        "command": command,
        "config": cfg.model_dump(mode="json"),
        "version": __version__,
        "threads": threads,
        "wall_time_s": time.perf_counter() - start,
        "exit_code": code,
        "result": extra,
    }
    write_json(out / "manifest.json", manifest)
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfgmm", description="Finite-state mean field games with a major player.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="JSON run configuration")
        c.add_argument("--out", help="output directory (overrides the config and MFGMM_OUT)")
        c.add_argument("--threads", type=int, default=None, help="worker cap; never changes results")
        c.add_argument("--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        out = Path(args.out or os.environ.get(OUT_ENV) or cfg.output.dir)
        return run(args.command, cfg, out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HypothesisViolation as exc:
        print(f"model validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MFGError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
