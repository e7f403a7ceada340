"""Deterministic CSV/JSON persistence of results.

Numbers are written with 17 significant digits, so floats round-trip
exactly; rows are ordered by (time, i0, i, grid rank).  State labels are
0-based.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .chaos import StudyResult
from .equilibrium import EquilibriumResult
from .hjb import MasterSolution
from .meanfield import PdmpResult
from .nplayer import CostSummary, SimulationResult, ValueTable
from .policies import FeedbackPolicy

__all__ = [
    "fmt",
    "write_csv",
    "write_json",
    "write_value_table",
    "write_policy",
    "write_master",
    "write_equilibrium",
    "write_study",
    "write_simulation",
    "write_pdmp",
    "write_results",
    "read_csv",
]


def fmt(v: Any) -> str:
    """17 significant digits for floats, plain text for everything else."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return format(v, ".17g")
    if v is None:
        return ""
    return str(v)


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {path}: {exc}") from exc


def write_csv(path, header: list[str], rows: Iterable[Iterable[Any]]) -> Path:
    path = Path(path)
    _ensure_dir(path.parent)
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    _ensure_dir(path.parent)
    try:
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _state_columns(role: str) -> list[str]:
    return ["i0"] if role == "major" else ["i0", "i"]


def _x_columns(M: int) -> list[str]:
    return [f"x_{k + 1}" for k in range(M - 1)]


def _index_rows(role: str, times: np.ndarray, grid, M0: int):
    """Yield ``(knot, t, state labels, state index, rank, point)`` in file order."""
    M = grid.M
    pts = grid.points
    for k, t in enumerate(times):
        for i0 in range(M0):
            if role == "major":
                for r in range(grid.size):
                    yield k, t, (i0,), (i0,), r, pts[r]
            else:
                for i in range(M):
                    for r in range(grid.size):
                        yield k, t, (i0, i), (i, i0), r, pts[r]


def _policy_knots(policy: FeedbackPolicy, times: np.ndarray) -> np.ndarray:
    if np.array_equal(policy.times, times):
        return policy.table
    return np.stack([policy.at_time(float(t)) for t in times])


def write_value_table(table: ValueTable, path, policy: FeedbackPolicy | None = None) -> Path:
    """``t, i0[, i], x_1..x_{M-1}, value[, action_index]``, one row per saved index."""
    M0 = table.values.shape[1] if table.role == "major" else table.values.shape[2]
    header = ["t"] + _state_columns(table.role) + _x_columns(table.grid.M) + ["value"]
    acts = None
    if policy is not None:
        header.append("action_index")
        acts = _policy_knots(policy, table.times)

    def rows():
        for k, t, labels, idx, r, x in _index_rows(table.role, table.times, table.grid, M0):
            row = [float(t), *labels, *x.tolist(), float(table.values[(k, *idx, r)])]
            if acts is not None:
                row.append(int(acts[(k, *idx, r)]))
            yield row

    return write_csv(path, header, rows())


def write_policy(policy: FeedbackPolicy, path) -> Path:
    """``t, i0[, i], x_1..x_{M-1}, action_index, a_1..a_d`` at every knot."""
    d = policy.actions.dim
    header = ["t"] + _state_columns(policy.role) + _x_columns(policy.grid.M) + ["action_index"] + [f"a_{k + 1}" for k in range(d)]
    pts = policy.actions.points

    def rows():
        for k, t, labels, idx, r, x in _index_rows(policy.role, policy.times, policy.grid, policy.M0):
            a = int(policy.table[(k, *idx, r)])
            yield [float(t), *labels, *x.tolist(), a, *pts[a].tolist()]

    return write_csv(path, header, rows())


def _thin(table: ValueTable, every: int) -> ValueTable:
    if every <= 1:
        return table
    keep = np.arange(0, len(table.times), every)
    if keep[-1] != len(table.times) - 1:
        keep = np.append(keep, len(table.times) - 1)
    return ValueTable(table.role, table.grid, table.times[keep], table.values[keep], table.info)


def _thin_policy(policy: FeedbackPolicy, times: np.ndarray) -> FeedbackPolicy:
    return FeedbackPolicy(policy.role, policy.actions, policy.grid, times, _policy_knots(policy, times))


def _write_four(out: Path, V0, V, phi0, phi, every: int) -> list[Path]:
    V0, V = _thin(V0, every), _thin(V, every)
    return [
        write_value_table(V0, out / "major_value.csv", phi0),
        write_value_table(V, out / "minor_value.csv", phi),
        write_policy(_thin_policy(phi0, V0.times), out / "major_policy.csv"),
        write_policy(_thin_policy(phi, V.times), out / "minor_policy.csv"),
    ]


def write_master(sol: MasterSolution, out_dir, *, model_name: str | None = None, save_every: int = 1) -> list[Path]:
    """Four CSVs plus ``master.json`` {model, K, time_steps, tolerances, tie_count}."""
    out = Path(out_dir)
    files = _write_four(out, sol.V0, sol.V, sol.phi0, sol.phi, save_every)
    meta = {
        "model": model_name or sol.V0.info.get("model"),
        "K": sol.info["K"],
        "time_steps": sol.info["time_steps"],
        "tolerances": {"tie": sol.info["tie_tolerance"], "simplex": 1e-9},
        "tie_count": sol.info["tie_count"],
        "consistent": sol.info.get("consistent"),
        "tie_mismatches": sol.info.get("tie_mismatches"),
    }
    files.append(write_json(out / "master.json", meta))
    return files


def write_equilibrium(res: EquilibriumResult, out_dir, *, model_name: str | None = None, save_every: int = 1) -> list[Path]:
    """The master layout plus ``residuals.csv`` (iteration, changed_fraction, eps_major, eps_minor)."""
    out = Path(out_dir)
    files = _write_four(out, res.V0, res.V, res.phi0, res.phi, save_every)
    files.append(
        write_csv(
            out / "residuals.csv",
            ["iteration", "changed_fraction", "eps_major", "eps_minor"],
            ([int(r[0]), float(r[1]), float(r[2]), float(r[3])] for r in res.residual_history),
        )
    )
    meta = {
        "model": model_name or res.V0.info.get("model"),
        "K": res.info["K"],
        "time_steps": res.info["time_steps"],
        "tolerances": {"tol": res.info["tol"], "tie": 1e-12},
        "tie_count": int(res.V0.info.get("tie_count", 0)) + int(res.V.info.get("tie_count", 0)),
        "damping": res.info["damping"],
        "converged": res.converged,
        "iterations": res.iterations,
        "exploitability": list(res.exploitability),
    }
    files.append(write_json(out / "equilibrium.json", meta))
    return files


def write_study(res: StudyResult, out_dir, *, record_runtimes: bool = False) -> list[Path]:
    """``study.csv`` (N, error_major, error_minor, runtime_s) and ``study.json``.

    Wall-clock runtimes differ between runs, so the CSV column stays empty
    unless ``record_runtimes`` is set; they always go to the JSON record.
    """
    out = Path(out_dir)
    rows = (
        [int(n), float(a), float(b), float(r) if record_runtimes else None]
        for n, a, b, r in zip(res.N_list, res.errors_major, res.errors_minor, res.runtimes)
    )
    f1 = write_csv(out / "study.csv", ["N", "error_major", "error_minor", "runtime_s"], rows)
    meta = {
        "slope": res.slope,
        "intercept": res.intercept,
        "slope_defined": res.slope_defined,
        "slope_minor": res.slope_minor,
        "intercept_minor": res.intercept_minor,
        "slope_minor_defined": res.slope_minor_defined,
        "runtimes_s": res.runtimes,
        "config": res.config,
    }
    return [f1, write_json(out / "study.json", meta)]


def _summary(s: CostSummary, seed: int) -> dict:
    return {"mean": s.mean, "se": s.se, "n_paths": s.n_paths, "seed": int(seed)}


def write_simulation(res: SimulationResult, out_dir) -> list[Path]:
    """Per-path costs and final states in ``paths.csv``; summaries in ``summary.json``."""
    out = Path(out_dir)
    M = res.final_counts.shape[1] if res.final_counts.ndim == 2 else 0
    header = ["path", "cost_major", "cost_tagged", "cost_field", "final_i0", "final_i"] + [f"n_{k + 1}" for k in range(M)] + ["n_jumps"]
    rows = (
        [p, float(res.costs["major"][p]), float(res.costs["tagged"][p]), float(res.costs["field"][p]),
         int(res.final_major[p]), int(res.final_tagged[p]), *res.final_counts[p].tolist(), int(res.n_jumps[p])]
        for p in range(len(res.final_major))
    )
    f1 = write_csv(out / "paths.csv", header, rows)
    meta = {k: _summary(v, res.seed) for k, v in res.summary.items()}
    meta["N"] = res.N
    return [f1, write_json(out / "summary.json", meta)]


def write_pdmp(res: PdmpResult, out_dir) -> list[Path]:
    """Measure paths on the output grid (when kept) and the cost summary."""
    out = Path(out_dir)
    files = []
    M = res.final_measure.shape[1] + 1 if res.final_measure.ndim == 2 else 2
    if res.paths:
        triple = res.mode == "triple"
        header = ["path", "t", "i0"] + (["i"] if triple else []) + _x_columns(M)

        def rows():
            for path in res.paths:
                for t, x in zip(path.output_times, path.measure):
                    i0 = int(path.major_states[np.searchsorted(path.major_jump_times, t, side="right")])
                    row = [path.index, float(t), i0]
                    if triple:
                        row.append(int(path.tagged_states[np.searchsorted(path.tagged_jump_times, t, side="right")]))
                    yield row + x.tolist()

        files.append(write_csv(out / "pdmp_paths.csv", header, rows()))
    header = ["path", "cost", "final_i0", "final_i"] + _x_columns(M)
    files.append(
        write_csv(
            out / "pdmp_costs.csv",
            header,
            ([p, float(res.costs[p]), int(res.final_major[p]), int(res.final_tagged[p]), *res.final_measure[p].tolist()]
             for p in range(len(res.costs))),
        )
    )
    files.append(write_json(out / "summary.json", {**_summary(res.summary, res.seed), "mode": res.mode}))
    return files


def write_results(result: Any, out_dir, **kwargs) -> list[Path]:
    """Dispatch on the result type and write its file set into ``out_dir``."""
    if isinstance(result, EquilibriumResult):
        return write_equilibrium(result, out_dir, **kwargs)
    if isinstance(result, MasterSolution):
        return write_master(result, out_dir, **kwargs)
    if isinstance(result, StudyResult):
        return write_study(result, out_dir, **kwargs)
    if isinstance(result, SimulationResult):
        return write_simulation(result, out_dir)
    if isinstance(result, PdmpResult):
        return write_pdmp(result, out_dir)
    if isinstance(result, tuple) and len(result) == 2 and isinstance(result[0], ValueTable):
        table, policy = result
        role = table.role
        every = int(kwargs.get("save_every", 1))
        t = _thin(table, every)
        return [
            write_value_table(t, Path(out_dir) / f"{role}_value.csv", policy),
            write_policy(_thin_policy(policy, t.times), Path(out_dir) / f"{role}_policy.csv"),
        ]
    if isinstance(result, ValueTable):
        return [write_value_table(result, Path(out_dir) / f"{result.role}_table.csv")]
    raise TypeError(f"no writer for {type(result).__name__}")
