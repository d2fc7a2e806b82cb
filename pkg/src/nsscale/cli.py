"""Command line driver: ``nsscale run|validate|inspect|report``.

Exit codes: 0 success, 1 at least one analysis task failed, 2 invalid
configuration or input file, 3 solver blow-up.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import json
import logging
import math
import os
import sys
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from .fields import make_grid, random_divfree_field, taylor_green
from .io import SnapshotFormatError, atomic_write_text, read_snapshot, save_trajectory
from .lagrangian import (
    BaseLattice,
    GoodSetParams,
    build_local_frames,
    change_of_variables_check,
    ckn_criterion,
    complement_measure_check,
    derivative_at_basepoint,
    frame_integrals,
)
from .norms import (
    REPORT_HEADER,
    Region,
    ReportRow,
    pivot_budget,
    rows_to_csv,
    theorem1_gap,
)
from .scaling import scaling_exponent_fit
from .solver import BlowUpError, SolverConfig, energy_budget, simulate

log = logging.getLogger("nsscale")

EXIT_OK, EXIT_TASK_FAILED, EXIT_CONFIG, EXIT_BLOWUP = 0, 1, 2, 3
EXTRA_COLUMNS = ("task", "t", "epsilon")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridBlock(_Strict):
    dim: Literal[2, 3] = 2
    n: int = 32
    box_length: float = 2 * math.pi


class SolverBlock(_Strict):
    viscosity: float = 1.0
    dt: float = 1e-3
    t_end: float = 0.1
    snapshot_stride: int = 1
    dealias: bool = True
    nonlinear: Literal["divergence", "rotational"] = "divergence"


class TaylorGreenInit(_Strict):
    kind: Literal["taylor_green"]
    amplitude: float = 1.0


class RandomInit(_Strict):
    kind: Literal["random"]
    energy: float = 1.0
    spectrum_slope: float = -5.0 / 3.0
    k_peak: float = 2.0
    seed: int = 0


class RegionBlock(_Strict):
    t0: float = 0.0
    t1: Optional[float] = None
    lower: Optional[List[float]] = None
    size: Optional[List[float]] = None


class EnergyBudgetTask(_Strict):
    task: Literal["energy_budget"]
    rule: Literal["simpson", "trapezoid"] = "simpson"


class PivotBudgetTask(_Strict):
    task: Literal["pivot_budget"]
    s: List[float] = [0.25]
    rule: Literal["simpson", "trapezoid"] = "trapezoid"


class ScalingFitTask(_Strict):
    task: Literal["scaling_fit"]
    quantity: Literal["dissipation", "f_norm", "grad_l2"] = "dissipation"
    epsilons: List[float] = [1.0, 0.5, 0.25, 0.125]
    t0: float = 0.0
    x0: Optional[List[float]] = None


class Theorem1Task(_Strict):
    task: Literal["theorem1"]
    n: int = 1
    p: float = 1.5
    gamma: float = 1.0 / 7.0
    region: RegionBlock = RegionBlock()


class LatticeBlock(_Strict):
    t0: float
    t1: float
    n_t: int = 16
    n_x: int = 16


class GoodSetTask(_Strict):
    task: Literal["goodset"]
    delta: float = 0.625
    gamma: float = 1.0 / 7.0
    eta_star: float = 1.0
    epsilon: float = 0.125
    box: LatticeBlock


class FramesTask(_Strict):
    task: Literal["frames"]
    delta: float = 0.625
    gamma: float = 1.0 / 7.0
    epsilon: float = 0.125
    eta_star: float = 1.0
    base_points: List[List[float]]
    n: List[int] = [1, 2]
    ckn_p: float = 1.5
    ckn_eta: float = 0.1


Task = Annotated[
    Union[EnergyBudgetTask, PivotBudgetTask, ScalingFitTask, Theorem1Task, GoodSetTask, FramesTask],
    Field(discriminator="task"),
]


class ExperimentConfig(_Strict):
    grid: GridBlock = GridBlock()
    solver: SolverBlock = SolverBlock()
    initial: Annotated[Union[TaylorGreenInit, RandomInit], Field(discriminator="kind")] = TaylorGreenInit(
        kind="taylor_green"
    )
    analysis: List[Task] = []
    output_dir: str = "output"
    save_trajectory: bool = False

    @model_validator(mode="after")
    def _check(self):
        make_grid(self.grid.dim, self.grid.n, self.grid.box_length)
        SolverConfig(**self.solver.model_dump())
        steps = self.solver.t_end / self.solver.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("t_end must be an integer multiple of dt")
        if round(steps) % self.solver.snapshot_stride:
            raise ValueError("the step count must be a multiple of snapshot_stride")
        return self


def load_config(path):
    """Parse and validate a JSON config; raises ``ValueError`` with a readable message."""
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ValueError(str(exc)) from exc


def _initial_field(cfg):
    grid = make_grid(cfg.grid.dim, cfg.grid.n, cfg.grid.box_length)
    init = cfg.initial
    if init.kind == "taylor_green":
        return taylor_green(grid, init.amplitude), None
    u = random_divfree_field(grid, init.spectrum_slope, init.k_peak, init.seed, init.energy)
    return u, init.seed


def _region(block, traj):
    t1 = traj.t_stop if block.t1 is None else block.t1
    lower = None if block.lower is None else tuple(block.lower)
    size = None if block.size is None else tuple(block.size)
    return Region(block.t0, t1, lower, size)


@dataclass(frozen=True)
class TaggedRow(ReportRow):
    """Report row with the snapshot time and scale columns used by task CSVs."""

    t: Optional[float] = None
    epsilon: Optional[float] = None


def _row(quantity, value, task, **kw):
    return TaggedRow(quantity=quantity, value=value, task=task, **kw)


def _task_energy_budget(task, traj, label):
    b = energy_budget(traj, task.rule)
    rows = []
    for t, e, c, r in zip(b.times, b.energy, b.cumulative_dissipation, b.residual):
        rows.append(_row("energy", float(e), label, t=float(t)))
        rows.append(_row("cumulative_dissipation", float(c), label, t=float(t)))
        rows.append(_row("energy_residual", float(r), label, t=float(t)))
    rows.append(_row("relative_residual", b.relative_residual, label))
    return rows, {"relative_residual": b.relative_residual}


def _task_pivot_budget(task, traj, label):
    rows, summary = [], {}
    for s in task.s:
        b = pivot_budget(traj, s, rule=task.rule)
        common = dict(s=s, delta=b.delta, gamma=b.gamma)
        for name in ("i_grad", "i_hess_p", "i_max_frac", "total", "rhs"):
            rows.append(_row(name, getattr(b, name), label, **common))
        rows.append(_row("budget_ratio", b.ratio, label, ratio=b.ratio, **common))
        rows.append(_row("hardy_ratio", b.hardy_ratio, label, **common))
        summary[f"ratio_s={s!r}"] = b.ratio
    return rows, summary


def _task_scaling_fit(task, traj, label):
    fit = scaling_exponent_fit(task.quantity, traj, task.epsilons, t0=task.t0, x0=task.x0)
    rows = [_row(task.quantity, v, label, epsilon=e) for e, v in zip(fit.epsilons, fit.values)]
    rows.append(_row("slope", fit.slope, label))
    rows.append(_row("r2", fit.r2, label))
    return rows, {"slope": fit.slope, "r2": fit.r2}


def _task_theorem1(task, traj, label):
    region = _region(task.region, traj)
    gap = theorem1_gap(traj, task.n, task.p, task.gamma, region)
    common = dict(n=task.n, p=task.p, q=task.p, gamma=task.gamma, region=region.label(), admissible=gap.admissible)
    rows = [
        _row("grad_lp_norm", gap.lhs, label, **common),
        _row("theorem1_rhs", gap.rhs_ref, label, **common),
        _row("theorem1_ratio", gap.ratio, label, ratio=gap.ratio, **common),
    ]
    return rows, {"ratio": gap.ratio, "admissible": gap.admissible}


def _task_goodset(task, traj, label):
    params = GoodSetParams(task.delta, task.eta_star, task.epsilon, task.gamma)
    lattice = BaseLattice(task.box.t0, task.box.t1, task.box.n_t, task.box.n_x)
    res = complement_measure_check(traj, params, lattice)
    common = dict(delta=task.delta, gamma=task.gamma)
    rows = [
        _row(name, getattr(res, name), label, epsilon=task.epsilon, **common)
        for name in ("measured_measure", "bound_ratio", "n_bad", "n_total", "error_bar")
    ]
    return rows, {"measured_measure": res.measured_measure, "bound_ratio": res.bound_ratio}


def _task_frames(task, traj, label):
    params = GoodSetParams(task.delta, task.eta_star, task.epsilon, task.gamma)
    dim = traj.grid.dim
    groups = {}
    for bp in task.base_points:
        if len(bp) != dim + 1:
            raise ValueError(f"base point {bp} needs {dim + 1} entries (t, x)")
        groups.setdefault(float(bp[0]), []).append(bp[1:])
    rows = []
    histories = {}
    worst_star = 0.0
    for t, xs in groups.items():
        frames = build_local_frames(traj, task.epsilon, task.delta, t, np.array(xs), gamma=task.gamma,
                                    params=params, histories=histories)
        cov = change_of_variables_check(traj, frames, histories)
        for f, (_, _, rel) in zip(frames, cov):
            star = float(np.max(np.abs(f.star)))
            worst_star = max(worst_star, star)
            where = " ".join("%.17g" % c for c in f.base_x)
            fi = frame_integrals(f)
            common = dict(delta=f.delta, gamma=f.gamma, region=where)
            rows.append(_row("good", f.good, label, t=t, epsilon=f.epsilon, admissible=f.good, **common))
            rows.append(_row("tube_value", f.f_delta_tube, label, t=t, epsilon=f.epsilon, **common))
            rows.append(_row("star_residual", star, label, t=t, epsilon=f.epsilon, **common))
            for key, val in fi.items():
                rows.append(_row(f"frame_{key}", val, label, t=t, epsilon=f.epsilon, **common))
            rows.append(_row("cov_rel_error", float(rel), label, t=t, epsilon=f.epsilon, **common))
            ckn = ckn_criterion(f, task.ckn_p, task.ckn_eta)
            rows.append(_row("ckn_total", ckn.total, label, t=t, epsilon=f.epsilon, p=task.ckn_p,
                             admissible=ckn.fires, **common))
            for n in task.n:
                d = derivative_at_basepoint(traj, f, n)
                rows.append(_row("derivative_ratio", d.ratio, label, t=t, epsilon=f.epsilon, n=n,
                                 ratio=d.ratio / d.expected, **common))
    return rows, {"frames": sum(len(v) for v in groups.values()), "max_star_residual": worst_star}


TASKS = {
    "energy_budget": _task_energy_budget,
    "pivot_budget": _task_pivot_budget,
    "scaling_fit": _task_scaling_fit,
    "theorem1": _task_theorem1,
    "goodset": _task_goodset,
    "frames": _task_frames,
}


def thread_cap():
    """Worker cap from ``NSSCALE_THREADS`` (default 1).

    The cap sets the worker count of the FFT and non-uniform FFT calls;
    tasks themselves run one after another.  It is echoed in the manifest.
    """
    raw = os.environ.get("NSSCALE_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"NSSCALE_THREADS must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"NSSCALE_THREADS must be a positive integer, got {raw!r}")
    return value


def _csv_text(rows):
    return rows_to_csv(rows, EXTRA_COLUMNS)


def _write_manifest(out, manifest):
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def run(config_path):
    """Execute a run and return ``(exit_code, manifest or None)``."""
    config_path = Path(config_path)
    try:
        cfg = load_config(config_path)
        threads = thread_cap()
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG, None
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = config_path.parent / out
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    manifest = {
        "status": "incomplete",
        "config": cfg.model_dump(mode="json"),
        "version": __version__,
        "threads": threads,
        "wall_clock": None,
        "tasks": [],
        "outputs": [],
    }
    _write_manifest(out, manifest)

    u0, seed = _initial_field(cfg)
    solver_cfg = SolverConfig(**cfg.solver.model_dump())
    try:
        traj = simulate(u0, solver_cfg, seed=seed)
    except BlowUpError as exc:
        manifest.update(status="blowup", error=str(exc), last_time=exc.last_time,
                        wall_clock=time.time() - started)
        _write_manifest(out, manifest)
        print(f"solver blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP, manifest
    if cfg.save_trajectory:
        save_trajectory(traj, out / "trajectory")
        manifest["outputs"].append("trajectory/manifest.json")

    failed = False
    used = set()
    for i, task in enumerate(cfg.analysis):
        name = task.task if task.task not in used else f"{task.task}_{i}"
        used.add(name)
        entry = {"task": task.task, "name": name, "status": "ok"}
        try:
            rows, summary = TASKS[task.task](task, traj, name)
            fname = f"{name}.csv"
            atomic_write_text(out / fname, _csv_text(rows))
            entry.update(output=fname, summary=summary)
            manifest["outputs"].append(fname)
        except Exception as exc:  # one failing task must not abort the others
            failed = True
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            log.debug("task %s failed\n%s", name, traceback.format_exc())
        manifest["tasks"].append(entry)
        _write_manifest(out, manifest)

    report(out / "manifest.json", manifest)
    manifest["outputs"] += ["report.csv", "report.json"]
    manifest["status"] = "complete"
    manifest["wall_clock"] = time.time() - started
    _write_manifest(out, manifest)
    return (EXIT_TASK_FAILED if failed else EXIT_OK), manifest


def report(manifest_path, manifest=None):
    """Concatenate every task CSV listed in the manifest into ``report.csv`` and ``report.json``."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text()) if manifest is None else manifest
    out = manifest_path.parent
    header = list(REPORT_HEADER) + list(EXTRA_COLUMNS)
    records = []
    for entry in manifest["tasks"]:
        if entry.get("status") != "ok":
            continue
        with open(out / entry["output"], newline="") as fh:
            reader = csv.reader(fh)
            if next(reader) != header:
                raise ValueError(f"{entry['output']}: unexpected header")
            records.extend(reader)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(records)
    atomic_write_text(out / "report.csv", buf.getvalue())
    mirror = {"columns": header, "rows": [dict(zip(header, r)) for r in records]}
    atomic_write_text(out / "report.json", json.dumps(mirror, indent=1, sort_keys=True))
    return records


def inspect(path):
    """Header and per-field statistics of a snapshot file."""
    grid, header, arrays = read_snapshot(path)
    stats = {
        name: {"min": float(np.min(a)), "max": float(np.max(a)), "mean": float(np.mean(a))}
        for name, a in zip(header["fields"], arrays)
    }
    return {"header": header, "stats": stats}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="nsscale", description="Periodic Navier-Stokes scaling experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "simulate and run every analysis task"),
        ("validate", "check a config and print it with defaults filled in"),
        ("inspect", "print a snapshot header and field statistics"),
        ("report", "rebuild report.csv/report.json from a run manifest"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("path")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    if args.command == "run":
        code, _ = run(args.path)
        return code
    if args.command == "validate":
        try:
            cfg = load_config(args.path)
        except ValueError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True))
        return EXIT_OK
    if args.command == "inspect":
        try:
            info = inspect(args.path)
        except (OSError, SnapshotFormatError) as exc:
            print(f"snapshot error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(json.dumps(info, indent=2, sort_keys=True))
        return EXIT_OK
    try:
        report(args.path)
    except (OSError, ValueError, KeyError) as exc:
        print(f"report error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
