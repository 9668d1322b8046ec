"""Command-line front end: ``dhmpc {solve,coarsen,sensitivity,closedloop,bench}``.

Every command writes its outputs plus a ``manifest.json`` into one output
directory.  Exit codes: 0 success, 1 infeasible or model error, 2 usage error.
"""

from __future__ import annotations

import os

_THREADS = os.environ.get("DHMPC_THREADS")
if _THREADS:
    # cap BLAS pools before numpy loads
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse
import csv
import json
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .closed_loop import (SCHEMES, ClosedLoopTrace, ControllerConfig, SchemeComparison, StepInfeasible,
                          StepSolverError, compare_schemes)
from .coarsening import (Prior, coarsen, delta_estimate, free_variables, make_grid, project,
                         solve_coarse)
from .eds import PerturbationExperimentSpec, perturbation_experiment, w_channel
from .hvac import (LOAD_CHANNELS, NW, NX, HvacConfig, generate_instance, load_profiles,
                   scenario_from_profiles, synthetic_profiles, write_profiles)
from .lp import SolverError, solve
from .model import CompactLp, load_instance, save_instance, to_compact

EXIT_OK, EXIT_MODEL, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class ModelError(Exception):
    """Bad input data or an infeasible problem (exit code 1)."""


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def threads() -> int:
    try:
        return max(1, int(os.environ.get("DHMPC_THREADS", "1")))
    except ValueError:
        return 1


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def write_solution_csv(path: Path, lp: CompactLp, nx: int, z: np.ndarray) -> None:
    zs = np.asarray(z).reshape(lp.N, lp.n)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["stage"] + [f"x{j + 1}" for j in range(nx)]
                    + [f"u{j + 1}" for j in range(lp.n - nx)])
        for i, row in enumerate(zs):
            wr.writerow([i + 1] + [_fmt(v) for v in row])


def _config_snapshot(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "out")}


def write_manifest(out: Path, args: argparse.Namespace, outputs: list[Path], wall_s: float) -> None:
    doc = {
        "command": args.command,
        "config": _config_snapshot(args),
        "seed": getattr(args, "seed", None),
        "git_describe": git_describe(),
        "wall_time_s": wall_s,
        "outputs": sorted(str(p.relative_to(out)) for p in outputs),
    }
    with open(out / MANIFEST, "w") as fh:
        json.dump(doc, fh, indent=2, default=str)


def _out_dir(path: str, is_file: bool) -> tuple[Path, Path | None]:
    p = Path(path)
    if is_file:
        p.parent.mkdir(parents=True, exist_ok=True)
        return p.parent, p
    p.mkdir(parents=True, exist_ok=True)
    return p, None


def _load(path: str):
    try:
        return load_instance(path)
    except (OSError, json.JSONDecodeError, ValueError, KeyError) as exc:
        raise ModelError(f"cannot load instance {path}: {exc}") from exc


# -- subcommands ----------------------------------------------------------------

def cmd_solve(args: argparse.Namespace) -> list[Path]:
    problem = _load(args.instance)
    lp = to_compact(problem)
    sol = solve(lp, method=args.method, with_basis=False)
    out_dir, target = _out_dir(args.out, is_file=True)
    write_solution_csv(target, lp, problem.dims[0], sol.z)
    summary = out_dir / (target.stem + ".json")
    with open(summary, "w") as fh:
        json.dump({"objective": sol.objective, "status": sol.status,
                   "iterations": sol.iterations}, fh, indent=2)
    return [target, summary]


def cmd_coarsen(args: argparse.Namespace) -> list[Path]:
    problem = _load(args.instance)
    lp = to_compact(problem)
    nx = problem.dims[0]
    out, _ = _out_dir(args.out, is_file=False)
    grid = make_grid(args.grid, lp.N, args.K, args.guard)
    if args.prior == "exact":
        prior = Prior.from_solution(solve(lp, method=args.method, with_basis=False))
    else:
        prior = Prior.zero(lp)
    coarse = coarsen(lp, grid, prior)
    csol = solve_coarse(coarse, method=args.method, select=args.select)
    z_proj, _ = project(csol, prior, coarse.ops)
    S_blocks, S = free_variables(grid, prior)
    paths = [out / "grid.json", out / "coarse_solution.csv", out / "projected_solution.csv",
             out / "summary.json"]
    with open(paths[0], "w") as fh:
        json.dump({"N": grid.N, "K": grid.K, "points": grid.to_list()}, fh)
    write_solution_csv(paths[1], coarse.lp, nx, csol.z)
    write_solution_csv(paths[2], lp, nx, z_proj)
    with open(paths[3], "w") as fh:
        json.dump({
            "coarse_objective": csol.objective,
            "projected_objective": float(lp.p @ z_proj),
            "max_violation": max(0.0, float(-lp.residual(z_proj).min())),
            "free_stages": [int(s) + 1 for s in S],
            "free_blocks": [int(k) + 1 for k in S_blocks],
            "delta_estimate": delta_estimate(lp, grid, prior, z_proj),
        }, fh, indent=2)
    return paths


def _hvac_cfg(args: argparse.Namespace, seed: int) -> HvacConfig:
    return HvacConfig(dt_min=args.dt, N=args.N, N_sim=getattr(args, "N_sim", 0), seed=seed)


def _windows(spec: str | None, N: int, count: int) -> list[tuple[int, int]]:
    if spec:
        wins = []
        for part in spec.split(","):
            lo, _, hi = part.partition("-")
            wins.append((int(lo), int(hi)))
        return wins
    size = N // count
    return [(k * size + 1, (k + 1) * size) for k in range(count)]


def cmd_sensitivity(args: argparse.Namespace) -> list[Path]:
    out, _ = _out_dir(args.out, is_file=False)
    if args.instance:
        problem = _load(args.instance)
        nx, _, nw, _ = problem.dims
        if nw == 0:
            raise ModelError("instance has no algebraic rows to perturb")
        channels = [w_channel(f"w{k + 1}", nx, nw, k, args.sigma) for k in range(nw)]
    else:
        problem, _ = generate_instance(_hvac_cfg(args, args.seed))
        nx, nw = NX, NW
        channels = [w_channel(name, nx, nw, k, args.sigma) for name, k in LOAD_CHANNELS.items()]
    lp = to_compact(problem)
    windows = _windows(args.windows, lp.N, args.n_windows)
    samples_csv = out / "samples.csv"
    rows = []
    for idx, win in enumerate(windows):
        if win[1] > lp.N:
            raise ModelError(f"window {win} exceeds N={lp.N}")
        spec = PerturbationExperimentSpec(win, tuple(channels), args.samples, args.seed)
        res = perturbation_experiment(lp, spec, method=args.method)
        res.to_csv(samples_csv, stages=(0,), append=idx > 0)
        dev = res.stage_deviation(0)
        rows.append({"window": list(win), "kept": int(len(res.samples)), "discarded": res.discarded,
                     "mean_stage1_deviation": float(dev.mean()) if dev.size else None})
    summary = out / "summary.json"
    with open(summary, "w") as fh:
        json.dump({"windows": rows}, fh, indent=2)
    return [samples_csv, summary]


def _run_one(args: tuple[HvacConfig, list[ControllerConfig], int]
             ) -> tuple[SchemeComparison, dict[tuple[str, str], ClosedLoopTrace]]:
    hcfg, cfgs, N_sim = args
    scen = scenario_from_profiles(hcfg, synthetic_profiles(hcfg))
    traces: dict = {}
    return compare_schemes([scen], cfgs, N_sim, traces=traces), traces


def _merge(parts: Sequence[SchemeComparison]) -> SchemeComparison:
    rows = [r for p in parts for r in p.rows]
    rates = [p.win_rate for p in parts if p.win_rate is not None]
    return SchemeComparison(rows=rows, win_rate=float(np.mean(rates)) if rates else None)


def cmd_closedloop(args: argparse.Namespace) -> list[Path]:
    out, _ = _out_dir(args.out, is_file=False)
    cfgs = [ControllerConfig(scheme=s, N=args.N, K=None if s == "full" else args.K,
                             guard=args.guard, prior=args.prior, method=args.method)
            for s in args.schemes]
    jobs = [(HvacConfig(dt_min=args.dt, N=args.N, N_sim=args.N_sim, seed=args.seed + k), cfgs,
             args.N_sim) for k in range(args.scenarios)]
    workers = min(threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    paths = []
    for _, traces in results:
        for (scen, label), tr in traces.items():
            p = out / f"trace_{scen}_{label}.csv"
            tr.to_csv(p)
            paths.append(p)
    report = out / "report.json"
    _merge([c for c, _ in results]).to_json(report)
    return paths + [report]


def cmd_bench(args: argparse.Namespace) -> list[Path]:
    out, _ = _out_dir(args.out, is_file=False)
    cfg = _hvac_cfg(args, args.seed)
    if args.profiles:
        try:
            prof = load_profiles(args.profiles)
        except (OSError, ValueError) as exc:
            raise ModelError(str(exc)) from exc
    else:
        prof = synthetic_profiles(cfg)
    problem, _ = generate_instance(cfg, prof)
    paths = [out / "instance.json", out / "profiles.csv", out / "hvac_config.json"]
    save_instance(problem, paths[0])
    write_profiles(prof, paths[1])
    with open(paths[2], "w") as fh:
        json.dump(asdict(cfg), fh, indent=2)
    return paths


# -- parser -------------------------------------------------------------------------

def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive: {v}")
    return v


def _schemes(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in names if s not in SCHEMES]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown scheme(s) {bad}; choose from {','.join(SCHEMES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dhmpc", description="Time-coarsened MPC linear programs.")
    sub = ap.add_subparsers(dest="command", required=True)
    method = dict(choices=("auto", "simplex", "highs"), default="auto")

    p = sub.add_parser("solve", help="solve an instance at full resolution")
    p.add_argument("--instance", required=True)
    p.add_argument("--out", required=True, help="solution CSV path")
    p.add_argument("--method", **method)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("coarsen", help="coarsen, solve and project an instance")
    p.add_argument("--instance", required=True)
    p.add_argument("--grid", choices=("equal", "fts", "diffusing", "full"), required=True)
    p.add_argument("--K", type=_positive)
    p.add_argument("--guard", action="store_true")
    p.add_argument("--prior", choices=("zero", "exact"), default="zero")
    p.add_argument("--select", choices=("vertex", "prior"), default="vertex")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--method", **method)
    p.set_defaults(func=cmd_coarsen)

    def hvac_args(p, N=288):
        p.add_argument("--N", type=_positive, default=N)
        p.add_argument("--dt", type=float, default=5.0, help="step length in minutes")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("sensitivity", help="Monte-Carlo perturbation study of the first stage")
    p.add_argument("--instance", help="instance JSON; default is the HVAC benchmark")
    hvac_args(p)
    p.add_argument("--windows", help="comma-separated 1-based ranges like 1-72,73-144")
    p.add_argument("--n-windows", dest="n_windows", type=_positive, default=4)
    p.add_argument("--samples", type=_positive, default=200)
    p.add_argument("--sigma", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.add_argument("--method", **method)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("closedloop", help="receding-horizon comparison of grid schemes")
    p.add_argument("--bench", choices=("hvac",), default="hvac")
    p.add_argument("--schemes", type=_schemes, default=list(SCHEMES))
    p.add_argument("--scenarios", type=_positive, default=1)
    hvac_args(p)
    p.add_argument("--K", type=_positive, default=30)
    p.add_argument("--N-sim", dest="N_sim", type=_positive, default=288)
    p.add_argument("--no-guard", dest="guard", action="store_false")
    p.add_argument("--prior", choices=("zero", "shifted"), default="zero")
    p.add_argument("--out", required=True)
    p.add_argument("--method", **method)
    p.set_defaults(func=cmd_closedloop)

    p = sub.add_parser("bench", help="generate an HVAC instance and its profiles")
    hvac_args(p)
    p.add_argument("--profiles", help="profile CSV to use instead of synthetic data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench, N_sim=0)
    return ap


def _check_usage(ap: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    if args.command == "coarsen":
        if args.grid == "full" and args.K is not None:
            ap.error("--K cannot be combined with --grid full")
        if args.grid != "full" and args.K is None:
            ap.error(f"--grid {args.grid} requires --K")
    if args.command == "sensitivity":
        if args.sigma < 0:
            ap.error("--sigma must be nonnegative")
        try:
            _windows(args.windows, args.N, args.n_windows)
        except ValueError:
            ap.error(f"cannot parse --windows {args.windows!r}; expected e.g. 1-72,73-144")
    if getattr(args, "dt", 1.0) <= 0:
        ap.error("--dt must be positive")


def dispatch(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
        _check_usage(ap, args)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    start = time.perf_counter()
    try:
        outputs = args.func(args)
    except (ModelError, SolverError, StepInfeasible, StepSolverError, ValueError) as exc:
        print(f"dhmpc {args.command}: {exc}", file=sys.stderr)
        return EXIT_MODEL
    out = Path(args.out)
    out_dir = out.parent if args.command == "solve" else out
    write_manifest(out_dir, args, outputs, time.perf_counter() - start)
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())
