"""Command-line interface: solve, generate, inject, evaluate, bench.

Exit codes: 0 success, 2 parse/input failure, 3 solver failure (an
uncertified stage in a mode that promises certification, unless
--allow-uncertified).  Errors print one machine-greppable line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .certifier import StaircaseConfig, riemannian_staircase
from .factor_graph import Problem, lift_graph
from .gnc import (
    GncConfig,
    GncInnerSolverError,
    GncIterationRecord,
    GncResult,
    GncTrace,
    RobustLossConfig,
    c_bar_from_quantile,
    gnc_solve,
    initial_point,
    robust_cost,
    suboptimality_gap,
)
from .io_g2o import (
    G2oParseError,
    estimate_to_problem,
    parse_estimate_sidecar,
    parse_g2o,
    serialize_estimate_sidecar,
    serialize_problem,
)
from .manifolds import Estimate, round_solution
from .metrics import classification_scores, rmse_ate
from .reporting import (
    build_run_report,
    render_bench_figure,
    render_trace_figure,
    render_trajectory_figure,
    trace_rows,
    validate_bench_report,
    write_json,
    write_trace_csv,
)
from .solver import SolverConfig, optimize
from .synthetic import GenerationSpec, generate_synthetic, inject_outliers

MODES = ("certi-gnc", "gnc-local", "local", "certifiable")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3

# seed stream tags: (master, tag) -> independent generator streams
STREAM_GENERATION = 0
STREAM_INJECTION = 1
STREAM_INIT = 2
STREAM_EIG = 3


def derived_seed(master: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, tags)]).generate_state(1)[0])


def _fail(code: int, reason: str) -> int:
    print(f"error: {reason}", file=sys.stderr)
    return code


def _read_text(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _c_bar(problem: Problem, args) -> float:
    if args.cbar is not None:
        return args.cbar
    return c_bar_from_quantile(problem, args.cbar_quantile)


def _staircase_config(args, master_seed: int) -> StaircaseConfig:
    return StaircaseConfig(
        p0=args.p0, p_max=args.pmax, eta=args.eta,
        eig_seed=derived_seed(master_seed, STREAM_EIG),
        solver=SolverConfig(max_iterations=args.max_inner),
    )


def _single_stage_trace(weighted_cost, rank, gap, gap_rel, certified, robust,
                        wall_ms, mu=None) -> GncTrace:
    trace = GncTrace()
    trace.append(GncIterationRecord(
        iteration=1, mu=mu, weighted_cost=weighted_cost, robust_cost=robust,
        weights=np.empty(0), termination_rank=rank, gap=gap,
        gap_is_relative=gap_rel, certified=certified, wall_ms=wall_ms))
    return trace


def solve_problem(problem: Problem, mode: str, init: str, seed: int,
                  c_bar: float, gnc_kwargs: dict,
                  staircase_cfg: StaircaseConfig) -> GncResult:
    """Run one of the four pipelines and normalize the outcome to GncResult."""
    init_seed = derived_seed(seed, STREAM_INIT)
    if mode in ("certi-gnc", "gnc-local"):
        cfg = GncConfig(loss=RobustLossConfig(c_bar=c_bar),
                        inner_mode="certifiable" if mode == "certi-gnc" else "local",
                        **gnc_kwargs)
        return gnc_solve(problem, cfg, staircase_cfg, seed=init_seed, init=init)

    robust_idx = problem.robust_edge_indices
    if mode == "certifiable":
        p0 = staircase_cfg.resolved_p0(problem.d)
        g = lift_graph(problem, p0)
        Y0 = initial_point(problem, init, p0, init_seed)
        t0 = time.perf_counter()
        res = riemannian_staircase(g, Y0, staircase_cfg)
        wall_ms = (time.perf_counter() - t0) * 1e3
        gap, rel = (None, None)
        if res.f_sdp is not None:
            gap, rel = suboptimality_gap(res.f_qcqp, res.f_sdp)
        trace = _single_stage_trace(res.f_qcqp, res.termination_rank, gap, rel,
                                    res.certified, robust_cost(problem, res.estimate, c_bar),
                                    wall_ms)
        return GncResult(estimate=res.estimate, weights=np.ones(len(robust_idx)),
                         inlier_edges=list(robust_idx), outlier_edges=[],
                         trace=trace, termination="cost_converged",
                         certified_all_stages=res.certified)
    if mode == "local":
        g = lift_graph(problem, problem.d)
        Y0 = initial_point(problem, init, problem.d, init_seed)
        t0 = time.perf_counter()
        res = optimize(g, Y0, staircase_cfg.solver)
        wall_ms = (time.perf_counter() - t0) * 1e3
        est = round_solution(res.point)
        trace = _single_stage_trace(res.cost, problem.d, None, None, None,
                                    robust_cost(problem, est, c_bar), wall_ms)
        return GncResult(estimate=est, weights=np.ones(len(robust_idx)),
                         inlier_edges=list(robust_idx), outlier_edges=[],
                         trace=trace, termination="cost_converged",
                         certified_all_stages=False)
    raise ValueError(f"unknown mode {mode!r}")


def _metrics_from_run(problem: Problem, result: GncResult, args) -> dict:
    metrics: dict = {}
    if args.ground_truth:
        gt = parse_estimate_sidecar(_read_text(args.ground_truth), problem.d)
        ate = rmse_ate(result.estimate, gt)
        metrics["translation_rmse"] = ate.translation_rmse
        metrics["rotation_rmse_deg"] = ate.rotation_rmse_deg
    if getattr(args, "injection_report", None):
        with open(args.injection_report, encoding="utf-8") as fh:
            injected = set(json.load(fh)["replaced_edges"])
        precision, recall = classification_scores(set(result.outlier_edges), injected)
        metrics["outlier_precision"] = precision
        metrics["outlier_recall"] = recall
    return metrics


def cmd_solve(args) -> int:
    try:
        problem = parse_g2o(_read_text(args.input), name=Path(args.input).stem)
    except (OSError, G2oParseError) as err:
        return _fail(EXIT_INPUT, f"solve: {err}")

    c_bar = _c_bar(problem, args)
    staircase_cfg = _staircase_config(args, args.seed)
    gnc_kwargs = dict(gamma=args.gamma, epsilon=args.eps,
                      max_outer_iterations=args.max_outer)

    t0 = time.perf_counter()
    solver_failed = None
    try:
        result = solve_problem(problem, args.mode, args.init, args.seed, c_bar,
                               gnc_kwargs, staircase_cfg)
    except GncInnerSolverError as err:
        solver_failed = str(err)
        result = GncResult(estimate=Estimate(d=problem.d), weights=np.empty(0),
                           inlier_edges=[], outlier_edges=[], trace=err.trace,
                           termination="max_iterations", certified_all_stages=False)
    total_ms = (time.perf_counter() - t0) * 1e3

    try:
        metrics = {} if solver_failed else _metrics_from_run(problem, result, args)
    except (OSError, G2oParseError, ValueError) as err:
        return _fail(EXIT_INPUT, f"solve: {err}")

    config_echo = {
        "mode": args.mode, "init": args.init, "seed": args.seed,
        "input": str(args.input), "c_bar": c_bar, "gamma": args.gamma,
        "p0": args.p0, "pmax": args.pmax, "eta": args.eta, "eps": args.eps,
        "max_outer": args.max_outer, "cbar_quantile": args.cbar_quantile,
    }
    rows = trace_rows(result.trace)
    report = build_run_report(config_echo, rows, metrics, result.termination,
                              result.certified_all_stages, total_ms)
    if args.report:
        write_json(report, args.report)
    if args.trace:
        write_trace_csv(rows, args.trace)
    if args.output and not solver_failed:
        Path(args.output).write_text(
            serialize_problem(estimate_to_problem(problem, result.estimate)),
            encoding="utf-8")
    if args.figures:
        figdir = Path(args.figures)
        figdir.mkdir(parents=True, exist_ok=True)
        render_trace_figure(rows, figdir / "trace.png")
        gt = (parse_estimate_sidecar(_read_text(args.ground_truth), problem.d)
              if args.ground_truth else None)
        if not solver_failed:
            render_trajectory_figure(result.estimate, figdir / "trajectory.png",
                                     ground_truth=gt)

    if solver_failed:
        return _fail(EXIT_SOLVER, f"solve: inner solver failed: {solver_failed}")
    promises_certificates = args.mode in ("certi-gnc", "certifiable")
    if promises_certificates and not result.certified_all_stages and not args.allow_uncertified:
        return _fail(EXIT_SOLVER, "solve: uncertified stage in a certifying mode")
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        spec = GenerationSpec(d=args.dim, n_poses=args.poses, world=args.world,
                              sigma_r=args.sigma_r, sigma_t=args.sigma_t,
                              loop_prob=args.lc_prob, loop_radius=args.lc_radius,
                              n_landmarks=args.landmarks, obs_radius=args.obs_radius)
        problem = generate_synthetic(spec, derived_seed(args.seed, STREAM_GENERATION))
        Path(args.output).write_text(serialize_problem(problem), encoding="utf-8")
        if args.ground_truth:
            Path(args.ground_truth).write_text(
                serialize_estimate_sidecar(problem.ground_truth_estimate()),
                encoding="utf-8")
    except (OSError, ValueError) as err:
        return _fail(EXIT_INPUT, f"generate: {err}")
    return EXIT_OK


def cmd_inject(args) -> int:
    try:
        problem = parse_g2o(_read_text(args.input), name=Path(args.input).stem)
        corrupted, report = inject_outliers(
            problem, args.rate, derived_seed(args.seed, STREAM_INJECTION))
        text = serialize_problem(corrupted)
        header = (f"# outlier injection: rate={args.rate} seed={args.seed} "
                  f"replaced={len(report.replaced)}\n")
        Path(args.output).write_text(header + text, encoding="utf-8")
        if args.report:
            write_json(report.to_dict(), args.report)
    except (OSError, G2oParseError, ValueError) as err:
        return _fail(EXIT_INPUT, f"inject: {err}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        problem = parse_g2o(_read_text(args.input), name=Path(args.input).stem)
        gt = parse_estimate_sidecar(_read_text(args.ground_truth), problem.d)
        ate = rmse_ate(problem.ground_truth_estimate(), gt)
    except (OSError, G2oParseError, ValueError) as err:
        return _fail(EXIT_INPUT, f"evaluate: {err}")
    payload = ate.to_dict()
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.report:
        write_json(payload, args.report)
    return EXIT_OK


def _bench_trial(payload: dict) -> dict:
    """One (mode, init, rate, trial) cell; exceptions become failed rows."""
    row = {"mode": payload["mode"], "init": payload["init"],
           "rate": payload["rate"], "trial": payload["trial"],
           "status": "failed", "translation_rmse": None,
           "rotation_rmse_deg": None, "wall_s": None,
           "outlier_precision": None, "outlier_recall": None, "error": None}
    try:
        problem = parse_g2o(payload["problem_text"])
        gt = parse_estimate_sidecar(payload["gt_text"], problem.d)
        corrupted, inj_report = inject_outliers(problem, payload["rate"],
                                                payload["injection_seed"])
        staircase_cfg = StaircaseConfig(
            p0=None, p_max=payload["pmax"],
            eig_seed=derived_seed(payload["seed"], STREAM_EIG, payload["trial"]))
        c_bar = payload["c_bar"]
        t0 = time.perf_counter()
        result = solve_problem(corrupted, payload["mode"], payload["init"],
                               payload["solve_seed"], c_bar,
                               dict(max_outer_iterations=payload["max_outer"]),
                               staircase_cfg)
        row["wall_s"] = time.perf_counter() - t0
        ate = rmse_ate(result.estimate, gt)
        precision, recall = classification_scores(set(result.outlier_edges),
                                                  set(inj_report.replaced))
        row.update(status="ok", translation_rmse=ate.translation_rmse,
                   rotation_rmse_deg=ate.rotation_rmse_deg,
                   outlier_precision=precision, outlier_recall=recall)
    except Exception as err:  # a failed trial must not abort the sweep
        row["error"] = f"{type(err).__name__}: {err}"
    return row


_BENCH_CELLS = (("certi-gnc", "random"), ("gnc-local", "odometry"),
                ("gnc-local", "random"))


def _summary(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "median": None, "min": None, "max": None}
    return {"mean": float(np.mean(values)), "median": float(np.median(values)),
            "min": float(np.min(values)), "max": float(np.max(values))}


def cmd_bench(args) -> int:
    try:
        spec = GenerationSpec(d=args.dim, n_poses=args.poses, world=args.world,
                              sigma_r=args.sigma_r, sigma_t=args.sigma_t,
                              loop_prob=args.lc_prob, loop_radius=args.lc_radius,
                              n_landmarks=args.landmarks, obs_radius=args.obs_radius)
        base = generate_synthetic(spec, derived_seed(args.seed, STREAM_GENERATION))
    except (OSError, ValueError) as err:
        return _fail(EXIT_INPUT, f"bench: {err}")
    problem_text = serialize_problem(base)
    gt_text = serialize_estimate_sidecar(base.ground_truth_estimate())
    c_bar = args.cbar if args.cbar is not None else c_bar_from_quantile(base, args.cbar_quantile)

    rates = [float(r) for r in args.rates.split(",")]
    tasks = []
    for rate_idx, rate in enumerate(rates):
        for trial in range(args.trials):
            injection_seed = derived_seed(args.seed, STREAM_INJECTION, rate_idx, trial)
            for mode, init in _BENCH_CELLS:
                tasks.append({
                    "mode": mode, "init": init, "rate": rate, "trial": trial,
                    "problem_text": problem_text, "gt_text": gt_text,
                    "injection_seed": injection_seed,
                    "solve_seed": derived_seed(args.seed, STREAM_INIT, trial),
                    "seed": args.seed, "pmax": args.pmax, "c_bar": c_bar,
                    "max_outer": args.max_outer,
                })

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_bench_trial, tasks))
    else:
        rows = [_bench_trial(t) for t in tasks]
    rows.sort(key=lambda r: (r["rate"], r["mode"], r["init"], r["trial"]))

    cells = []
    for rate in rates:
        for mode, init in _BENCH_CELLS:
            sub = [r for r in rows if r["rate"] == rate and r["mode"] == mode
                   and r["init"] == init]
            ok = [r for r in sub if r["status"] == "ok"]
            stats = {}
            for key in ("translation_rmse", "rotation_rmse_deg", "wall_s",
                        "outlier_precision", "outlier_recall"):
                stats[key] = _summary([r[key] for r in ok if r[key] is not None])
            cells.append({"mode": mode, "init": init, "rate": rate,
                          "trials": len(sub), "failures": len(sub) - len(ok),
                          "stats": stats})

    report = {
        "schema_version": "1",
        "config": {"seed": args.seed, "trials": args.trials, "rates": rates,
                   "poses": args.poses, "landmarks": args.landmarks,
                   "world": args.world, "dim": args.dim, "c_bar": c_bar,
                   "sigma_r": args.sigma_r, "sigma_t": args.sigma_t},
        "cells": cells,
        "rows": rows,
    }
    validate_bench_report(report)
    if args.report:
        write_json(report, args.report)
    if args.csv:
        import csv as _csv
        with open(args.csv, "w", encoding="utf-8", newline="") as fh:
            fieldnames = ["mode", "init", "rate", "trial", "status",
                          "translation_rmse", "rotation_rmse_deg", "wall_s",
                          "outlier_precision", "outlier_recall", "error"]
            writer = _csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    if args.figures:
        figdir = Path(args.figures)
        figdir.mkdir(parents=True, exist_ok=True)
        render_bench_figure(rows, figdir / "bench_translation_rmse.png",
                            "translation_rmse")
        render_bench_figure(rows, figdir / "bench_rotation_rmse.png",
                            "rotation_rmse_deg")
        render_bench_figure(rows, figdir / "bench_wall_s.png", "wall_s")
    return EXIT_OK


def _add_generation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=2, choices=(2, 3))
    p.add_argument("--poses", type=int, default=20)
    p.add_argument("--world", default="ring", choices=("ring", "grid"))
    p.add_argument("--sigma-r", type=float, default=0.01)
    p.add_argument("--sigma-t", type=float, default=0.05)
    p.add_argument("--lc-prob", type=float, default=0.5)
    p.add_argument("--lc-radius", type=float, default=2.5)
    p.add_argument("--landmarks", type=int, default=0)
    p.add_argument("--obs-radius", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", default="certi-gnc", choices=MODES)
    p.add_argument("--init", default="odometry", choices=("odometry", "random"))
    p.add_argument("--cbar", type=float, default=None)
    p.add_argument("--cbar-quantile", type=float, default=0.99)
    p.add_argument("--gamma", type=float, default=1.4)
    p.add_argument("--p0", type=int, default=None)
    p.add_argument("--pmax", type=int, default=30)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--max-outer", type=int, default=100)
    p.add_argument("--max-inner", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--allow-uncertified", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="certignc",
        description="Robust certifiable factor-graph optimization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve a pose-graph / landmark problem")
    p.add_argument("--input", required=True)
    _add_solver_flags(p)
    p.add_argument("--ground-truth", default=None)
    p.add_argument("--injection-report", default=None,
                   help="JSON injection report for precision/recall metrics")
    p.add_argument("--report", default=None, help="run report JSON path")
    p.add_argument("--trace", default=None, help="trace CSV path")
    p.add_argument("--output", default=None, help="solved g2o path")
    p.add_argument("--figures", default=None, help="directory for rendered figures")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("generate", help="write a synthetic g2o world")
    _add_generation_flags(p)
    p.add_argument("--output", required=True)
    p.add_argument("--ground-truth", default=None, help="sidecar table path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("inject", help="corrupt robust edges with outliers")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None, help="injection report JSON path")
    p.set_defaults(func=cmd_inject)

    p = sub.add_parser("evaluate", help="RMSE of a solved g2o vs ground truth")
    p.add_argument("--input", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="Monte Carlo sweep over rates and modes")
    _add_generation_flags(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--rates", default="0.1,0.2,0.3")
    p.add_argument("--cbar", type=float, default=None)
    p.add_argument("--cbar-quantile", type=float, default=0.99)
    p.add_argument("--pmax", type=int, default=30)
    p.add_argument("--max-outer", type=int, default=100)
    p.add_argument("--jobs", type=int, default=4)
    p.add_argument("--report", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--figures", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
