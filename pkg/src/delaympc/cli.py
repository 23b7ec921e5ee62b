"""Command-line interface: solve, simulate, bench, verify.

Exit codes: 0 success/optimal, 1 parse or validation failure, 2 infeasible,
3 solver failure, 4 verification failure.  All output files carry a leading
comment line with the tool version and the full invocation.  The default
solver tolerance can be overridden with the DELAYMPC_TOL environment
variable.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .blockops import build_nominal_blocks
from .model import ProblemFormatError, ProblemValidationError, load_problem
from .oracle import (
    affine_residual,
    controller_residual,
    exhaustive_membership,
    filter_membership,
    overapprox_slack,
    realize_delta,
    response_identity_check,
)
from .presets import random_benchmark_problem
from .simulate import run_closed_loop, run_seed, sample_disturbance, sample_uncertainty, trajectory_csv
from .synthesis import (
    InfeasibleProblem,
    OcpSynthesizer,
    SolverFailure,
    SynthesisOptions,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_SOLVER_FAILURE = 3
EXIT_VERIFY_FAILED = 4


def _meta(argv: list[str]) -> str:
    return f"delaympc {__version__} | delaympc {' '.join(argv)}"


def _default_tol() -> float:
    raw = os.environ.get("DELAYMPC_TOL")
    if raw is None:
        return 1e-7
    try:
        val = float(raw)
        if val <= 0:
            raise ValueError
        return val
    except ValueError:
        print(f"warning: ignoring invalid DELAYMPC_TOL={raw!r}", file=sys.stderr)
        return 1e-7


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--filter", choices=("full", "diag"), default="full",
                   help="disturbance filter mode (default: full)")
    p.add_argument("--tol", type=float, default=None,
                   help="feasibility/optimality tolerance (default 1e-7 or $DELAYMPC_TOL)")
    p.add_argument("--max-iter", type=int, default=200_000)
    p.add_argument("--backend", default="ipm",
                   help="QP backend: ipm (default), admm, osqp, cvxopt")
    p.add_argument("--terminal-cost", choices=("per_time", "repeat_final"),
                   default="per_time")


def _options(args) -> SynthesisOptions:
    tol = args.tol if args.tol is not None else _default_tol()
    return SynthesisOptions(
        filter_mode=args.filter,
        tol_feas=tol,
        tol_opt=tol,
        max_iter=args.max_iter,
        backend=args.backend,
        terminal_cost_mode=args.terminal_cost,
    )


def _load(path: str):
    try:
        return load_problem(path)
    except FileNotFoundError:
        print(f"error: problem file not found: {path}", file=sys.stderr)
        return None
    except ProblemValidationError as exc:
        print("error: invalid problem:", file=sys.stderr)
        for v in exc.violations:
            print(f"  [{v.code}] {v.message}", file=sys.stderr)
        return None
    except ProblemFormatError as exc:
        print(f"error: cannot parse problem file: {exc}", file=sys.stderr)
        return None


def _result_summary(result, problem) -> dict:
    st = result.solver_stats
    return {
        "objective": result.objective,
        "u0": result.nominal_u.block(0).tolist(),
        "q": result.sigma.q.tolist(),
        "h_max": float(np.max(np.abs(result.h.data))),
        "solver": {
            "status": st.status,
            "backend": st.backend,
            "iterations": st.iterations,
            "primal_residual": st.primal_residual,
            "dual_residual": st.dual_residual,
            "solve_time_s": st.solve_time,
            "assemble_time_s": st.assemble_time,
            "n_vars": st.n_vars,
            "n_eq": st.n_eq,
            "n_ineq": st.n_ineq,
            "qp_objective": st.qp_objective,
        },
    }


def cmd_solve(args, argv) -> int:
    problem = _load(args.problem)
    if problem is None:
        return EXIT_USAGE
    synth = OcpSynthesizer(problem, _options(args))
    if args.dump_qp:
        qp, _ = synth.build_qp()
        Path(args.dump_qp).write_text(qp.to_json())
    try:
        result = synth.solve()
    except InfeasibleProblem as exc:
        payload = {"status": "infeasible", "meta": _meta(argv),
                   "solver": {"iterations": exc.stats.iterations,
                              "primal_residual": exc.stats.primal_residual,
                              "dual_residual": exc.stats.dual_residual}}
        _emit(payload, args.out)
        return EXIT_INFEASIBLE
    except SolverFailure as exc:
        payload = {"status": exc.stats.status, "meta": _meta(argv),
                   "solver": {"iterations": exc.stats.iterations,
                              "primal_residual": exc.stats.primal_residual,
                              "dual_residual": exc.stats.dual_residual}}
        _emit(payload, args.out)
        return EXIT_SOLVER_FAILURE
    payload = {"status": "optimal", "meta": _meta(argv)}
    payload.update(_result_summary(result, problem))
    _emit(payload, args.out)
    return EXIT_OK


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _simulate_one(task):
    """Worker: one seeded closed-loop run (used by the process pool)."""
    problem, options, steps, master_seed, run_idx, policy, freeze, tol = task
    rng = run_seed(master_seed, run_idx)
    traj = run_closed_loop(
        problem,
        steps,
        rng,
        policy_mode=policy,
        options=options,
        freeze_uncertainty=freeze,
        violation_tol=tol,
    )
    return run_idx, traj


def cmd_simulate(args, argv) -> int:
    problem = _load(args.problem)
    if problem is None:
        return EXIT_USAGE
    options = _options(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [
        (problem, options, args.steps, args.seed, idx, args.policy,
         args.freeze_uncertainty, args.violation_tol)
        for idx in range(args.runs)
    ]
    if args.jobs > 1 and len(tasks) > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            results = pool.map(_simulate_one, tasks)
    else:
        results = [_simulate_one(t) for t in tasks]

    total_viol = 0
    infeasible_runs = []
    solve_times = []
    files = []
    for run_idx, traj in results:
        name = out_dir / f"run_{run_idx:04d}.csv"
        name.write_text(trajectory_csv(traj, meta=_meta(argv)))
        files.append(str(name))
        total_viol += traj.n_violations
        if traj.status != "completed":
            infeasible_runs.append({"run": run_idx, "status": traj.status,
                                    "failed_at": traj.failed_at})
        solve_times.extend(rec.solve_time for rec in traj.per_step_solve)
    summary = {
        "meta": _meta(argv),
        "runs": args.runs,
        "steps": args.steps,
        "seed": args.seed,
        "policy": args.policy,
        "total_violations": total_viol,
        "runs_completed": args.runs - len(infeasible_runs),
        "failed_runs": infeasible_runs,
        "solve_time_s": {
            "mean": statistics.fmean(solve_times) if solve_times else 0.0,
            "median": statistics.median(solve_times) if solve_times else 0.0,
            "max": max(solve_times, default=0.0),
            "count": len(solve_times),
        },
        "files": files,
    }
    _emit(summary, args.out)
    return EXIT_OK


def _bench_one(task):
    na, nb, T, trial, seed, options = task
    rng = np.random.default_rng(np.random.SeedSequence([seed, na, nb, T, trial]))
    problem = random_benchmark_problem(na, nb, T, rng)
    try:
        synth = OcpSynthesizer(problem, options)
        result = synth.solve()
        st = result.solver_stats
        return (na, nb, T, trial, st.status, st.n_vars, st.n_eq + st.n_ineq,
                st.assemble_time, st.solve_time)
    except (InfeasibleProblem, SolverFailure) as exc:
        st = exc.stats
        return (na, nb, T, trial, st.status, st.n_vars, st.n_eq + st.n_ineq,
                st.assemble_time, st.solve_time)


def parse_grid(spec: str) -> list[tuple[int, int, int]]:
    if not spec.strip():
        return []
    rows = []
    for part in spec.split(";"):
        part = part.strip()
        if not part:
            continue
        pieces = part.split(",")
        if len(pieces) != 3:
            raise ValueError(f"grid row '{part}' must be 'na,nb,T'")
        na, nb, T = (int(p) for p in pieces)
        rows.append((na, nb, T))
    return rows


DEFAULT_GRID = "8,4,13;16,8,21;24,12,29;32,16,37;40,20,45;0,0,13;0,0,21;0,0,29;0,0,37;0,0,45"


def cmd_bench(args, argv) -> int:
    try:
        grid = parse_grid(args.grid)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    options = _options(args)
    tasks = [
        (na, nb, T, trial, args.seed, options)
        for (na, nb, T) in grid
        for trial in range(args.trials)
    ]
    if args.jobs > 1 and len(tasks) > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            rows = pool.map(_bench_one, tasks)
    else:
        rows = [_bench_one(t) for t in tasks]
    lines = [f"# {_meta(argv)}",
             "na,nb,T,trial,status,n_vars,n_cons,t_assemble_s,t_solve_s"]
    for row in rows:
        na, nb, T, trial, status, n_vars, n_cons, t_a, t_s = row
        lines.append(f"{na},{nb},{T},{trial},{status},{n_vars},{n_cons},{t_a:.6f},{t_s:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_verify(args, argv) -> int:
    problem = _load(args.problem)
    if problem is None:
        return EXIT_USAGE
    options = _options(args)
    synth = OcpSynthesizer(problem, options)
    try:
        result = synth.solve()
    except InfeasibleProblem:
        print("verify: problem is infeasible; nothing to check", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverFailure as exc:
        print(f"verify: solver failed ({exc.stats.status})", file=sys.stderr)
        return EXIT_SOLVER_FAILURE

    rng = np.random.default_rng(args.seed)
    sys_ = problem.system
    a_hat, b_hat, _, _ = build_nominal_blocks(sys_, problem.horizon_T)
    checks: list[tuple[str, float, float, bool]] = []

    def add(name, value, bound, ok):
        checks.append((name, value, bound, ok))

    ar = affine_residual(result, a_hat, b_hat)
    add("affine_residual", ar, 1e-6, ar <= 1e-6)
    cr = controller_residual(result)
    add("controller_identity", cr, 1e-8, cr <= 1e-8)
    rx, ru = response_identity_check(result, a_hat, b_hat, trials=100, rng=rng)
    add("response_identity_x", rx, 1e-6, rx <= 1e-6)
    add("response_identity_u", ru, 1e-6, ru <= 1e-6)
    sl = overapprox_slack(problem, result)
    add("overapprox_slack", sl, -1e-6, sl >= -1e-6)

    draws = 1000 if args.level == "fast" else 200
    worst = 0.0
    T = problem.horizon_T
    for _ in range(draws):
        v_seq = [sample_uncertainty(sys_.n_vertices, rng) for _ in range(T)]
        w_seq = [sample_disturbance(sys_.nx, sys_.sigma_w, rng) for _ in range(T)]
        delta = realize_delta(sys_, result.controller_k, result.h,
                              problem.x_hist, problem.u_hist, v_seq, w_seq)
        _, norm = filter_membership(result.sigma, delta)
        worst = max(worst, norm)
    add(f"filter_membership_mc[{draws}]", worst, 1.0 + 1e-6, worst <= 1.0 + 1e-6)

    if args.level == "exhaustive":
        try:
            worst_ex, n_cases = exhaustive_membership(problem, result)
        except ValueError as exc:
            print(f"error: exhaustive enumeration not tractable: {exc}", file=sys.stderr)
            return EXIT_USAGE
        add(f"filter_membership_corners[{n_cases}]", worst_ex, 1.0 + 1e-6,
            worst_ex <= 1.0 + 1e-6)

    failed = False
    print(f"# {_meta(argv)}")
    for name, value, bound, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {value:.3e} (bound {bound:.1e})")
        failed = failed or not ok
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="delaympc",
        description="Robust MPC synthesis for uncertain linear time-delay systems",
    )
    parser.add_argument("--version", action="version", version=f"delaympc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one robust OCP from a problem file")
    p.add_argument("problem")
    _add_solver_flags(p)
    p.add_argument("--out", default=None, help="write the result JSON here instead of stdout")
    p.add_argument("--dump-qp", default=None, help="dump the assembled QP as JSON")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="seeded closed-loop Monte Carlo runs")
    p.add_argument("problem")
    _add_solver_flags(p)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy", choices=("receding", "openloop_policy"), default="receding")
    p.add_argument("--freeze-uncertainty", action="store_true",
                   help="draw the uncertainty once per run instead of per step")
    p.add_argument("--violation-tol", type=float, default=1e-6)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--out", default=None, help="write the summary JSON here instead of stdout")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="timing sweep over random delayed systems")
    _add_solver_flags(p)
    p.add_argument("--grid", default=DEFAULT_GRID,
                   help="semicolon-separated na,nb,T rows (empty for none)")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="write the CSV here instead of stdout")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="solve and run the oracle checks")
    p.add_argument("problem")
    _add_solver_flags(p)
    p.add_argument("--level", choices=("fast", "exhaustive"), default="fast")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args, argv)


if __name__ == "__main__":
    sys.exit(main())
