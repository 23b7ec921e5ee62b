"""Closed-loop simulation of the true uncertain delay dynamics.

Propagates the delayed update with sampled vertex weights and bounded
disturbances, runs the receding-horizon loop (re-solving the synthesis QP
at every step) or rolls a single solved policy open-loop, and audits every
visited state and input against the constraint sets.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import OcpProblem, TimeDelaySystem
from .synthesis import (
    InfeasibleProblem,
    OcpSynthesizer,
    SolverFailure,
    SynthesisOptions,
    SynthesisResult,
)

__all__ = [
    "Trajectory",
    "ConstraintViolation",
    "StepSolveRecord",
    "step_dynamics",
    "sample_uncertainty",
    "sample_disturbance",
    "combine_vertices",
    "run_closed_loop",
    "run_seed",
    "trajectory_csv",
]


@dataclass(frozen=True)
class ConstraintViolation:
    """A constraint row violated beyond tolerance: slack is b - f@value < 0."""

    time: int
    constraint_id: str
    slack: float


@dataclass(frozen=True)
class StepSolveRecord:
    k: int
    status: str
    objective: float
    iterations: int
    solve_time: float
    primal_residual: float
    dual_residual: float
    audit: dict | None = None


@dataclass(frozen=True)
class Trajectory:
    """One simulated run: states x(0..N), inputs/disturbances/draws per step."""

    states: np.ndarray
    inputs: np.ndarray
    disturbances: np.ndarray
    uncertainty_draws: np.ndarray
    violations: tuple[ConstraintViolation, ...]
    per_step_solve: tuple[StepSolveRecord, ...]
    status: str  # "completed" | "infeasible" | "solver_failure"
    failed_at: int | None = None

    @property
    def n_steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_violations(self) -> int:
        return len(self.violations)


def combine_vertices(sys: TimeDelaySystem, weights: np.ndarray):
    """Convex combination of the uncertainty vertices."""
    weights = np.asarray(weights, dtype=float)
    if weights.size != sys.n_vertices:
        raise ValueError(f"need {sys.n_vertices} weights, got {weights.size}")
    d_a = [
        sum(w * v.d_a[i] for w, v in zip(weights, sys.vertices))
        for i in range(sys.na + 1)
    ]
    d_b = [
        sum(w * v.d_b[j] for w, v in zip(weights, sys.vertices))
        for j in range(sys.nb + 1)
    ]
    return d_a, d_b


def step_dynamics(
    sys: TimeDelaySystem,
    x_window: Sequence[np.ndarray],
    u_window: Sequence[np.ndarray],
    weights: np.ndarray,
    w: np.ndarray,
) -> np.ndarray:
    """One true-dynamics update.

    ``x_window`` holds the last na+1 states oldest first (current state
    last); ``u_window`` the last nb+1 inputs oldest first (current input
    last).  ``weights`` is a convex combination over the uncertainty
    vertices; ``w`` the additive disturbance.
    """
    if len(x_window) != sys.na + 1:
        raise ValueError(f"x_window must hold na+1={sys.na + 1} states")
    if len(u_window) != sys.nb + 1:
        raise ValueError(f"u_window must hold nb+1={sys.nb + 1} inputs")
    d_a, d_b = combine_vertices(sys, weights)
    x_new = np.asarray(w, dtype=float).copy()
    for i in range(sys.na + 1):
        x_new += (sys.a_nom[i] + d_a[i]) @ np.asarray(x_window[-1 - i], dtype=float)
    for j in range(sys.nb + 1):
        x_new += (sys.b_nom[j] + d_b[j]) @ np.asarray(u_window[-1 - j], dtype=float)
    return x_new


def sample_uncertainty(M: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the probability simplex (flat Dirichlet)."""
    if M < 1:
        raise ValueError("need at least one vertex")
    if M == 1:
        return np.ones(1)
    return rng.dirichlet(np.ones(M))


def sample_disturbance(nx: int, sigma_w: float, rng: np.random.Generator) -> np.ndarray:
    """Componentwise uniform draw from the infinity-norm ball of radius sigma_w."""
    if sigma_w == 0.0:
        return np.zeros(nx)
    return rng.uniform(-sigma_w, sigma_w, nx)


def run_seed(master_seed: int, run_index: int) -> np.random.Generator:
    """Deterministic per-run generator derived from (master seed, run index)."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(run_index)]))


def _audit_point(ps, value, time, prefix, tol, out: list[ConstraintViolation]):
    slacks = ps.slacks(value)
    for idx in np.flatnonzero(slacks < -tol):
        out.append(
            ConstraintViolation(
                time=time, constraint_id=f"{prefix}[{idx}]", slack=float(slacks[idx])
            )
        )


def run_closed_loop(
    problem: OcpProblem,
    steps: int,
    rng_seed,
    policy_mode: str = "receding",
    options: SynthesisOptions | None = None,
    *,
    freeze_uncertainty: bool = False,
    violation_tol: float = 1e-6,
    step_audit: Callable[[SynthesisResult, OcpSynthesizer], dict] | None = None,
    synthesizer: OcpSynthesizer | None = None,
) -> Trajectory:
    """Simulate the controlled uncertain system for ``steps`` steps.

    "receding" re-solves the synthesis QP at every step from the recorded
    history and applies the first nominal input.  "openloop_policy" solves
    once and rolls the full time-varying feedback policy over the horizon
    (``steps`` is ignored; the run spans the prediction horizon).  Every
    visited state/input is audited against the constraint sets; violations
    beyond ``violation_tol`` are recorded with their negative slack.
    """
    if policy_mode not in ("receding", "openloop_policy"):
        raise ValueError("policy_mode must be 'receding' or 'openloop_policy'")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    sys = problem.system
    synth = synthesizer or OcpSynthesizer(problem, options)

    frozen_weights = sample_uncertainty(sys.n_vertices, rng) if freeze_uncertainty else None

    def draw_weights():
        return frozen_weights if freeze_uncertainty else sample_uncertainty(sys.n_vertices, rng)

    if policy_mode == "openloop_policy":
        return _run_openloop(problem, synth, rng, draw_weights, violation_tol, step_audit)

    if steps < 0:
        raise ValueError("steps must be >= 0")
    x_hist = [np.asarray(x, dtype=float) for x in problem.x_hist]
    u_hist = [np.asarray(u, dtype=float) for u in problem.u_hist]
    states = [x_hist[-1].copy()]
    inputs: list[np.ndarray] = []
    dists: list[np.ndarray] = []
    draws: list[np.ndarray] = []
    violations: list[ConstraintViolation] = []
    records: list[StepSolveRecord] = []
    status = "completed"
    failed_at = None

    _audit_point(problem.x_set, states[0], 0, "x", violation_tol, violations)
    for k in range(steps):
        try:
            result = synth.solve(x_hist=x_hist, u_hist=u_hist)
        except InfeasibleProblem as exc:
            status, failed_at = "infeasible", k
            records.append(
                StepSolveRecord(
                    k=k,
                    status=exc.stats.status,
                    objective=float("nan"),
                    iterations=exc.stats.iterations,
                    solve_time=exc.stats.solve_time,
                    primal_residual=exc.stats.primal_residual,
                    dual_residual=exc.stats.dual_residual,
                )
            )
            break
        except SolverFailure as exc:
            status, failed_at = "solver_failure", k
            records.append(
                StepSolveRecord(
                    k=k,
                    status=exc.stats.status,
                    objective=float("nan"),
                    iterations=exc.stats.iterations,
                    solve_time=exc.stats.solve_time,
                    primal_residual=exc.stats.primal_residual,
                    dual_residual=exc.stats.dual_residual,
                )
            )
            break
        audit = step_audit(result, synth) if step_audit else None
        records.append(
            StepSolveRecord(
                k=k,
                status=result.solver_stats.status,
                objective=result.objective,
                iterations=result.solver_stats.iterations,
                solve_time=result.solver_stats.solve_time,
                primal_residual=result.solver_stats.primal_residual,
                dual_residual=result.solver_stats.dual_residual,
                audit=audit,
            )
        )
        u = result.nominal_u.block(0).copy()
        weights = draw_weights()
        w = sample_disturbance(sys.nx, sys.sigma_w, rng)
        x_window = x_hist[-(sys.na + 1) :]
        u_window = (u_hist + [u])[-(sys.nb + 1) :]
        x_new = step_dynamics(sys, x_window, u_window, weights, w)

        _audit_point(problem.u_set, u, k, "u", violation_tol, violations)
        _audit_point(problem.x_set, x_new, k + 1, "x", violation_tol, violations)

        inputs.append(u)
        dists.append(w)
        draws.append(np.asarray(weights, dtype=float))
        states.append(x_new)
        x_hist = x_hist[1:] + [x_new] if sys.na > 0 else [x_new]
        if sys.nb > 0:
            u_hist = (u_hist + [u])[-sys.nb :]

    n = len(inputs)
    return Trajectory(
        states=np.asarray(states),
        inputs=np.asarray(inputs).reshape(n, sys.nu),
        disturbances=np.asarray(dists).reshape(n, sys.nx),
        uncertainty_draws=np.asarray(draws).reshape(n, sys.n_vertices),
        violations=tuple(violations),
        per_step_solve=tuple(records),
        status=status,
        failed_at=failed_at,
    )


def _run_openloop(problem, synth, rng, draw_weights, violation_tol, step_audit):
    sys = problem.system
    T = problem.horizon_T
    try:
        result = synth.solve()
    except InfeasibleProblem as exc:
        return Trajectory(
            states=np.asarray([problem.x0]),
            inputs=np.zeros((0, sys.nu)),
            disturbances=np.zeros((0, sys.nx)),
            uncertainty_draws=np.zeros((0, sys.n_vertices)),
            violations=(),
            per_step_solve=(
                StepSolveRecord(
                    k=0,
                    status=exc.stats.status,
                    objective=float("nan"),
                    iterations=exc.stats.iterations,
                    solve_time=exc.stats.solve_time,
                    primal_residual=exc.stats.primal_residual,
                    dual_residual=exc.stats.dual_residual,
                ),
            ),
            status="infeasible",
            failed_at=0,
        )
    audit = step_audit(result, synth) if step_audit else None
    stats = result.solver_stats
    record = StepSolveRecord(
        k=0,
        status=stats.status,
        objective=result.objective,
        iterations=stats.iterations,
        solve_time=stats.solve_time,
        primal_residual=stats.primal_residual,
        dual_residual=stats.dual_residual,
        audit=audit,
    )
    traj = rollout_policy(
        problem,
        result,
        vertex_weights=[draw_weights() for _ in range(T)],
        disturbances=[sample_disturbance(sys.nx, sys.sigma_w, rng) for _ in range(T)],
        violation_tol=violation_tol,
    )
    return Trajectory(
        states=traj.states,
        inputs=traj.inputs,
        disturbances=traj.disturbances,
        uncertainty_draws=np.asarray([np.asarray(w) for w in traj.uncertainty_draws]).reshape(
            T, sys.n_vertices
        ),
        violations=traj.violations,
        per_step_solve=(record,),
        status="completed",
    )


def rollout_policy(
    problem: OcpProblem,
    result: SynthesisResult,
    vertex_weights: Sequence[np.ndarray],
    disturbances: Sequence[np.ndarray],
    violation_tol: float = 1e-6,
) -> Trajectory:
    """Roll the solved time-varying feedback policy against one realization.

    The input at time t feeds back on the offset-corrected states:
    u_t = sum_i K[t, i] (x_i - h_i).  States 0..T-1 are audited against the
    (possibly time-varying) state set, inputs against the input set, and
    the final state against the terminal set when one is present.
    """
    sys = problem.system
    T = problem.horizon_T
    K = result.controller_k
    h = result.h
    if len(vertex_weights) != T or len(disturbances) != T:
        raise ValueError(f"need exactly T={T} weight and disturbance draws")

    x_hist = [np.asarray(x, dtype=float) for x in problem.x_hist]
    u_hist = [np.asarray(u, dtype=float) for u in problem.u_hist]
    xs = [x_hist[-1].copy()]
    us: list[np.ndarray] = []
    violations: list[ConstraintViolation] = []
    _audit_point(problem.x_set_at(0), xs[0], 0, "x", violation_tol, violations)

    for t in range(T):
        u_t = np.zeros(sys.nu)
        for i in range(t + 1):
            u_t += K.block(t, i) @ (xs[i] - h.block(i))
        us.append(u_t)
        _audit_point(problem.u_set, u_t, t, "u", violation_tol, violations)
        x_window = (x_hist[:-1] + xs)[-(sys.na + 1) :]
        u_window = (u_hist + us)[-(sys.nb + 1) :]
        x_next = step_dynamics(sys, x_window, u_window, vertex_weights[t], disturbances[t])
        xs.append(x_next)
        if t + 1 < T:
            _audit_point(problem.x_set_at(t + 1), x_next, t + 1, "x", violation_tol, violations)
    if problem.terminal_set is not None:
        _audit_point(problem.terminal_set, xs[T], T, "xT", violation_tol, violations)

    return Trajectory(
        states=np.asarray(xs),
        inputs=np.asarray(us).reshape(T, sys.nu),
        disturbances=np.asarray([np.asarray(w, dtype=float) for w in disturbances]).reshape(
            T, sys.nx
        ),
        uncertainty_draws=np.asarray(
            [np.asarray(w, dtype=float) for w in vertex_weights]
        ).reshape(T, -1),
        violations=tuple(violations),
        per_step_solve=(),
        status="completed",
    )


def trajectory_csv(traj: Trajectory, meta: str | None = None) -> str:
    """Render a trajectory in the stable CSV layout.

    Columns: k, x_1..x_nx, u_1..u_nu, w_1..w_nx, feasible, n_violations;
    one row per simulated step.  ``meta`` (tool version and invocation) is
    emitted as a leading comment line.
    """
    nx = traj.states.shape[1]
    nu = traj.inputs.shape[1] if traj.inputs.size else 1
    buf = io.StringIO()
    if meta:
        buf.write(f"# {meta}\n")
    writer = csv.writer(buf, lineterminator="\n")
    header = (
        ["k"]
        + [f"x_{i + 1}" for i in range(nx)]
        + [f"u_{i + 1}" for i in range(nu)]
        + [f"w_{i + 1}" for i in range(nx)]
        + ["feasible", "n_violations"]
    )
    writer.writerow(header)
    solve_by_k = {rec.k: rec for rec in traj.per_step_solve}
    viol_by_k: dict[int, int] = {}
    for v in traj.violations:
        viol_by_k[v.time] = viol_by_k.get(v.time, 0) + 1
    for k in range(traj.n_steps):
        rec = solve_by_k.get(k)
        feasible = 1 if (rec is None or rec.status == "optimal") else 0
        row = (
            [k]
            + [f"{v:.17g}" for v in traj.states[k]]
            + [f"{v:.17g}" for v in traj.inputs[k]]
            + [f"{v:.17g}" for v in traj.disturbances[k]]
            + [feasible, viol_by_k.get(k, 0)]
        )
        writer.writerow(row)
    return buf.getvalue()
