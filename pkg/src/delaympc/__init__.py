"""Robust MPC synthesis for uncertain linear time-delay systems.

Builds the finite-horizon convex QP that jointly over-approximates
polytopic model uncertainty plus bounded disturbances and synthesizes a
time-varying robust state-feedback controller, then simulates and verifies
the closed loop.
"""

__version__ = "0.1.0"

from .blockops import (
    BltMatrix,
    StackedSignal,
    blt_apply,
    blt_compose,
    blt_right_divide,
    blt_solve_lower,
    blt_solve_unit_lower,
    build_delta_blocks,
    build_nominal_blocks,
    compute_offset,
    shift_operator,
)
from .model import (
    OcpProblem,
    PolytopeSet,
    ProblemFormatError,
    ProblemValidationError,
    TimeDelaySystem,
    UncertaintyVertex,
    Violation,
    dump_problem,
    load_problem,
    loads_problem,
    validate,
)
from .qpsolver import QpSolution, QpStatus, StandardQp
from .qpsolver import solve as solve_qp
from .simulate import (
    Trajectory,
    rollout_policy,
    run_closed_loop,
    sample_disturbance,
    sample_uncertainty,
    step_dynamics,
    trajectory_csv,
)
from .synthesis import (
    InfeasibleProblem,
    OcpSynthesizer,
    SigmaFilter,
    SolverFailure,
    SynthesisOptions,
    SynthesisResult,
    VariableLayout,
    layout_variables,
    solve_ocp,
)

__all__ = [
    "__version__",
    "BltMatrix",
    "StackedSignal",
    "shift_operator",
    "build_nominal_blocks",
    "build_delta_blocks",
    "compute_offset",
    "blt_apply",
    "blt_compose",
    "blt_solve_unit_lower",
    "blt_solve_lower",
    "blt_right_divide",
    "TimeDelaySystem",
    "UncertaintyVertex",
    "PolytopeSet",
    "OcpProblem",
    "Violation",
    "validate",
    "load_problem",
    "loads_problem",
    "dump_problem",
    "ProblemFormatError",
    "ProblemValidationError",
    "StandardQp",
    "QpSolution",
    "QpStatus",
    "solve_qp",
    "SynthesisOptions",
    "VariableLayout",
    "layout_variables",
    "SigmaFilter",
    "SynthesisResult",
    "OcpSynthesizer",
    "solve_ocp",
    "InfeasibleProblem",
    "SolverFailure",
    "Trajectory",
    "step_dynamics",
    "sample_uncertainty",
    "sample_disturbance",
    "run_closed_loop",
    "rollout_policy",
    "trajectory_csv",
]
