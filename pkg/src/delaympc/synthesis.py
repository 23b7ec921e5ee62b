"""Convex synthesis of robust time-varying state feedback for delay systems.

Decision variables are the causal response operators (phi_x, phi_u) of the
delay-compensated closed loop together with a causal disturbance filter
sigma whose diagonal is parameterized by positive vectors q.  The module
lays out those variables, generates the affine response constraints, the
vertex-wise uncertainty over-approximation rows, and the l1-tightened
state/input/terminal constraints, assembles everything into a standard-form
QP, and maps the solution back to a controller and nominal trajectories.

Assembly is split in two phases: a template holding every coefficient that
does not depend on the anchor state or history, plus a cheap instantiation
step that fills the values scaling with the current state x0 and the delay
offset h.  A receding-horizon loop therefore pays the symbolic cost once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import qpsolver
from .blockops import (
    BltMatrix,
    StackedSignal,
    blt_right_divide,
    build_delta_blocks,
    build_nominal_blocks,
    compute_offset,
)
from .model import OcpProblem, ProblemValidationError, validate
from .qpsolver import QpStatus, StandardQp

__all__ = [
    "SynthesisOptions",
    "VariableLayout",
    "layout_variables",
    "SigmaFilter",
    "SolverStats",
    "SynthesisResult",
    "OcpSynthesizer",
    "solve_ocp",
    "terminal_weight_table",
    "InfeasibleProblem",
    "SolverFailure",
]


class InfeasibleProblem(RuntimeError):
    """The synthesis QP admits no feasible point (certificate from the solver)."""

    def __init__(self, message: str, stats: "SolverStats"):
        super().__init__(message)
        self.stats = stats


class SolverFailure(RuntimeError):
    """The QP solver stopped without a certified optimum (e.g. iteration cap)."""

    def __init__(self, message: str, stats: "SolverStats"):
        super().__init__(message)
        self.stats = stats


@dataclass(frozen=True)
class SynthesisOptions:
    """Knobs for the synthesis QP.

    filter_mode "full" keeps the strictly-lower filter blocks as free
    variables; "diag" pins them to zero so the filtered disturbance is a
    per-step hyperrectangle.  terminal_cost_mode "per_time" spreads the
    terminal weight over each of the last max(na, 1) states; "repeat_final"
    instead charges the final state once per delayed step, which is the
    printed form of the cost and differs only when multiple optima exist.
    """

    filter_mode: str = "full"
    q_min: float = 1e-8
    tol_feas: float = 1e-7
    tol_opt: float = 1e-7
    max_iter: int = 200_000
    backend: str = "ipm"
    polish: bool = True
    terminal_cost_mode: str = "per_time"

    def __post_init__(self):
        if self.filter_mode not in ("full", "diag"):
            raise ValueError("filter_mode must be 'full' or 'diag'")
        if self.terminal_cost_mode not in ("per_time", "repeat_final"):
            raise ValueError("terminal_cost_mode must be 'per_time' or 'repeat_final'")


def _tri(i: int, j: int) -> int:
    return i * (i + 1) // 2 + j


def _strict_tri(i: int, j: int) -> int:
    return i * (i - 1) // 2 + j


class VariableLayout:
    """Deterministic index layout of the QP decision vector.

    Core variables come first: phi_x blocks (row-major over (i, j)), phi_u
    blocks, the positive diagonal filter vectors q_1..q_T, then (in full
    filter mode) the strictly-lower filter blocks.  Epigraph auxiliaries for
    absolute values and l1 norms are appended by the constraint builders.
    The core count depends only on (nx, nu, T), never on the delay horizon.
    """

    def __init__(self, nx: int, nu: int, T: int, filter_mode: str = "full"):
        if T < 1:
            raise ValueError("horizon must be >= 1")
        self.nx = nx
        self.nu = nu
        self.T = T
        self.filter_mode = filter_mode
        n_blocks = (T + 1) * (T + 2) // 2
        self.n_response_blocks = n_blocks
        self.phi_x_offset = 0
        self.phi_u_offset = n_blocks * nx * nx
        self.q_offset = self.phi_u_offset + n_blocks * nu * nx
        self.sigma_sub_offset = self.q_offset + T * nx
        n_sub = T * (T + 1) // 2 * nx * nx if filter_mode == "full" else 0
        self.core_count = self.sigma_sub_offset + n_sub
        self._n_aux = 0
        self._frozen = False

    # -- core indexing -------------------------------------------------------

    def phi_x_block(self, i: int, j: int) -> int:
        return self.phi_x_offset + _tri(i, j) * self.nx * self.nx

    def phi_u_block(self, i: int, j: int) -> int:
        return self.phi_u_offset + _tri(i, j) * self.nu * self.nx

    def q_index(self, k: int, r: int = 0) -> int:
        """First entry of the k-th positive diagonal vector, k = 1..T."""
        if not 1 <= k <= self.T:
            raise IndexError(f"q block index {k} outside 1..{self.T}")
        return self.q_offset + (k - 1) * self.nx + r

    def sigma_sub_block(self, i: int, j: int) -> int:
        if self.filter_mode != "full":
            raise LookupError("no strictly-lower filter variables in diag mode")
        if not 0 <= j < i <= self.T:
            raise IndexError(f"({i}, {j}) is not strictly lower")
        return self.sigma_sub_offset + _strict_tri(i, j) * self.nx * self.nx

    # -- auxiliaries -----------------------------------------------------------

    def alloc_aux(self, count: int) -> int:
        if self._frozen:
            raise RuntimeError("layout is frozen; no further auxiliaries")
        start = self.core_count + self._n_aux
        self._n_aux += count
        return start

    def freeze(self) -> None:
        self._frozen = True

    @property
    def n_aux(self) -> int:
        return self._n_aux

    @property
    def n_vars(self) -> int:
        return self.core_count + self._n_aux


def layout_variables(nx: int, nu: int, T: int, filter_mode: str = "full") -> VariableLayout:
    """Fresh variable layout for the given dimensions and filter mode."""
    return VariableLayout(nx, nu, T, filter_mode)


def terminal_weight_table(
    T: int, na: int, q_weight: np.ndarray, qt_weight: np.ndarray, mode: str = "per_time"
) -> list[np.ndarray]:
    """Per-time state weight W_t, t = 0..T, under the chosen terminal handling.

    "per_time": the last max(na, 1) states carry the terminal weight, all
    earlier ones the stage weight.  "repeat_final": stage weight through
    T - na, then the final state alone carries na copies of the terminal
    weight (and none when na = 0).
    """
    if mode == "per_time":
        split = T - max(na, 1)
        return [q_weight if t <= split else qt_weight for t in range(T + 1)]
    if mode == "repeat_final":
        table = [q_weight if t <= T - na else np.zeros_like(q_weight) for t in range(T + 1)]
        if na >= 1:
            table[T] = table[T] + float(na) * qt_weight
        return table
    raise ValueError(f"unknown terminal cost mode '{mode}'")


@dataclass(frozen=True)
class SigmaFilter:
    """Causal disturbance filter: identity leading block, positive diagonals q,
    and optional strictly-lower blocks (full mode)."""

    q: np.ndarray  # (T, nx); row k-1 is the diagonal of block (k, k)
    sub: dict[tuple[int, int], np.ndarray] | None

    def __init__(self, q, sub=None):
        q = np.array(q, dtype=float)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(
            self,
            "sub",
            {ij: np.asarray(b, dtype=float) for ij, b in sub.items()} if sub else None,
        )

    @property
    def horizon_T(self) -> int:
        return self.q.shape[0]

    @property
    def nx(self) -> int:
        return self.q.shape[1]

    def to_blt(self) -> BltMatrix:
        T, nx = self.horizon_T, self.nx
        blocks: dict[tuple[int, int], np.ndarray] = {(0, 0): np.eye(nx)}
        for k in range(1, T + 1):
            blocks[(k, k)] = np.diag(self.q[k - 1])
        if self.sub:
            blocks.update(self.sub)
        return BltMatrix(T, nx, nx, blocks)


@dataclass(frozen=True)
class SolverStats:
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    solve_time: float
    assemble_time: float
    n_vars: int
    n_eq: int
    n_ineq: int
    qp_objective: float
    polished: bool
    backend: str


@dataclass(frozen=True)
class SynthesisResult:
    """Solved synthesis: response operators, filter, controller, nominal plan."""

    phi_x: BltMatrix
    phi_u: BltMatrix
    sigma: SigmaFilter
    h: StackedSignal
    controller_k: BltMatrix
    nominal_x: StackedSignal
    nominal_u: StackedSignal
    objective: float
    solver_stats: SolverStats


def _kron_eye_triplets(D: np.ndarray, n_eye: int):
    """COO triplets of the map X -> D @ X on row-major vectorized blocks."""
    r, a = np.nonzero(D)
    if r.size == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
    off = np.arange(n_eye, dtype=np.int64)
    rows = (r[:, None] * n_eye + off).ravel()
    cols = (a[:, None] * n_eye + off).ravel()
    vals = np.repeat(D[r, a], n_eye)
    return rows, cols, vals


class _Triplets:
    """Accumulator for COO triplets."""

    def __init__(self):
        self.rows: list[np.ndarray] = []
        self.cols: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        if rows.size:
            self.rows.append(rows)
            self.cols.append(cols)
            self.vals.append(vals)

    def arrays(self):
        if not self.rows:
            return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0)
        return (
            np.concatenate(self.rows),
            np.concatenate(self.cols),
            np.concatenate(self.vals),
        )


class _ParamTriplets:
    """Entry-level triplets whose value is val_head * x0[b] at col col_head + b.

    Every coefficient scaling with the anchor state follows this one pattern,
    so instantiation is a single outer product.
    """

    def __init__(self, nx: int):
        self.nx = nx
        self.rows: list[np.ndarray] = []
        self.col_heads: list[np.ndarray] = []
        self.val_heads: list[np.ndarray] = []

    def add(self, rows, col_heads, val_heads):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size:
            self.rows.append(rows)
            self.col_heads.append(np.asarray(col_heads, dtype=np.int64))
            self.val_heads.append(np.asarray(val_heads, dtype=float))

    def finalize(self):
        if not self.rows:
            self._rows_full = np.zeros(0, dtype=np.int64)
            self._cols_full = np.zeros(0, dtype=np.int64)
            self._heads = np.zeros(0)
            return
        rows = np.concatenate(self.rows)
        heads_c = np.concatenate(self.col_heads)
        self._heads = np.concatenate(self.val_heads)
        off = np.arange(self.nx, dtype=np.int64)
        self._rows_full = np.repeat(rows, self.nx)
        self._cols_full = (heads_c[:, None] + off).ravel()

    def values(self, x0: np.ndarray):
        return self._rows_full, self._cols_full, np.outer(self._heads, x0).ravel()


class OcpSynthesizer:
    """Builds the synthesis QP for one problem shape and solves it for any
    anchoring history.  Construction performs the full symbolic assembly;
    ``solve``/``build_qp`` only fill state-dependent values."""

    def __init__(self, problem: OcpProblem, options: SynthesisOptions | None = None):
        violations = validate(problem)
        if violations:
            raise ProblemValidationError(violations)
        self.problem = problem
        self.options = options or SynthesisOptions()
        t0 = time.perf_counter()

        sys = problem.system
        self.nx, self.nu, self.T = sys.nx, sys.nu, problem.horizon_T
        self.na, self.nb = sys.na, sys.nb
        T, nx, nu = self.T, self.nx, self.nu

        self.a_hat, self.b_hat, self.a_minus, self.b_minus = build_nominal_blocks(sys, T)
        self.vertex_blocks = [build_delta_blocks(v, T) for v in sys.vertices]
        # dense forms used for the constant part of v at instantiation time
        self._vertex_da_dense = [blk[0].to_dense() for blk in self.vertex_blocks]

        self.layout = VariableLayout(nx, nu, T, self.options.filter_mode)
        self.weight_table = terminal_weight_table(
            T, self.na, problem.q_weight, problem.qt_weight, self.options.terminal_cost_mode
        )

        self._static = _Triplets()  # inequality coefficients, fixed values
        self._param = _ParamTriplets(nx)  # inequality coefficients scaling with x0
        self._row = 0  # next inequality row
        self._h_static: list[tuple[int, float]] = []
        self.row_families: list[tuple[str, int, int]] = []

        self._build_equalities()
        self._build_overapprox()
        self._build_tightenings()
        self._build_q_floor()
        self.layout.freeze()
        self.m_ineq = self._row

        self._param.finalize()
        sr, sc, sv = self._static.arrays()
        self._g_static = (sr, sc, sv)
        h0 = np.zeros(self.m_ineq)
        for idx, val in self._h_static:
            h0[idx] = val
        self._h_base = h0
        self._build_cost_pattern()
        self.template_time = time.perf_counter() - t0

    # ------------------------------------------------------------------
    # equality block: response parameterization

    def _build_equalities(self):
        nx, nu, T, na = self.nx, self.nu, self.T, self.na
        lay = self.layout
        a_mats = [np.asarray(m) for m in self.problem.system.a_nom]
        b_mats = [np.asarray(m) for m in self.problem.system.b_nom]
        kron_a = [_kron_eye_triplets(m, nx) for m in a_mats]
        kron_b = [_kron_eye_triplets(m, nx) for m in b_mats]

        trip = _Triplets()
        b_entries: list[tuple[int, float]] = []
        blk = nx * nx
        for i in range(T + 1):
            for j in range(i + 1):
                base = _tri(i, j) * blk
                # + phi_x[i, j]
                ar = np.arange(blk, dtype=np.int64)
                trip.add(base + ar, lay.phi_x_block(i, j) + ar, np.ones(blk))
                # - (Z A_hat) phi_x and - (Z B_hat) phi_u terms
                for m in range(max(j, i - 1 - na), i):
                    k = i - 1 - m
                    if k <= na:
                        kr, kc, kv = kron_a[k]
                        trip.add(base + kr, lay.phi_x_block(m, j) + kc, -kv)
                for m in range(max(j, i - 1 - self.nb), i):
                    k = i - 1 - m
                    if k <= self.nb:
                        kr, kc, kv = kron_b[k]
                        trip.add(base + kr, lay.phi_u_block(m, j) + kc, -kv)
                # - sigma[i, j]
                if i == j == 0:
                    eye = np.eye(nx).ravel()
                    for idx in range(blk):
                        if eye[idx]:
                            b_entries.append((base + idx, eye[idx]))
                elif i == j:
                    rr = np.arange(nx, dtype=np.int64)
                    trip.add(
                        base + rr * nx + rr,
                        np.asarray([lay.q_index(i, r) for r in range(nx)], dtype=np.int64),
                        -np.ones(nx),
                    )
                elif self.options.filter_mode == "full":
                    trip.add(base + ar, lay.sigma_sub_block(i, j) + ar, -np.ones(blk))
        self.m_eq = (T + 1) * (T + 2) // 2 * blk
        er, ec, ev = trip.arrays()
        self._a_eq_triplets = (er, ec, ev)
        b_eq = np.zeros(self.m_eq)
        for idx, val in b_entries:
            b_eq[idx] = val
        self.b_eq = b_eq

    # ------------------------------------------------------------------
    # uncertainty over-approximation rows (per vertex)

    def _new_rows(self, count: int) -> int:
        start = self._row
        self._row += count
        return start

    def _build_overapprox(self):
        nx, nu, T, na, nb = self.nx, self.nu, self.T, self.na, self.nb
        lay = self.layout
        sigma_w = self.problem.system.sigma_w
        full = self.options.filter_mode == "full"
        fam_start = self._row

        # rows whose rhs is +-(constant part of v); grouped per vertex
        self._v_plus_rows: list[np.ndarray] = []
        self._v_minus_rows: list[np.ndarray] = []

        for ell, (d_a, d_b, _, _) in enumerate(self.vertex_blocks):
            da_mats = [np.asarray(m) for m in self.problem.system.vertices[ell].d_a]
            db_mats = [np.asarray(m) for m in self.problem.system.vertices[ell].d_b]
            kron_da = [_kron_eye_triplets(m, nx) for m in da_mats]
            kron_db = [_kron_eye_triplets(m, nx) for m in db_mats]
            vplus = np.zeros(T * nx, dtype=np.int64)
            vminus = np.zeros(T * nx, dtype=np.int64)
            for t in range(T):
                i = t + 1
                # |v_t| epigraph: s_v >= +-(v-expression)
                s_v = lay.alloc_aux(nx)
                rp = self._new_rows(nx)
                rm = self._new_rows(nx)
                ar = np.arange(nx, dtype=np.int64)
                vplus[t * nx : (t + 1) * nx] = rp + ar
                vminus[t * nx : (t + 1) * nx] = rm + ar
                self._static.add(rp + ar, s_v + ar, -np.ones(nx))
                self._static.add(rm + ar, s_v + ar, -np.ones(nx))
                for m in range(max(0, i - 1 - na), i):
                    D = da_mats[i - 1 - m]
                    r_nz, a_nz = np.nonzero(D)
                    if r_nz.size:
                        heads = lay.phi_x_block(m, 0) + a_nz * nx
                        self._param.add(rp + r_nz, heads, D[r_nz, a_nz])
                        self._param.add(rm + r_nz, heads, -D[r_nz, a_nz])
                for m in range(max(0, i - 1 - nb), i):
                    D = db_mats[i - 1 - m]
                    r_nz, a_nz = np.nonzero(D)
                    if r_nz.size:
                        heads = lay.phi_u_block(m, 0) + a_nz * nx
                        self._param.add(rp + r_nz, heads, D[r_nz, a_nz])
                        self._param.add(rm + r_nz, heads, -D[r_nz, a_nz])
                if full:
                    heads = lay.sigma_sub_block(i, 0) + ar * nx
                    self._param.add(rp + ar, heads, -np.ones(nx))
                    self._param.add(rm + ar, heads, np.ones(nx))

                # l1 rows of C blocks: s_c >= |entry| for block columns 1..t
                s_c_all = []
                blk = nx * nx
                for j in range(1, t + 1):
                    s_c = lay.alloc_aux(blk)
                    s_c_all.append(s_c)
                    crp = self._new_rows(blk)
                    crm = self._new_rows(blk)
                    arb = np.arange(blk, dtype=np.int64)
                    self._static.add(crp + arb, s_c + arb, -np.ones(blk))
                    self._static.add(crm + arb, s_c + arb, -np.ones(blk))
                    for m in range(max(j, i - 1 - na), i):
                        kr, kc, kv = kron_da[i - 1 - m]
                        cb = lay.phi_x_block(m, j)
                        self._static.add(crp + kr, cb + kc, kv)
                        self._static.add(crm + kr, cb + kc, -kv)
                    for m in range(max(j, i - 1 - nb), i):
                        kr, kc, kv = kron_db[i - 1 - m]
                        cb = lay.phi_u_block(m, j)
                        self._static.add(crp + kr, cb + kc, kv)
                        self._static.add(crm + kr, cb + kc, -kv)
                    if full:
                        cb = lay.sigma_sub_block(i, j)
                        self._static.add(crp + arb, cb + arb, -np.ones(blk))
                        self._static.add(crm + arb, cb + arb, np.ones(blk))

                # budget row: s_v + sum of row-wise l1 entries + sigma_w <= q
                br = self._new_rows(nx)
                self._static.add(br + ar, s_v + ar, np.ones(nx))
                for s_c in s_c_all:
                    for r in range(nx):
                        cc = np.arange(nx, dtype=np.int64)
                        self._static.add(
                            np.full(nx, br + r, dtype=np.int64),
                            s_c + r * nx + cc,
                            np.ones(nx),
                        )
                self._static.add(
                    br + ar,
                    np.asarray([lay.q_index(i, r) for r in range(nx)], dtype=np.int64),
                    -np.ones(nx),
                )
                for r in range(nx):
                    self._h_static.append((br + r, -sigma_w))
            self._v_plus_rows.append(vplus)
            self._v_minus_rows.append(vminus)
        self.row_families.append(("overapprox", fam_start, self._row))

    # ------------------------------------------------------------------
    # tightened polytope constraints

    def _tighten_facet(self, phi_block, t: int, f: np.ndarray) -> int:
        """One tightened facet row at time t for the given response operator.

        Allocates per-column epigraph auxiliaries s >= |f' Phi[t, i] e_c| for
        i = 1..t, then emits the bound row f' Phi[t, 0] x0 + sum(s) <= rhs,
        whose first term scales with x0 and whose rhs the caller fills in.
        Returns the bound row index.
        """
        lay = self.layout
        nx = self.nx
        f_nz = np.nonzero(f)[0]
        aux_all = []
        for i in range(1, t + 1):
            s = lay.alloc_aux(nx)
            aux_all.append(s)
            rp = self._new_rows(nx)
            rm = self._new_rows(nx)
            cc = np.arange(nx, dtype=np.int64)
            self._static.add(rp + cc, s + cc, -np.ones(nx))
            self._static.add(rm + cc, s + cc, -np.ones(nx))
            cb = phi_block(t, i)
            for a in f_nz:
                self._static.add(rp + cc, cb + a * nx + cc, np.full(nx, f[a]))
                self._static.add(rm + cc, cb + a * nx + cc, np.full(nx, -f[a]))
        br = self._new_rows(1)
        self._param.add(
            np.full(f_nz.size, br, dtype=np.int64),
            phi_block(t, 0) + f_nz * nx,
            f[f_nz],
        )
        cc = np.arange(nx, dtype=np.int64)
        for s in aux_all:
            self._static.add(np.full(nx, br, dtype=np.int64), s + cc, np.ones(nx))
        return br

    def _build_tightenings(self):
        lay = self.layout
        T = self.T
        problem = self.problem

        # state rows, t = 0..T-1; rhs depends on h so remember (rows, F, b) per t
        fam_start = self._row
        self._state_bound_groups: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        for t in range(T):
            ps = problem.x_set_at(t)
            rows_t = np.asarray(
                [self._tighten_facet(lay.phi_x_block, t, f) for f, _ in ps.facets()],
                dtype=np.int64,
            )
            self._state_bound_groups.append((rows_t, ps.f_mat, ps.b_vec))
        self.row_families.append(("state_tighten", fam_start, self._row))

        # terminal rows at t = T
        fam_start = self._row
        self._terminal_bound_group = None
        if problem.terminal_set is not None:
            ps = problem.terminal_set
            rows_t = np.asarray(
                [self._tighten_facet(lay.phi_x_block, T, f) for f, _ in ps.facets()],
                dtype=np.int64,
            )
            self._terminal_bound_group = (rows_t, ps.f_mat, ps.b_vec)
        self.row_families.append(("terminal_tighten", fam_start, self._row))

        # input rows, t = 0..T-1; no delay offset enters the input channel
        fam_start = self._row
        for t in range(T):
            for f, b in problem.u_set.facets():
                br = self._tighten_facet(lay.phi_u_block, t, f)
                self._h_static.append((br, float(b)))
        self.row_families.append(("input_tighten", fam_start, self._row))

    def _build_q_floor(self):
        fam_start = self._row
        lay = self.layout
        nx, T = self.nx, self.T
        q_min = self.options.q_min
        for k in range(1, T + 1):
            br = self._new_rows(nx)
            ar = np.arange(nx, dtype=np.int64)
            self._static.add(br + ar, lay.q_index(k) + ar, -np.ones(nx))
            for r in range(nx):
                self._h_static.append((br + r, -q_min))
        self.row_families.append(("q_floor", fam_start, self._row))

    # ------------------------------------------------------------------
    # cost

    def _build_cost_pattern(self):
        # dense (blk x blk) index pattern per first-block-column cost block
        lay = self.layout
        nx, nu, T = self.nx, self.nu, self.T
        blk = nx * nx
        pairs = []
        for t in range(T + 1):
            base = lay.phi_x_block(t, 0)
            rr = np.repeat(base + np.arange(blk, dtype=np.int64), blk)
            cc = np.tile(base + np.arange(blk, dtype=np.int64), blk)
            pairs.append((rr, cc))
        ublk = nu * nx
        for t in range(T):
            base = lay.phi_u_block(t, 0)
            rr = np.repeat(base + np.arange(ublk, dtype=np.int64), ublk)
            cc = np.tile(base + np.arange(ublk, dtype=np.int64), ublk)
            pairs.append((rr, cc))
        self._p_rows = np.concatenate([r for r, _ in pairs])
        self._p_cols = np.concatenate([c for _, c in pairs])

    def _cost_values(self, x0: np.ndarray, h: StackedSignal):
        nx, nu, T = self.nx, self.nu, self.T
        x0x0 = np.outer(x0, x0)
        vals = [
            (2.0 * np.kron(self.weight_table[t], x0x0)).ravel() for t in range(T + 1)
        ]
        r_kron = (2.0 * np.kron(self.problem.r_weight, x0x0)).ravel()
        vals.extend([r_kron] * T)
        p_vals = np.concatenate(vals)
        q_vec = np.zeros(self.layout.n_vars)
        lay = self.layout
        for t in range(T + 1):
            w_h = self.weight_table[t] @ h.block(t)
            if np.any(w_h):
                base = lay.phi_x_block(t, 0)
                q_vec[base : base + nx * nx] = 2.0 * np.outer(w_h, x0).ravel()
        return p_vals, q_vec

    # ------------------------------------------------------------------
    # instantiation and solving

    def build_qp(
        self, x_hist=None, u_hist=None
    ) -> tuple[StandardQp, StackedSignal]:
        """Standard-form QP (and delay offset h) anchored at the given history."""
        problem = self.problem
        x_hist = problem.x_hist if x_hist is None else tuple(np.asarray(x, float) for x in x_hist)
        u_hist = problem.u_hist if u_hist is None else tuple(np.asarray(u, float) for u in u_hist)
        if len(x_hist) != self.na + 1 or len(u_hist) != self.nb:
            raise ValueError("history lengths must match the delay horizons")
        nx, nu, T = self.nx, self.nu, self.T
        x0 = np.asarray(x_hist[-1], dtype=float)

        _, h = compute_offset(problem.system, T, x_hist, u_hist)
        x_past = (
            np.concatenate([np.ravel(x) for x in x_hist[:-1]]) if self.na else np.zeros(0)
        )
        u_past = np.concatenate([np.ravel(u) for u in u_hist]) if self.nb else np.zeros(0)

        # inequality matrix: static coefficients plus x0-scaled ones
        sr, sc, sv = self._g_static
        pr, pc, pv = self._param.values(x0)
        rows = np.concatenate([sr, pr])
        cols = np.concatenate([sc, pc])
        vals = np.concatenate([sv, pv])
        g = sp.coo_matrix((vals, (rows, cols)), shape=(self.m_ineq, self.layout.n_vars)).tocsc()

        h_ineq = self._h_base.copy()
        # constant part of v per vertex: shifted (dA h + dA- x_past + dB- u_past)
        for ell in range(len(self.vertex_blocks)):
            _, _, da_minus, db_minus = self.vertex_blocks[ell]
            pre = self._vertex_da_dense[ell] @ h.data + da_minus @ x_past + db_minus @ u_past
            vconst = np.zeros((T + 1) * nx)
            vconst[nx:] = pre[:-nx]
            stacked = vconst[nx:]  # blocks 1..T, i.e. v_0..v_{T-1}
            h_ineq[self._v_plus_rows[ell]] = -stacked
            h_ineq[self._v_minus_rows[ell]] = stacked
        # state/terminal rhs: b - f @ h_t
        for t, (rows_t, f_mat, b_vec) in enumerate(self._state_bound_groups):
            h_ineq[rows_t] = b_vec - f_mat @ h.block(t)
        if self._terminal_bound_group is not None:
            rows_t, f_mat, b_vec = self._terminal_bound_group
            h_ineq[rows_t] = b_vec - f_mat @ h.block(T)

        a_eq = sp.coo_matrix(
            (self._a_eq_triplets[2], (self._a_eq_triplets[0], self._a_eq_triplets[1])),
            shape=(self.m_eq, self.layout.n_vars),
        ).tocsc()
        p_vals, q_vec = self._cost_values(x0, h)
        p_mat = sp.coo_matrix(
            (p_vals, (self._p_rows, self._p_cols)),
            shape=(self.layout.n_vars, self.layout.n_vars),
        ).tocsc()
        qp = StandardQp(
            p_mat=p_mat, q_vec=q_vec, a_eq=a_eq, b_eq=self.b_eq, g_ineq=g, h_ineq=h_ineq
        )
        return qp, h

    def _extract(self, z: np.ndarray):
        nx, nu, T = self.nx, self.nu, self.T
        lay = self.layout
        px = {}
        pu = {}
        for i in range(T + 1):
            for j in range(i + 1):
                bx = lay.phi_x_block(i, j)
                px[(i, j)] = z[bx : bx + nx * nx].reshape(nx, nx)
                bu = lay.phi_u_block(i, j)
                pu[(i, j)] = z[bu : bu + nu * nx].reshape(nu, nx)
        phi_x = BltMatrix(T, nx, nx, px)
        phi_u = BltMatrix(T, nu, nx, pu)
        q = z[lay.q_offset : lay.q_offset + T * nx].reshape(T, nx)
        sub = None
        if self.options.filter_mode == "full":
            sub = {}
            for i in range(1, T + 1):
                for j in range(i):
                    b = lay.sigma_sub_block(i, j)
                    sub[(i, j)] = z[b : b + nx * nx].reshape(nx, nx)
        sigma = SigmaFilter(q, sub)
        controller = blt_right_divide(phi_u, phi_x)
        return phi_x, phi_u, sigma, controller

    def solve(self, x_hist=None, u_hist=None) -> SynthesisResult:
        """Assemble and solve; raises InfeasibleProblem / SolverFailure."""
        t0 = time.perf_counter()
        qp, h = self.build_qp(x_hist, u_hist)
        assemble_time = time.perf_counter() - t0
        opts = self.options
        sol = qpsolver.solve(
            qp,
            tol_feas=opts.tol_feas,
            tol_opt=opts.tol_opt,
            max_iter=opts.max_iter,
            polish=opts.polish,
            backend=opts.backend,
        )
        stats = SolverStats(
            status=sol.status.value,
            iterations=sol.iterations,
            primal_residual=sol.primal_residual,
            dual_residual=sol.dual_residual,
            solve_time=sol.wall_time,
            assemble_time=assemble_time + self.template_time,
            n_vars=qp.n,
            n_eq=qp.m_eq,
            n_ineq=qp.m_ineq,
            qp_objective=sol.objective,
            polished=sol.polished,
            backend=opts.backend,
        )
        if sol.status == QpStatus.INFEASIBLE:
            raise InfeasibleProblem("synthesis QP is infeasible", stats)
        if sol.status != QpStatus.OPTIMAL:
            raise SolverFailure(f"QP solver stopped with status {sol.status.value}", stats)

        phi_x, phi_u, sigma, controller = self._extract(sol.z)
        x_hist_eff = self.problem.x_hist if x_hist is None else x_hist
        x0 = np.asarray(x_hist_eff[-1], dtype=float)
        nom_x = StackedSignal.from_blocks(
            [phi_x.block(t, 0) @ x0 + h.block(t) for t in range(self.T + 1)]
        )
        nom_u = StackedSignal.from_blocks(
            [phi_u.block(t, 0) @ x0 for t in range(self.T + 1)]
        )
        objective = 0.0
        for t in range(self.T + 1):
            xv = nom_x.block(t)
            objective += float(xv @ self.weight_table[t] @ xv)
        for t in range(self.T):
            uv = nom_u.block(t)
            objective += float(uv @ self.problem.r_weight @ uv)
        return SynthesisResult(
            phi_x=phi_x,
            phi_u=phi_u,
            sigma=sigma,
            h=h,
            controller_k=controller,
            nominal_x=nom_x,
            nominal_u=nom_u,
            objective=objective,
            solver_stats=stats,
        )


def solve_ocp(problem: OcpProblem, options: SynthesisOptions | None = None) -> SynthesisResult:
    """One-shot synthesis for a validated problem."""
    return OcpSynthesizer(problem, options).solve()
