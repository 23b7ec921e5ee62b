"""Solver-agnostic convex QP representation and bundled solvers.

Two self-contained backends share one contract:

* "ipm" (default): a sparse primal-dual interior-point method (Mehrotra
  predictor-corrector) with static regularization, iterative refinement,
  and Farkas-style infeasibility certificates.  Newton-step counts are
  nearly independent of active-set degeneracy, which the synthesis QPs
  exhibit heavily once constraints become active.
* "admm": an operator-splitting first-order method with Ruiz
  equilibration, adaptive penalty, infeasibility certificates, and
  active-set polishing.  Fast on well-conditioned problems, but unable to
  certify tight tolerances on degenerate active sets.

Adapters to external solvers (osqp, cvxopt) plug in behind the same
contract when those packages are installed.
"""

from __future__ import annotations

import enum
import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "StandardQp",
    "QpSolution",
    "QpStatus",
    "solve",
    "available_backends",
]

_INF = float("inf")


class QpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    MAX_ITER = "max_iter"


def _to_csc(mat, shape, name: str) -> sp.csc_matrix:
    if mat is None:
        return sp.csc_matrix(shape)
    if sp.issparse(mat):
        out = mat.tocsc()
    else:
        out = sp.csc_matrix(np.asarray(mat, dtype=float))
    if out.shape != shape:
        raise ValueError(f"{name} has shape {out.shape}, expected {shape}")
    if out.nnz and not np.all(np.isfinite(out.data)):
        raise ValueError(f"{name} contains non-finite entries")
    return out


@dataclass(frozen=True)
class StandardQp:
    """min 0.5 z'Pz + q'z  s.t.  A_eq z = b_eq,  G z <= h."""

    p_mat: sp.csc_matrix
    q_vec: np.ndarray
    a_eq: sp.csc_matrix
    b_eq: np.ndarray
    g_ineq: sp.csc_matrix
    h_ineq: np.ndarray

    def __init__(self, p_mat, q_vec, a_eq=None, b_eq=None, g_ineq=None, h_ineq=None):
        q_vec = np.asarray(q_vec, dtype=float).ravel()
        n = q_vec.size
        b_eq = np.asarray(b_eq, dtype=float).ravel() if b_eq is not None else np.zeros(0)
        h_ineq = np.asarray(h_ineq, dtype=float).ravel() if h_ineq is not None else np.zeros(0)
        p = _to_csc(p_mat, (n, n), "p_mat")
        asym = abs(p - p.T)
        if asym.nnz and asym.max() > 1e-9 * max(1.0, abs(p).max()):
            raise ValueError("p_mat must be symmetric")
        for vec, name in ((q_vec, "q_vec"), (b_eq, "b_eq"), (h_ineq, "h_ineq")):
            if vec.size and not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} contains non-finite entries")
        object.__setattr__(self, "p_mat", p)
        object.__setattr__(self, "q_vec", q_vec)
        object.__setattr__(self, "a_eq", _to_csc(a_eq, (b_eq.size, n), "a_eq"))
        object.__setattr__(self, "b_eq", b_eq)
        object.__setattr__(self, "g_ineq", _to_csc(g_ineq, (h_ineq.size, n), "g_ineq"))
        object.__setattr__(self, "h_ineq", h_ineq)

    @property
    def n(self) -> int:
        return self.q_vec.size

    @property
    def m_eq(self) -> int:
        return self.b_eq.size

    @property
    def m_ineq(self) -> int:
        return self.h_ineq.size

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ (self.p_mat @ z) + self.q_vec @ z)

    def residuals(self, z: np.ndarray, y_eq: np.ndarray, y_ineq: np.ndarray) -> tuple[float, float]:
        """Independent primal/dual residual recomputation for a candidate point."""
        r_eq = self.a_eq @ z - self.b_eq if self.m_eq else np.zeros(0)
        r_in = np.maximum(self.g_ineq @ z - self.h_ineq, 0.0) if self.m_ineq else np.zeros(0)
        primal = max(
            float(np.max(np.abs(r_eq), initial=0.0)), float(np.max(r_in, initial=0.0))
        )
        grad = self.p_mat @ z + self.q_vec
        if self.m_eq:
            grad = grad + self.a_eq.T @ y_eq
        if self.m_ineq:
            grad = grad + self.g_ineq.T @ y_ineq
        dual = float(np.max(np.abs(grad), initial=0.0))
        return primal, dual

    def to_json(self) -> str:
        def enc(mat):
            coo = mat.tocoo()
            return {
                "shape": list(coo.shape),
                "row": coo.row.tolist(),
                "col": coo.col.tolist(),
                "val": coo.data.tolist(),
            }

        return json.dumps(
            {
                "P": enc(self.p_mat),
                "q": self.q_vec.tolist(),
                "A_eq": enc(self.a_eq),
                "b_eq": self.b_eq.tolist(),
                "G": enc(self.g_ineq),
                "h": self.h_ineq.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "StandardQp":
        raw = json.loads(text)

        def dec(obj):
            return sp.coo_matrix(
                (obj["val"], (obj["row"], obj["col"])), shape=tuple(obj["shape"])
            ).tocsc()

        return cls(
            p_mat=dec(raw["P"]),
            q_vec=np.asarray(raw["q"], dtype=float),
            a_eq=dec(raw["A_eq"]),
            b_eq=np.asarray(raw["b_eq"], dtype=float),
            g_ineq=dec(raw["G"]),
            h_ineq=np.asarray(raw["h"], dtype=float),
        )


@dataclass(frozen=True)
class QpSolution:
    z: np.ndarray
    status: QpStatus
    primal_residual: float
    dual_residual: float
    objective: float
    iterations: int
    wall_time: float
    polished: bool = False
    y_eq: np.ndarray | None = None
    y_ineq: np.ndarray | None = None


@dataclass
class _Work:
    """Scaled problem data and ADMM state."""

    P: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix
    l: np.ndarray
    u: np.ndarray
    d: np.ndarray  # variable scaling
    e: np.ndarray  # constraint scaling
    c: float  # cost scaling
    rho: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _ruiz_equilibrate(P, q, A, l, u, iters: int = 10):
    n = q.size
    m = A.shape[0]
    d = np.ones(n)
    e = np.ones(m)
    P = P.copy()
    q = q.copy()
    A = A.copy()
    l = l.copy()
    u = u.copy()
    for _ in range(iters):
        # column infinity norms of the stacked [[P], [A]] and rows of [A', 0]
        col_p = abs(P).max(axis=0).toarray().ravel() if P.nnz else np.zeros(n)
        col_a = abs(A).max(axis=0).toarray().ravel() if A.nnz else np.zeros(n)
        col = np.maximum(col_p, col_a)
        row_a = abs(A).max(axis=1).toarray().ravel() if A.nnz else np.zeros(m)
        col[col == 0] = 1.0
        row_a[row_a == 0] = 1.0
        dd = 1.0 / np.sqrt(col)
        ee = 1.0 / np.sqrt(row_a)
        Dd = sp.diags(dd)
        Ee = sp.diags(ee)
        P = (Dd @ P @ Dd).tocsc()
        A = (Ee @ A @ Dd).tocsc()
        q = dd * q
        l = ee * l
        u = ee * u
        d *= dd
        e *= ee
    # single cost normalization at the end; running it inside the loop
    # compounds without bound when q is zero and P touches few columns
    col_p = abs(P).max(axis=0).toarray().ravel() if P.nnz else np.zeros(n)
    nz = col_p[col_p > 0]
    denom = max(
        float(np.mean(nz)) if nz.size else 0.0,
        float(np.max(np.abs(q), initial=0.0)),
    )
    c = 1.0 / denom if denom > 0 else 1.0
    c = float(np.clip(c, 1e-6, 1e6))
    P = P * c
    q = q * c
    return P, q, A, l, u, d, e, c


class _Admm:
    """Operator-splitting solver for min 0.5 x'Px + q'x s.t. l <= Ax <= u."""

    def __init__(
        self,
        P,
        q,
        A,
        l,
        u,
        *,
        sigma=1e-6,
        alpha=1.6,
        rho0=0.1,
        eq_rho_scale=1e3,
        scaling_iters=10,
        check_interval=25,
    ):
        self.n = q.size
        self.m = A.shape[0]
        self.sigma = sigma
        self.alpha = alpha
        self.check_interval = check_interval
        self.orig = (P.tocsc(), q.copy(), A.tocsc(), l.copy(), u.copy())
        Ps, qs, As, ls, us, d, e, c = _ruiz_equilibrate(P, q, A, l, u, scaling_iters)
        self.w = _Work(Ps, qs, As, ls, us, d, e, c)
        self.eq_mask = np.isfinite(l) & np.isfinite(u) & (l == u)
        self.rho_bar = rho0
        self.eq_rho_scale = eq_rho_scale
        self._set_rho(rho0)
        self.w.x = np.zeros(self.n)
        self.w.z = np.clip(np.zeros(self.m), self.w.l, self.w.u)
        self.w.y = np.zeros(self.m)
        self.AT = self.w.A.T.tocsc()
        self._factorize()

    def _set_rho(self, rho_bar: float) -> None:
        rho = np.full(self.m, rho_bar)
        rho[self.eq_mask] = rho_bar * self.eq_rho_scale
        self.w.rho = np.clip(rho, 1e-6, 1e6)

    def _factorize(self) -> None:
        w = self.w
        K = sp.bmat(
            [
                [w.P + self.sigma * sp.eye(self.n), w.A.T],
                [w.A, -sp.diags(1.0 / w.rho)],
            ],
            format="csc",
        )
        self.lu = spla.splu(K)

    # -- unscaled quantities -------------------------------------------------

    def _unscaled(self):
        w = self.w
        x = w.d * w.x
        y = (w.e / w.c) * w.y
        z = w.z / w.e
        return x, y, z

    def _residuals(self, x, y, z):
        P, q, A, _, _ = self.orig
        ax = A @ x
        r_prim = float(np.max(np.abs(ax - z), initial=0.0))
        r_dual = float(np.max(np.abs(P @ x + q + A.T @ y), initial=0.0))
        return r_prim, r_dual, ax

    def solve(self, tol_feas, tol_opt, max_iter, polish=True):
        w = self.w
        t0 = time.perf_counter()
        iters = 0
        best = None
        last_rho_update = 0
        next_polish_level = max(1e-4, 1e3 * max(tol_feas, tol_opt))
        eps_inf = 1e-8
        pinf_hits = 0
        dinf_hits = 0

        def finish(x, y, status, r_p, r_d, polished):
            return x, y, status, r_p, r_d, iters, polished, time.perf_counter() - t0

        while iters < max_iter:
            inner = min(self.check_interval, max_iter - iters)
            for _ in range(inner):
                rhs = np.concatenate([self.sigma * w.x - w.q, w.z - w.y / w.rho])
                sol = self.lu.solve(rhs)
                x_t = sol[: self.n]
                nu = sol[self.n :]
                z_t = w.z + (nu - w.y) / w.rho
                x_prev, y_prev = w.x, w.y
                w.x = self.alpha * x_t + (1 - self.alpha) * w.x
                z_rel = self.alpha * z_t + (1 - self.alpha) * w.z
                w.z = np.clip(z_rel + w.y / w.rho, w.l, w.u)
                w.y = w.y + w.rho * (z_rel - w.z)
                iters += 1
            x, y, z = self._unscaled()
            r_prim, r_dual, ax = self._residuals(x, y, z)
            if best is None or max(r_prim, r_dual) < max(best[0], best[1]):
                best = (r_prim, r_dual, x.copy(), y.copy())

            if r_prim <= tol_feas and r_dual <= tol_opt:
                return finish(x, y, QpStatus.OPTIMAL, r_prim, r_dual, False)

            # infeasibility certificates from normalized iterate deltas;
            # require two consecutive hits to rule out transients
            dy = (w.e / w.c) * (w.y - y_prev)
            dyn = float(np.max(np.abs(dy), initial=0.0))
            pinf_now = False
            if dyn > 1e-14:
                dy_n = dy / dyn
                P, q, A, l, u = self.orig
                atdy = float(np.max(np.abs(A.T @ dy_n), initial=0.0))
                pos, neg = np.maximum(dy_n, 0.0), np.minimum(dy_n, 0.0)
                ok_inf = np.all(neg[~np.isfinite(l)] > -eps_inf) and np.all(
                    pos[~np.isfinite(u)] < eps_inf
                )
                if atdy <= eps_inf and ok_inf:
                    support = float(
                        np.sum(u[np.isfinite(u)] * pos[np.isfinite(u)])
                        + np.sum(l[np.isfinite(l)] * neg[np.isfinite(l)])
                    )
                    if support <= -eps_inf:
                        pinf_now = True
            pinf_hits = pinf_hits + 1 if pinf_now else 0
            if pinf_hits >= 2:
                return finish(x, y, QpStatus.INFEASIBLE, r_prim, r_dual, False)

            dx = w.d * (w.x - x_prev)
            dxn = float(np.max(np.abs(dx), initial=0.0))
            dinf_now = False
            if dxn > 1e-14:
                dx_n = dx / dxn
                P, q, A, l, u = self.orig
                if float(np.max(np.abs(P @ dx_n), initial=0.0)) <= eps_inf and float(
                    q @ dx_n
                ) <= -eps_inf:
                    adx = A @ dx_n
                    up_ok = np.all(adx[np.isfinite(u)] <= eps_inf)
                    lo_ok = np.all(adx[np.isfinite(l)] >= -eps_inf)
                    if up_ok and lo_ok:
                        dinf_now = True
            dinf_hits = dinf_hits + 1 if dinf_now else 0
            if dinf_hits >= 2:
                return finish(x, y, QpStatus.UNBOUNDED, r_prim, r_dual, False)

            if polish and max(r_prim, r_dual) <= next_polish_level:
                pol = self._polish(x, y)
                if pol is not None:
                    px, py, pr_p, pr_d = pol
                    if pr_p <= tol_feas and pr_d <= tol_opt:
                        return finish(px, py, QpStatus.OPTIMAL, pr_p, pr_d, True)
                next_polish_level = max(next_polish_level / 10.0, max(tol_feas, tol_opt))

            # adaptive penalty: rebalance primal vs dual progress
            if iters - last_rho_update >= 100 and r_dual > 0 and r_prim > 0:
                P, q, A, l, u = self.orig
                sc_p = r_prim / max(
                    float(np.max(np.abs(ax), initial=0.0)),
                    float(np.max(np.abs(z), initial=0.0)),
                    1e-10,
                )
                sc_d = r_dual / max(
                    float(np.max(np.abs(P @ x), initial=0.0)),
                    float(np.max(np.abs(A.T @ y), initial=0.0)),
                    float(np.max(np.abs(q), initial=0.0)),
                    1e-10,
                )
                ratio = np.sqrt(sc_p / max(sc_d, 1e-16))
                if ratio > 5.0 or ratio < 0.2:
                    self.rho_bar = float(np.clip(self.rho_bar * ratio, 1e-6, 1e6))
                    y_scaled = w.y.copy()
                    self._set_rho(self.rho_bar)
                    w.y = y_scaled
                    self._factorize()
                    last_rho_update = iters

        # iteration budget exhausted: one last polish try, then best iterate
        x, y, z = self._unscaled()
        r_prim, r_dual, _ = self._residuals(x, y, z)
        if polish:
            pol = self._polish(x, y)
            if pol is not None and pol[2] <= tol_feas and pol[3] <= tol_opt:
                return finish(pol[0], pol[1], QpStatus.OPTIMAL, pol[2], pol[3], True)
        if best is not None and max(best[:2]) < max(r_prim, r_dual):
            r_prim, r_dual, x, y = best
        status = (
            QpStatus.OPTIMAL
            if (r_prim <= tol_feas and r_dual <= tol_opt)
            else QpStatus.MAX_ITER
        )
        return finish(x, y, status, r_prim, r_dual, False)

    def _polish(self, x_unscaled, y_unscaled):
        """Solve the KKT system restricted to the apparent active set."""
        P, q, A, l, u = self.orig
        ax = A @ x_unscaled
        scale = max(1.0, float(np.max(np.abs(ax), initial=0.0)))
        band = 1e-7 * scale
        act_low = ((y_unscaled < 0) | (ax - l < band)) & np.isfinite(l)
        act_up = ((y_unscaled > 0) | (u - ax < band)) & np.isfinite(u)
        active = act_low | act_up | self.eq_mask
        idx = np.flatnonzero(active)
        k = idx.size
        reg = 1e-9
        A_act = A[idx]
        b_act = np.where((act_up & ~self.eq_mask)[idx], u[idx], l[idx])
        if k == 0:
            K = (P + reg * sp.eye(self.n)).tocsc()
            rhs = -q
        else:
            K = sp.bmat(
                [[P + reg * sp.eye(self.n), A_act.T], [A_act, -reg * sp.eye(k)]],
                format="csc",
            )
            rhs = np.concatenate([-q, b_act])
        try:
            lu = spla.splu(K)
        except RuntimeError:
            return None
        sol = lu.solve(rhs)
        # iterative refinement against the unregularized KKT system
        for _ in range(3):
            x_p = sol[: self.n]
            y_a = sol[self.n :]
            top = P @ x_p + (A_act.T @ y_a if k else 0.0)
            resid = rhs - (np.concatenate([top, A_act @ x_p]) if k else top)
            sol = sol + lu.solve(resid)
        x_p = sol[: self.n]
        y_a = sol[self.n :]
        if not np.all(np.isfinite(x_p)):
            return None
        y_full = np.zeros(self.m)
        y_full[idx] = y_a
        ax = A @ x_p
        viol = np.maximum(ax - u, 0.0) + np.minimum(ax - l, 0.0)
        pr_p = float(np.max(np.abs(viol), initial=0.0))
        pr_d = float(np.max(np.abs(P @ x_p + q + A.T @ y_full), initial=0.0))
        return x_p, y_full, pr_p, pr_d


class _KktFactor:
    """Factorization of one symmetric quasi-definite KKT pattern.

    Prefers CHOLMOD's simplicial LDL' (via cvxopt) with the symbolic
    analysis done once per pattern: numeric refactorization is then an
    order of magnitude cheaper than a fresh SuperLU factorization.  LDL'
    takes no pivots, so callers must iterate refinement against the exact
    matrix; a SuperLU path covers missing cvxopt or failed factorizations.
    """

    def __init__(self, K: sp.csc_matrix):
        self.K = K
        self._mode = "splu"
        self._lu = None
        try:
            from cvxopt import cholmod, matrix, spmatrix  # optional speedup

            cols = np.repeat(np.arange(K.shape[1]), np.diff(K.indptr))
            tl = np.flatnonzero(K.indices >= cols)
            self._tl_idx = tl
            self._cv = spmatrix(
                K.data[tl], K.indices[tl].astype(int), cols[tl].astype(int), size=K.shape
            )
            self._cholmod = cholmod
            self._cv_matrix = matrix
            old = cholmod.options.get("supernodal")
            cholmod.options["supernodal"] = 0
            self._symb = cholmod.symbolic(self._cv)
            if old is not None:
                cholmod.options["supernodal"] = old
            self._mode = "cholmod"
        except ImportError:
            pass

    def factor(self) -> bool:
        """Refactor from the current values in K.data; True on success."""
        if self._mode == "cholmod":
            try:
                self._cv.V = self._cv_matrix(self.K.data[self._tl_idx])
                old = self._cholmod.options.get("supernodal")
                self._cholmod.options["supernodal"] = 0
                self._cholmod.numeric(self._cv, self._symb)
                if old is not None:
                    self._cholmod.options["supernodal"] = old
                self._lu = None
                return True
            except ArithmeticError:
                pass  # fall through to SuperLU
        try:
            self._lu = spla.splu(
                self.K,
                permc_spec="MMD_AT_PLUS_A",
                options={"Equil": False, "DiagPivotThresh": 0.01, "SymmetricMode": True},
            )
            return True
        except RuntimeError:
            return False

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is not None:
            return self._lu.solve(rhs)
        b = self._cv_matrix(rhs)
        self._cholmod.solve(self._symb, b)
        return np.asarray(b).ravel()


class _Ipm:
    """Mehrotra predictor-corrector interior point for the standard-form QP.

    The Newton KKT matrix keeps one sparsity pattern; only the slack/dual
    diagonal changes between iterations, so assembly is an index update and
    the per-iteration cost is one numeric refactorization plus a handful of
    triangular solves (predictor and corrector share the factorization).
    Static regularization keeps the factorization stable on degenerate
    active sets, and every linear solve is polished by iterative refinement
    against the unregularized matrix.
    """

    def __init__(self, qp: StandardQp, reg: float = 1e-8):
        self.qp = qp
        self.n = qp.n
        self.me = qp.m_eq
        self.mi = qp.m_ineq
        self.reg = reg
        n, me, mi = self.n, self.me, self.mi
        P, A, G = qp.p_mat, qp.a_eq, qp.g_ineq
        K = sp.bmat(
            [
                [P + reg * sp.eye(n), A.T if me else None, G.T if mi else None],
                [A if me else None, -reg * sp.eye(me) if me else None, None],
                [G if mi else None, None, -sp.eye(mi) if mi else None],
            ],
            format="csc",
        )
        K.sort_indices()
        self.K = K
        # locate the (3,3) diagonal entries inside the csc data array
        cols = np.repeat(np.arange(K.shape[1]), np.diff(K.indptr))
        on_diag = np.flatnonzero((K.indices == cols) & (cols >= n + me))
        self._diag_idx = on_diag
        self.AT = A.T.tocsc() if me else None
        self.GT = G.T.tocsc() if mi else None
        self._fac = _KktFactor(K)

    def _kkt_solve(self, w_diag, rhs, refine: int = 3):
        """Solve the regularized KKT and refine against the exact matrix."""
        qp = self.qp
        n, me, mi = self.n, self.me, self.mi
        fac = self._fac
        sol = fac.solve(rhs)
        rhs_scale = float(np.max(np.abs(rhs), initial=1.0))
        for _ in range(refine):
            dx = sol[:n]
            dy = sol[n : n + me]
            dz = sol[n + me :]
            top = qp.p_mat @ dx + (self.AT @ dy if me else 0.0) + (self.GT @ dz if mi else 0.0)
            mid = qp.a_eq @ dx if me else np.zeros(0)
            bot = qp.g_ineq @ dx - w_diag * dz if mi else np.zeros(0)
            resid = rhs - np.concatenate([top, mid, bot])
            if float(np.max(np.abs(resid), initial=0.0)) <= 1e-11 * rhs_scale:
                break
            sol = sol + fac.solve(resid)
        return sol

    def _factor(self) -> bool:
        return self._fac.factor()

    def solve(self, tol_feas, tol_opt, max_iter):
        qp = self.qp
        n, me, mi = self.n, self.me, self.mi
        P, q, A, b, G, h = qp.p_mat, qp.q_vec, qp.a_eq, qp.b_eq, qp.g_ineq, qp.h_ineq
        t0 = time.perf_counter()

        x = np.zeros(n)
        y = np.zeros(me)
        s = np.maximum(1.0, np.abs(h)) if mi else np.zeros(0)
        z = np.ones(mi)
        eps_cert = 1e-9
        iters = 0
        status = QpStatus.MAX_ITER
        best_metric = np.inf
        stall = 0

        while iters < max_iter and iters < 500:
            px = P @ x
            r_d = px + q + (self.AT @ y if me else 0.0) + (self.GT @ z if mi else 0.0)
            r_p = A @ x - b if me else np.zeros(0)
            gx = G @ x if mi else np.zeros(0)
            r_g = gx + s - h if mi else np.zeros(0)
            mu = float(s @ z / mi) if mi else 0.0
            pr = max(
                float(np.max(np.abs(r_p), initial=0.0)),
                float(np.max(gx - h, initial=0.0)) if mi else 0.0,
            )
            dr = float(np.max(np.abs(r_d), initial=0.0))
            obj = float(0.5 * x @ px + q @ x)
            gap_ok = mi == 0 or mu <= max(1e-10, tol_opt * 0.1 * (1.0 + abs(obj)))
            if pr <= tol_feas and dr <= tol_opt and gap_ok:
                status = QpStatus.OPTIMAL
                break

            # Farkas-style certificates on the diverging multipliers/iterate
            norm_yz = max(
                float(np.max(np.abs(y), initial=0.0)),
                float(np.max(z, initial=0.0)) if mi else 0.0,
            )
            if norm_yz > 1e4:
                yn = y / norm_yz
                zn = z / norm_yz
                lin = (self.AT @ yn if me else 0.0) + (self.GT @ zn if mi else 0.0)
                if float(np.max(np.abs(lin), initial=0.0)) <= eps_cert * 1e2:
                    support = (b @ yn if me else 0.0) + (h @ zn if mi else 0.0)
                    if support <= -eps_cert * 1e2:
                        status = QpStatus.INFEASIBLE
                        break
            norm_x = float(np.max(np.abs(x), initial=0.0))
            if norm_x > 1e8:
                xn = x / norm_x
                if (
                    float(np.max(np.abs(P @ xn), initial=0.0)) <= eps_cert
                    and q @ xn <= -eps_cert
                    and (me == 0 or float(np.max(np.abs(A @ xn), initial=0.0)) <= eps_cert)
                    and (mi == 0 or float(np.max(G @ xn, initial=0.0)) <= eps_cert)
                ):
                    status = QpStatus.UNBOUNDED
                    break

            metric = max(pr, dr, mu)
            if metric < best_metric / 1.5:
                best_metric = min(best_metric, metric)
                stall = 0
            else:
                stall += 1
            if stall >= 25:
                break

            w_diag = s / z + self.reg if mi else np.zeros(0)
            self.K.data[self._diag_idx] = -w_diag
            if not self._factor():
                break
            iters += 1

            if not mi:
                sol = self._kkt_solve(w_diag, np.concatenate([-r_d, -r_p]))
                x = x + sol[:n]
                y = y + sol[n : n + me]
                continue

            # predictor (affine scaling) direction
            rhs = np.concatenate([-r_d, -r_p, -r_g + s])  # Z^-1 (SZe) = s
            sol = self._kkt_solve(w_diag, rhs)
            dx_a = sol[:n]
            dz_a = sol[n + me :]
            ds_a = -r_g - (G @ dx_a)

            ap = _max_step(s, ds_a)
            ad = _max_step(z, dz_a)
            mu_aff = float((s + ap * ds_a) @ (z + ad * dz_a) / mi)
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.1
            sigma = min(max(sigma, 1e-8), 0.99)
            # corrector: recenter and compensate the affine cross terms
            r_c = s * z + ds_a * dz_a - sigma * mu
            rhs = np.concatenate([-r_d, -r_p, -r_g + r_c / z])
            sol = self._kkt_solve(w_diag, rhs)
            dx = sol[:n]
            dy = sol[n : n + me]
            dz = sol[n + me :]
            ds = -r_g - G @ dx
            ap = _max_step(s, ds)
            ad = _max_step(z, dz)

            # Gondzio-style centrality correctors: reuse the factorization to
            # push outlying complementarity products toward the target,
            # enlarging the usable step
            for _ in range(3):
                if min(ap, ad) > 0.9:
                    break
                ap_t = min(1.0, 1.08 * ap + 0.08)
                ad_t = min(1.0, 1.08 * ad + 0.08)
                s_t = s + ap_t * ds
                z_t = z + ad_t * dz
                mu_t = sigma * mu
                prod = s_t * z_t
                target = np.clip(prod, 0.1 * mu_t, 10.0 * mu_t)
                corr = prod - target
                rhs2 = np.concatenate([-r_d, -r_p, -r_g + (s * z + corr - sigma * mu) / z])
                sol2 = self._kkt_solve(w_diag, rhs2, refine=1)
                dx2 = sol2[:n]
                dy2 = sol2[n : n + me]
                dz2 = sol2[n + me :]
                ds2 = -r_g - G @ dx2
                ap2 = _max_step(s, ds2)
                ad2 = _max_step(z, dz2)
                if min(ap2, ad2) < min(ap, ad) + 0.05:
                    break
                dx, dy, dz, ds = dx2, dy2, dz2, ds2
                ap, ad = ap2, ad2

            # common primal/dual step: with a quadratic cost, unequal steps
            # break the Newton cancellation in the dual residual through P dx
            tau = 0.995 if mu > 1e-6 else 0.9995
            alpha = min(tau * min(ap, ad), 1.0)
            x = x + alpha * dx
            s = s + alpha * ds
            y = y + alpha * dy
            z = z + alpha * dz

        r_p = A @ x - b if me else np.zeros(0)
        gx = G @ x if mi else np.zeros(0)
        pr = max(
            float(np.max(np.abs(r_p), initial=0.0)),
            float(np.max(gx - h, initial=0.0)) if mi else 0.0,
        )
        r_d = P @ x + q + (self.AT @ y if me else 0.0) + (self.GT @ z if mi else 0.0)
        dr = float(np.max(np.abs(r_d), initial=0.0))
        if status == QpStatus.MAX_ITER and pr <= tol_feas and dr <= tol_opt:
            mu = float(s @ z / mi) if mi else 0.0
            if mi == 0 or mu <= max(1e-10, tol_opt * 0.1 * (1.0 + abs(qp.objective(x)))):
                status = QpStatus.OPTIMAL
        return x, y, z, status, pr, dr, iters, time.perf_counter() - t0


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest alpha in (0, 1] keeping v + alpha dv nonnegative."""
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _solve_ipm(qp: StandardQp, tol_feas, tol_opt, max_iter, polish=True) -> QpSolution:
    if qp.m_eq + qp.m_ineq == 0:
        return _solve_unconstrained(qp, tol_opt, max_iter)
    engine = _Ipm(qp)
    x, y, z, status, pr, dr, iters, wall = engine.solve(tol_feas, tol_opt, max_iter)
    return QpSolution(
        z=x,
        status=status,
        primal_residual=pr,
        dual_residual=dr,
        objective=qp.objective(x),
        iterations=iters,
        wall_time=wall,
        polished=False,
        y_eq=y,
        y_ineq=z,
    )


def _solve_unconstrained(qp: StandardQp, tol_opt: float, max_iter: int) -> QpSolution:
    t0 = time.perf_counter()
    n = qp.n
    P = qp.p_mat
    reg = 1e-10 * max(1.0, abs(P).max() if P.nnz else 1.0)
    lu = spla.splu((P + reg * sp.eye(n)).tocsc())
    x = np.zeros(n)
    status = QpStatus.MAX_ITER
    for it in range(1, min(max_iter, 10_000) + 1):
        grad = P @ x + qp.q_vec
        r = float(np.max(np.abs(grad), initial=0.0))
        if r <= tol_opt:
            status = QpStatus.OPTIMAL
            break
        x = x - lu.solve(grad)
        if np.max(np.abs(x)) > 1e14:
            status = QpStatus.UNBOUNDED
            break
    grad = P @ x + qp.q_vec
    return QpSolution(
        z=x,
        status=status,
        primal_residual=0.0,
        dual_residual=float(np.max(np.abs(grad), initial=0.0)),
        objective=qp.objective(x),
        iterations=it,
        wall_time=time.perf_counter() - t0,
        y_eq=np.zeros(0),
        y_ineq=np.zeros(0),
    )


def _solve_admm(qp: StandardQp, tol_feas, tol_opt, max_iter, polish=True) -> QpSolution:
    m = qp.m_eq + qp.m_ineq
    if m == 0:
        return _solve_unconstrained(qp, tol_opt, max_iter)
    A = sp.vstack([qp.a_eq, qp.g_ineq], format="csc") if qp.m_eq and qp.m_ineq else (
        qp.a_eq if qp.m_eq else qp.g_ineq
    ).tocsc()
    l = np.concatenate([qp.b_eq, np.full(qp.m_ineq, -_INF)])
    u = np.concatenate([qp.b_eq, qp.h_ineq])
    engine = _Admm(qp.p_mat, qp.q_vec, A, l, u)
    x, y, status, r_p, r_d, iters, polished, wall = engine.solve(
        tol_feas, tol_opt, max_iter, polish=polish
    )
    return QpSolution(
        z=x,
        status=status,
        primal_residual=r_p,
        dual_residual=r_d,
        objective=qp.objective(x),
        iterations=iters,
        wall_time=wall,
        polished=polished,
        y_eq=y[: qp.m_eq],
        y_ineq=y[qp.m_eq :],
    )


# ---------------------------------------------------------------------------
# Optional external backends behind the same contract


def _solve_osqp(qp: StandardQp, tol_feas, tol_opt, max_iter, polish=True) -> QpSolution:
    import osqp  # lazy; optional dependency

    t0 = time.perf_counter()
    A = sp.vstack([qp.a_eq, qp.g_ineq], format="csc")
    l = np.concatenate([qp.b_eq, np.full(qp.m_ineq, -_INF)])
    u = np.concatenate([qp.b_eq, qp.h_ineq])
    prob = osqp.OSQP()
    prob.setup(
        P=sp.triu(qp.p_mat, format="csc"),
        q=qp.q_vec,
        A=A,
        l=l,
        u=u,
        eps_abs=min(tol_feas, tol_opt),
        eps_rel=0.0,
        max_iter=max_iter,
        polish=polish,
        verbose=False,
    )
    res = prob.solve()
    status_map = {
        "solved": QpStatus.OPTIMAL,
        "primal infeasible": QpStatus.INFEASIBLE,
        "dual infeasible": QpStatus.UNBOUNDED,
    }
    status = status_map.get(res.info.status, QpStatus.MAX_ITER)
    z = np.asarray(res.x, dtype=float) if res.x is not None else np.zeros(qp.n)
    y = np.asarray(res.y, dtype=float) if res.y is not None else np.zeros(A.shape[0])
    if not np.all(np.isfinite(z)):
        z = np.zeros(qp.n)
        y = np.zeros(A.shape[0])
    r_p, r_d = qp.residuals(z, y[: qp.m_eq], y[qp.m_eq :])
    if status == QpStatus.OPTIMAL and (r_p > tol_feas or r_d > tol_opt):
        status = QpStatus.MAX_ITER
    return QpSolution(
        z=z,
        status=status,
        primal_residual=r_p,
        dual_residual=r_d,
        objective=qp.objective(z),
        iterations=int(res.info.iter),
        wall_time=time.perf_counter() - t0,
        polished=bool(getattr(res.info, "status_polish", 0) == 1),
        y_eq=y[: qp.m_eq],
        y_ineq=y[qp.m_eq :],
    )


def _solve_cvxopt(qp: StandardQp, tol_feas, tol_opt, max_iter, polish=True) -> QpSolution:
    from cvxopt import matrix, solvers, spmatrix  # lazy; optional dependency

    t0 = time.perf_counter()

    def conv(mat):
        coo = mat.tocoo()
        return spmatrix(coo.data, coo.row.tolist(), coo.col.tolist(), size=coo.shape)

    opts = {"show_progress": False, "maxiters": min(max_iter, 1000)}
    res = solvers.qp(
        conv(qp.p_mat),
        matrix(qp.q_vec),
        conv(qp.g_ineq),
        matrix(qp.h_ineq),
        conv(qp.a_eq),
        matrix(qp.b_eq),
        options=opts,
    )
    stat = res["status"]
    if stat == "optimal":
        status = QpStatus.OPTIMAL
    elif stat == "primal infeasible":
        status = QpStatus.INFEASIBLE
    elif stat == "dual infeasible":
        status = QpStatus.UNBOUNDED
    else:
        status = QpStatus.MAX_ITER
    z = np.array(res["x"]).ravel() if res["x"] is not None else np.zeros(qp.n)
    y_eq = np.array(res["y"]).ravel() if res["y"] is not None else np.zeros(qp.m_eq)
    y_in = np.array(res["z"]).ravel() if res["z"] is not None else np.zeros(qp.m_ineq)
    r_p, r_d = qp.residuals(z, y_eq, y_in)
    if status == QpStatus.OPTIMAL and (r_p > tol_feas or r_d > tol_opt):
        status = QpStatus.MAX_ITER
    return QpSolution(
        z=z,
        status=status,
        primal_residual=r_p,
        dual_residual=r_d,
        objective=qp.objective(z),
        iterations=int(res.get("iterations", 0)),
        wall_time=time.perf_counter() - t0,
        y_eq=y_eq,
        y_ineq=y_in,
    )


_BACKENDS = {
    "ipm": _solve_ipm,
    "admm": _solve_admm,
    "osqp": _solve_osqp,
    "cvxopt": _solve_cvxopt,
}


def available_backends() -> list[str]:
    out = ["ipm", "admm"]
    for name in ("osqp", "cvxopt"):
        try:
            __import__(name)
            out.append(name)
        except ImportError:
            pass
    return out


def solve(
    qp: StandardQp,
    tol_feas: float = 1e-7,
    tol_opt: float = 1e-7,
    max_iter: int = 200_000,
    *,
    polish: bool = True,
    backend: str = "ipm",
) -> QpSolution:
    """Solve a StandardQp to the requested absolute tolerances.

    Returns a QpSolution whose residuals are recomputed from the returned
    point; OPTIMAL is only reported when primal_residual <= tol_feas and
    dual_residual <= tol_opt.  MAX_ITER is a status, not an exception.
    """
    if backend not in _BACKENDS:
        raise ValueError(f"unknown backend '{backend}', have {sorted(_BACKENDS)}")
    if tol_feas <= 0 or tol_opt <= 0:
        raise ValueError("tolerances must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    return _BACKENDS[backend](qp, tol_feas, tol_opt, max_iter, polish=polish)
