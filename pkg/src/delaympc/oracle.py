"""Independent brute-force verifiers for solved syntheses.

Everything here recomputes quantities from first principles (dense algebra,
forward simulation, exhaustive enumeration) rather than reusing the sparse
constraint assembly, so agreement between the two paths is evidence that
both are right.
"""

from __future__ import annotations

import itertools
from typing import Iterator, Sequence

import numpy as np

from .blockops import (
    BltMatrix,
    StackedSignal,
    blt_solve_lower,
    build_delta_blocks,
    build_nominal_blocks,
)
from .model import OcpProblem, TimeDelaySystem
from .synthesis import SigmaFilter, SynthesisResult

__all__ = [
    "realize_delta",
    "filter_membership",
    "response_identity_check",
    "affine_residual",
    "controller_residual",
    "overapprox_slack",
    "vertex_index_sequences",
    "extreme_disturbance_sequences",
    "exhaustive_membership",
]


def _as_weights(sys: TimeDelaySystem, item) -> np.ndarray:
    if np.isscalar(item):
        w = np.zeros(sys.n_vertices)
        w[int(item)] = 1.0
        return w
    return np.asarray(item, dtype=float)


def realize_delta(
    sys: TimeDelaySystem,
    k_controller: BltMatrix,
    h: StackedSignal,
    x_hist: Sequence[np.ndarray],
    u_hist: Sequence[np.ndarray],
    vertex_sequence: Sequence,
    w_sequence: Sequence[np.ndarray],
) -> StackedSignal:
    """True perturbation realized by rolling the closed loop forward.

    Applies u_t = sum_i K[t, i] (x_i - h_i) against the true dynamics for
    the given per-step vertex choices (indices or convex weights) and
    disturbances, and collects the gap between each next state and the
    nominal delayed update.  The first block of the result is the anchor
    state.
    """
    from .simulate import combine_vertices  # local import avoids a cycle

    T = h.horizon_T
    if len(vertex_sequence) != T or len(w_sequence) != T:
        raise ValueError(f"need exactly T={T} vertex choices and disturbances")
    x_hist = [np.asarray(x, dtype=float) for x in x_hist]
    u_hist = [np.asarray(u, dtype=float) for u in u_hist]
    xs = [x_hist[-1].copy()]
    us: list[np.ndarray] = []
    deltas: list[np.ndarray] = []
    for t in range(T):
        u_t = np.zeros(sys.nu)
        for i in range(t + 1):
            u_t += k_controller.block(t, i) @ (xs[i] - h.block(i))
        us.append(u_t)
        d_a, d_b = combine_vertices(sys, _as_weights(sys, vertex_sequence[t]))
        x_window = (x_hist[:-1] + xs)[-(sys.na + 1) :]
        u_window = (u_hist + us)[-(sys.nb + 1) :]
        w_t = np.asarray(w_sequence[t], dtype=float)
        delta_t = w_t.copy()
        nominal = np.zeros(sys.nx)
        for i in range(sys.na + 1):
            delta_t += d_a[i] @ x_window[-1 - i]
            nominal += sys.a_nom[i] @ x_window[-1 - i]
        for j in range(sys.nb + 1):
            delta_t += d_b[j] @ u_window[-1 - j]
            nominal += sys.b_nom[j] @ u_window[-1 - j]
        deltas.append(delta_t)
        xs.append(nominal + delta_t)
    return StackedSignal.from_blocks([xs[0]] + deltas)


def filter_membership(sigma: SigmaFilter, delta: StackedSignal) -> tuple[StackedSignal, float]:
    """Pull the realized perturbation back through the filter.

    Solves sigma @ w_tilde = delta by block forward substitution and
    returns w_tilde together with the largest infinity norm over its
    virtual-disturbance blocks (the anchor block is exempt).  Membership
    holds when that norm is at most 1.
    """
    w_tilde = blt_solve_lower(sigma.to_blt(), delta)
    T = w_tilde.horizon_T
    max_norm = 0.0
    for t in range(1, T + 1):
        max_norm = max(max_norm, float(np.max(np.abs(w_tilde.block(t)), initial=0.0)))
    return w_tilde, max_norm


def response_identity_check(
    result: SynthesisResult,
    a_hat: BltMatrix,
    b_hat: BltMatrix,
    trials: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Simulate the surrogate dynamics against the response operators.

    Draws unit-box virtual disturbances, rolls the surrogate update under
    the recovered feedback, and reports the worst deviations from the
    linear maps: (max state residual, max input residual).
    """
    T = result.h.horizon_T
    nx = result.phi_x.block_cols
    nu = result.phi_u.block_rows
    sig = result.sigma.to_blt().to_dense()
    phi_x = result.phi_x.to_dense()
    phi_u = result.phi_u.to_dense()
    K = result.controller_k

    W = rng.uniform(-1.0, 1.0, size=(trials, (T + 1) * nx))
    SW = W @ sig.T
    X = np.zeros_like(W)
    U = np.zeros((trials, (T + 1) * nu))
    X[:, :nx] = SW[:, :nx]
    for t in range(T + 1):
        u_t = np.zeros((trials, nu))
        for i in range(t + 1):
            u_t += X[:, i * nx : (i + 1) * nx] @ K.block(t, i).T
        U[:, t * nu : (t + 1) * nu] = u_t
        if t == T:
            break
        x_next = SW[:, (t + 1) * nx : (t + 2) * nx].copy()
        for (i, j), blk in a_hat.stored_items():
            if i == t:
                x_next += X[:, j * nx : (j + 1) * nx] @ blk.T
        for (i, j), blk in b_hat.stored_items():
            if i == t:
                x_next += U[:, j * nu : (j + 1) * nu] @ blk.T
        X[:, (t + 1) * nx : (t + 2) * nx] = x_next
    res_x = float(np.max(np.abs(X - W @ phi_x.T), initial=0.0))
    res_u = float(np.max(np.abs(U - W @ phi_u.T), initial=0.0))
    return res_x, res_u


def affine_residual(result: SynthesisResult, a_hat: BltMatrix, b_hat: BltMatrix) -> float:
    """Largest entry of (I - Z A)phi_x - Z B phi_u - sigma."""
    T = result.h.horizon_T
    nx = result.phi_x.block_cols
    a = a_hat.to_dense()
    b = b_hat.to_dense()
    z = np.zeros(((T + 1) * nx, (T + 1) * nx))
    for i in range(1, T + 1):
        z[i * nx : (i + 1) * nx, (i - 1) * nx : i * nx] = np.eye(nx)
    lhs = (np.eye((T + 1) * nx) - z @ a) @ result.phi_x.to_dense()
    lhs -= z @ b @ result.phi_u.to_dense()
    lhs -= result.sigma.to_blt().to_dense()
    return float(np.max(np.abs(lhs)))


def controller_residual(result: SynthesisResult) -> float:
    """Largest entry of K phi_x - phi_u."""
    lhs = result.controller_k.to_dense() @ result.phi_x.to_dense() - result.phi_u.to_dense()
    return float(np.max(np.abs(lhs)))


def overapprox_slack(problem: OcpProblem, result: SynthesisResult) -> float:
    """Worst slack of the vertex-wise disturbance-budget rows, recomputed densely.

    For every vertex and time, forms C and v from the solved operators by
    dense multiplication and evaluates q - (|v| + row-wise l1 mass + sigma_w).
    Negative values mean a violated over-approximation row.
    """
    sys = problem.system
    T = problem.horizon_T
    nx = sys.nx
    phi_x = result.phi_x.to_dense()
    phi_u = result.phi_u.to_dense()
    h = result.h
    x0 = problem.x0
    x_past = (
        np.concatenate([np.ravel(x) for x in problem.x_hist[:-1]])
        if sys.na
        else np.zeros(0)
    )
    u_past = (
        np.concatenate([np.ravel(u) for u in problem.u_hist]) if sys.nb else np.zeros(0)
    )
    sub = result.sigma.sub or {}
    worst = np.inf
    for vertex in sys.vertices:
        d_a, d_b, d_a_minus, d_b_minus = build_delta_blocks(vertex, T)
        da = d_a.to_dense()
        db = d_b.to_dense()
        c_full = da @ phi_x + db @ phi_u
        # shift down one block row and subtract the strictly-lower filter part
        c = np.zeros_like(c_full)
        c[nx:, :] = c_full[:-nx, :]
        for (i, j), blk in sub.items():
            c[i * nx : (i + 1) * nx, j * nx : (j + 1) * nx] -= blk
        pre = da @ h.data + d_a_minus @ x_past + d_b_minus @ u_past
        v = np.zeros((T + 1) * nx)
        v[nx:] = pre[:-nx]
        v += c[:, :nx] @ x0
        for t in range(T):
            i = t + 1
            row = np.abs(v[i * nx : (i + 1) * nx]).copy()
            for j in range(1, t + 1):
                blk = c[i * nx : (i + 1) * nx, j * nx : (j + 1) * nx]
                row += np.abs(blk).sum(axis=1)
            slack = result.sigma.q[t] - row - sys.sigma_w
            worst = min(worst, float(slack.min()))
    return worst


def vertex_index_sequences(M: int, T: int) -> Iterator[tuple[int, ...]]:
    """All time-varying vertex selections over the horizon."""
    return itertools.product(range(M), repeat=T)


def extreme_disturbance_sequences(
    nx: int, T: int, sigma_w: float
) -> Iterator[np.ndarray]:
    """All corner disturbance sequences (T, nx); just the zero one if sigma_w = 0."""
    if sigma_w == 0.0:
        yield np.zeros((T, nx))
        return
    for signs in itertools.product((-1.0, 1.0), repeat=nx * T):
        yield sigma_w * np.asarray(signs).reshape(T, nx)


def exhaustive_membership(
    problem: OcpProblem,
    result: SynthesisResult,
    max_cases: int = 2_000_000,
) -> tuple[float, int]:
    """Filter membership over every vertex/corner realization.

    Enumerates all M^T time-varying vertex sequences crossed with all
    2^(nx T) extreme disturbance sign patterns, realizes the perturbation
    under the recovered controller, and returns the worst membership norm
    together with the case count.  Guarded by ``max_cases``; meant for
    small horizons.
    """
    sys = problem.system
    T = problem.horizon_T
    n_cases = sys.n_vertices**T * (1 if sys.sigma_w == 0 else 2 ** (sys.nx * T))
    if n_cases > max_cases:
        raise ValueError(f"{n_cases} corner cases exceed the cap {max_cases}")
    worst = 0.0
    count = 0
    for v_seq in vertex_index_sequences(sys.n_vertices, T):
        for w_seq in extreme_disturbance_sequences(sys.nx, T, sys.sigma_w):
            delta = realize_delta(
                sys,
                result.controller_k,
                result.h,
                problem.x_hist,
                problem.u_hist,
                v_seq,
                w_seq,
            )
            _, norm = filter_membership(result.sigma, delta)
            worst = max(worst, norm)
            count += 1
    return worst, count
