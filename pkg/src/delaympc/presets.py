"""Ready-made problem builders: the 3-state delayed demo and the random
2-state benchmark family used by the scalability sweep."""

from __future__ import annotations

import numpy as np

from .model import OcpProblem, PolytopeSet, TimeDelaySystem, UncertaintyVertex

__all__ = ["demo_problem_3d", "random_benchmark_problem"]


def demo_problem_3d(
    horizon_T: int = 6,
    sigma_w: float = 0.05,
    x0=(0.5 * np.pi, 0.75 * np.pi, -5.0),
) -> OcpProblem:
    """3-state system with a 3-step state delay and one scalar gain uncertainty.

    The third state row is scaled by an unknown time-varying gain in
    [1, 1.5915]; the nominal model sits at the interval midpoint so the two
    polytope vertices are the interval endpoints.  Constraints are the boxes
    |x_1| <= 2*pi/3, |x_2| <= 2*pi, |x_3| <= 15 and |u| <= pi; weights are
    Q = I, R = 0.01, QT = 100 I; the initial delayed states are zero.
    """
    alpha_lo, alpha_hi = 1.0, 1.5915
    alpha_mid = 0.5 * (alpha_lo + alpha_hi)
    spread = 0.5 * (alpha_hi - alpha_lo)

    a0_base = np.array([[1.0509, 0.0, 0.0], [-0.0509, 1.0, 0.0], [0.0, 0.0, 1.0]])
    a0_gain = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0509, -0.4, 0.0]])
    a3_base = np.array([[0.0218, 0.0, 0.0], [-0.0218, 0.0, 0.0], [0.0, 0.0, 0.0]])
    a3_gain = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0218, 0.0, 0.0]])
    zero3 = np.zeros((3, 3))
    b0 = np.array([[-0.1429], [0.0], [0.0]])

    system = TimeDelaySystem(
        nx=3,
        nu=1,
        na=3,
        nb=0,
        a_nom=[a0_base + alpha_mid * a0_gain, zero3, zero3, a3_base + alpha_mid * a3_gain],
        b_nom=[b0],
        vertices=[
            UncertaintyVertex(
                d_a=[s * spread * a0_gain, zero3, zero3, s * spread * a3_gain],
                d_b=[np.zeros((3, 1))],
            )
            for s in (-1.0, 1.0)
        ],
        sigma_w=sigma_w,
    )
    x_set = PolytopeSet.box([2.0 * np.pi / 3.0, 2.0 * np.pi, 15.0])
    u_set = PolytopeSet.box([np.pi])
    zero = np.zeros(3)
    return OcpProblem(
        system=system,
        horizon_T=horizon_T,
        x_set=x_set,
        u_set=u_set,
        q_weight=np.eye(3),
        r_weight=np.array([[0.01]]),
        qt_weight=100.0 * np.eye(3),
        x_hist=[zero, zero, zero, np.asarray(x0, dtype=float)],
        u_hist=[],
    )


def random_benchmark_problem(
    na: int, nb: int, T: int, rng: np.random.Generator
) -> OcpProblem:
    """Random 2-state, 1-input delayed system for the scalability sweep.

    Dynamics entries are i.i.d. normal with standard deviation 0.3; the
    state uncertainty is a shared scalar gain putting +-0.1 on the (0, 0)
    entry of every delayed state matrix; no input uncertainty and no
    additive disturbance.  Boxes: states within 30, terminal within 30,
    input within 5; weights Q = QT = I, R = 1; anchor state [2.5, -2.5]
    with zero history.
    """
    nx, nu = 2, 1
    a_nom = [rng.normal(0.0, 0.3, size=(nx, nx)) for _ in range(na + 1)]
    b_nom = [rng.normal(0.0, 0.3, size=(nx, nu)) for _ in range(nb + 1)]
    bump = np.zeros((nx, nx))
    bump[0, 0] = 0.1
    vertices = [
        UncertaintyVertex(
            d_a=[s * bump for _ in range(na + 1)],
            d_b=[np.zeros((nx, nu)) for _ in range(nb + 1)],
        )
        for s in (-1.0, 1.0)
    ]
    system = TimeDelaySystem(
        nx=nx, nu=nu, na=na, nb=nb, a_nom=a_nom, b_nom=b_nom, vertices=vertices, sigma_w=0.0
    )
    box30 = PolytopeSet.box([30.0, 30.0])
    zero = np.zeros(nx)
    return OcpProblem(
        system=system,
        horizon_T=T,
        x_set=box30,
        u_set=PolytopeSet.box([5.0]),
        terminal_set=box30,
        q_weight=np.eye(nx),
        r_weight=np.eye(nu),
        qt_weight=np.eye(nx),
        x_hist=[zero] * na + [np.array([2.5, -2.5])],
        u_hist=[zero[:nu]] * nb,
    )
