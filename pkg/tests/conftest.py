import numpy as np
import pytest

from delaympc.blockops import build_nominal_blocks
from delaympc.model import OcpProblem, PolytopeSet, TimeDelaySystem, UncertaintyVertex
from delaympc.presets import demo_problem_3d
from delaympc.synthesis import OcpSynthesizer, SynthesisOptions


@pytest.fixture(scope="session")
def demo_problem():
    return demo_problem_3d()


@pytest.fixture(scope="session")
def demo_result_diag(demo_problem):
    return OcpSynthesizer(demo_problem, SynthesisOptions(filter_mode="diag")).solve()


@pytest.fixture(scope="session")
def demo_result_full(demo_problem):
    return OcpSynthesizer(demo_problem, SynthesisOptions(filter_mode="full")).solve()


@pytest.fixture(scope="session")
def demo_blocks(demo_problem):
    return build_nominal_blocks(demo_problem.system, demo_problem.horizon_T)


def scalar_integrator_problem(
    horizon_T=2,
    x_lim=1.0,
    u_lim=1.0,
    sigma_w=0.1,
    x0=0.5,
    a=1.0,
    b=1.0,
    vertices=None,
):
    """1-D system x+ = a x + b u + w with box constraints, no delays."""
    system = TimeDelaySystem(
        nx=1,
        nu=1,
        na=0,
        nb=0,
        a_nom=[[[a]]],
        b_nom=[[[b]]],
        vertices=vertices or [UncertaintyVertex(d_a=[[[0.0]]], d_b=[[[0.0]]])],
        sigma_w=sigma_w,
    )
    return OcpProblem(
        system=system,
        horizon_T=horizon_T,
        x_set=PolytopeSet.box([x_lim]),
        u_set=PolytopeSet.box([u_lim]),
        q_weight=[[1.0]],
        r_weight=[[1.0]],
        qt_weight=[[1.0]],
        x_hist=[[x0]],
        u_hist=[],
    )


def small_random_problem(rng, nx=2, nu=1, na=1, nb=1, T=3, sigma_w=0.02):
    """Mildly contractive random delayed system with loose boxes; usually feasible."""
    a_nom = [rng.normal(0.0, 0.25, size=(nx, nx)) for _ in range(na + 1)]
    b_nom = [rng.normal(0.0, 0.4, size=(nx, nu)) for _ in range(nb + 1)]
    bump = np.zeros((nx, nx))
    bump[0, 0] = 0.05
    vertices = [
        UncertaintyVertex(
            d_a=[s * bump for _ in range(na + 1)],
            d_b=[np.zeros((nx, nu)) for _ in range(nb + 1)],
        )
        for s in (-1.0, 1.0)
    ]
    system = TimeDelaySystem(
        nx=nx, nu=nu, na=na, nb=nb, a_nom=a_nom, b_nom=b_nom,
        vertices=vertices, sigma_w=sigma_w,
    )
    x_hist = [rng.normal(0.0, 0.2, size=nx) for _ in range(na)] + [rng.normal(0.0, 0.5, size=nx)]
    u_hist = [rng.normal(0.0, 0.2, size=nu) for _ in range(nb)]
    return OcpProblem(
        system=system,
        horizon_T=T,
        x_set=PolytopeSet.box([8.0] * nx),
        u_set=PolytopeSet.box([6.0] * nu),
        q_weight=np.eye(nx),
        r_weight=0.1 * np.eye(nu),
        qt_weight=np.eye(nx),
        x_hist=x_hist,
        u_hist=u_hist,
    )
