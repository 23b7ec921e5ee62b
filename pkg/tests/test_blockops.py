import numpy as np
import pytest

from delaympc.blockops import (
    BltMatrix,
    StackedSignal,
    blt_apply,
    blt_compose,
    blt_right_divide,
    blt_solve_lower,
    blt_solve_unit_lower,
    build_banded_blocks,
    build_nominal_blocks,
    compute_offset,
    eye_blt,
    one_minus_shifted,
    shift_operator,
)
from delaympc.model import TimeDelaySystem, UncertaintyVertex


def scalar_delay_system(a=0.7, c=0.3, na=1, nb=0):
    mats = [[[a]]] + [[[0.0]]] * (na - 1) + [[[c]]] if na >= 1 else [[[a]]]
    return TimeDelaySystem(
        nx=1, nu=1, na=na, nb=nb,
        a_nom=mats,
        b_nom=[[[1.0]]] * (nb + 1),
        vertices=[UncertaintyVertex(d_a=[[[0.0]]] * (na + 1), d_b=[[[0.0]]] * (nb + 1))],
        sigma_w=0.0,
    )


class TestShiftOperator:
    def test_single_subdiagonal_block(self):
        z = shift_operator(1, 2)
        np.testing.assert_array_equal(z.block(1, 0), np.eye(2))
        assert z.n_stored == 1

    def test_degenerate_horizon_is_zero(self):
        z = shift_operator(0, 3)
        np.testing.assert_array_equal(z.to_dense(), np.zeros((3, 3)))

    def test_double_shift_moves_two_slots(self):
        z = shift_operator(2, 1)
        s = StackedSignal.from_blocks([[5.0], [7.0], [9.0]])
        out = blt_apply(blt_compose(z, z), s)
        np.testing.assert_allclose(out.data, [0.0, 0.0, 5.0])


class TestBltMatrix:
    def test_rejects_upper_triangular_block(self):
        with pytest.raises(ValueError):
            BltMatrix(2, 1, 1, {(0, 1): np.eye(1)})

    def test_rejects_bad_block_shape(self):
        with pytest.raises(ValueError):
            BltMatrix(2, 2, 2, {(1, 0): np.eye(3)})

    def test_identity_apply_is_identity(self):
        m = eye_blt(3, 2)
        s = StackedSignal(2, np.arange(8.0))
        np.testing.assert_array_equal(blt_apply(m, s).data, s.data)

    def test_compose_matches_dense(self):
        rng = np.random.default_rng(0)
        T, p = 4, 2
        blocks1 = {(i, j): rng.normal(size=(p, p)) for i in range(T + 1) for j in range(i + 1)}
        blocks2 = {(i, j): rng.normal(size=(p, p)) for i in range(T + 1) for j in range(i + 1)}
        m1 = BltMatrix(T, p, p, blocks1)
        m2 = BltMatrix(T, p, p, blocks2)
        np.testing.assert_allclose(
            blt_compose(m1, m2).to_dense(), m1.to_dense() @ m2.to_dense(), atol=1e-12
        )

    def test_compose_stays_lower_triangular(self):
        rng = np.random.default_rng(1)
        T = 5
        b1 = {(i, j): rng.normal(size=(1, 1)) for i in range(T + 1) for j in range(i + 1)}
        out = blt_compose(BltMatrix(T, 1, 1, b1), shift_operator(T, 1))
        assert all(j <= i for (i, j), _ in out.stored_items())

    def test_offset_block_addressing(self):
        m = shift_operator(3, 1)
        np.testing.assert_array_equal(m.offset_block(2, 1), [[1.0]])
        np.testing.assert_array_equal(m.offset_block(2, 2), [[0.0]])

    def test_immutable(self):
        m = eye_blt(1, 1)
        with pytest.raises(AttributeError):
            m.horizon_T = 5
        with pytest.raises(ValueError):
            m.block(0, 0)[0, 0] = 2.0


class TestStackedSignal:
    def test_length_must_divide(self):
        with pytest.raises(ValueError):
            StackedSignal(3, np.zeros(7))

    def test_block_access(self):
        s = StackedSignal.from_blocks([[1.0, 2.0], [3.0, 4.0]])
        assert s.horizon_T == 1
        np.testing.assert_array_equal(s.block(1), [3.0, 4.0])

    def test_immutable(self):
        s = StackedSignal(1, np.zeros(3))
        with pytest.raises(ValueError):
            s.data[0] = 1.0


class TestBandedBlocks:
    def test_scalar_hand_expansion(self):
        # one-step state delay, scalar system over T = 2
        sys = scalar_delay_system(a=2.0, c=3.0)
        a_hat, b_hat, a_minus, b_minus = build_nominal_blocks(sys, 2)
        np.testing.assert_allclose(
            a_hat.to_dense(), [[2.0, 0, 0], [3.0, 2.0, 0], [0, 0, 0]]
        )
        np.testing.assert_allclose(a_minus, [[3.0], [0.0], [0.0]])

    def test_last_block_row_zero(self):
        rng = np.random.default_rng(2)
        mats = [rng.normal(size=(2, 2)) for _ in range(3)]
        banded, _ = build_banded_blocks(mats, 6)
        for j in range(7):
            np.testing.assert_array_equal(banded.block(6, j), np.zeros((2, 2)))

    def test_no_delay_is_block_diagonal(self):
        sys = TimeDelaySystem(
            nx=2, nu=1, na=0, nb=0,
            a_nom=[np.array([[1.0, 0.5], [0.0, 1.0]])],
            b_nom=[np.array([[0.0], [1.0]])],
            vertices=[UncertaintyVertex(d_a=[np.zeros((2, 2))], d_b=[np.zeros((2, 1))])],
            sigma_w=0.0,
        )
        a_hat, _, a_minus, _ = build_nominal_blocks(sys, 3)
        assert a_minus.shape == (8, 0)
        for i in range(3):
            np.testing.assert_array_equal(a_hat.block(i, i), sys.a_nom[0])
        assert all(i == j for (i, j), _ in a_hat.stored_items())

    def test_demo_system_band_structure(self, demo_problem):
        # third subdiagonal carries the delayed term; first two are zero
        a_hat, _, _, _ = build_nominal_blocks(demo_problem.system, 6)
        np.testing.assert_array_equal(a_hat.block(4, 1), demo_problem.system.a_nom[3])
        np.testing.assert_array_equal(a_hat.block(4, 3), np.zeros((3, 3)))
        np.testing.assert_array_equal(a_hat.block(4, 4), demo_problem.system.a_nom[0])

    def test_history_matrix_row_layout(self):
        # rows of the history companion feed steps 0..nd-1, newest history last
        mats = [np.full((1, 1), float(k)) for k in range(4)]  # M_0..M_3
        _, hist = build_banded_blocks(mats, 5)
        np.testing.assert_allclose(hist[0, :], [3.0, 2.0, 1.0])
        np.testing.assert_allclose(hist[1, :], [0.0, 3.0, 2.0])
        np.testing.assert_allclose(hist[2, :], [0.0, 0.0, 3.0])
        np.testing.assert_allclose(hist[3:, :], 0.0)


class TestComputeOffset:
    def test_zero_history_gives_zero(self):
        sys = scalar_delay_system()
        d, h = compute_offset(sys, 3, [[0.0], [1.0]], [])
        np.testing.assert_array_equal(d.data, np.zeros(4))
        np.testing.assert_array_equal(h.data, np.zeros(4))
        # the current state does not enter the offset
        d2, h2 = compute_offset(sys, 3, [[0.0], [99.0]], [])
        np.testing.assert_array_equal(d2.data, d.data)
        np.testing.assert_array_equal(h2.data, h.data)

    def test_scalar_hand_derivation(self):
        # h = [0, c x_{-1}, a c x_{-1}] for the one-step-delay scalar system
        a, c, xm1 = 0.8, -0.5, 2.0
        sys = scalar_delay_system(a=a, c=c)
        d, h = compute_offset(sys, 2, [[xm1], [0.0]], [])
        np.testing.assert_allclose(h.data, [0.0, c * xm1, a * c * xm1], atol=1e-15)
        np.testing.assert_allclose(d.data, [0.0, c * xm1, 0.0], atol=1e-15)

    def test_no_delay_offset_vanishes(self):
        sys = TimeDelaySystem(
            nx=1, nu=1, na=0, nb=0, a_nom=[[[0.9]]], b_nom=[[[1.0]]],
            vertices=[UncertaintyVertex(d_a=[[[0.0]]], d_b=[[[0.0]]])], sigma_w=0.0,
        )
        d, h = compute_offset(sys, 4, [[5.0]], [])
        np.testing.assert_array_equal(d.data, np.zeros(5))
        np.testing.assert_array_equal(h.data, np.zeros(5))

    def test_h_zero_leading_block(self):
        rng = np.random.default_rng(3)
        sys = _random_delay_system(rng, na=2, nb=2)
        x_hist = [rng.normal(size=2) for _ in range(3)]
        u_hist = [rng.normal(size=1) for _ in range(2)]
        _, h = compute_offset(sys, 5, x_hist, u_hist)
        np.testing.assert_array_equal(h.block(0), np.zeros(2))

    def test_residual_property_random(self):
        # (I - Z A) h = d holds to near machine precision on random systems
        rng = np.random.default_rng(4)
        for trial in range(20):
            na = int(rng.integers(0, 4))
            nb = int(rng.integers(0, 3))
            T = int(rng.integers(max(na, nb) + 1, 20))
            sys = _random_delay_system(rng, na=na, nb=nb)
            x_hist = [rng.uniform(-1, 1, 2) for _ in range(na + 1)]
            u_hist = [rng.uniform(-1, 1, 1) for _ in range(nb)]
            d, h = compute_offset(sys, T, x_hist, u_hist)
            a_hat, _, _, _ = build_nominal_blocks(sys, T)
            lhs = blt_apply(one_minus_shifted(a_hat), h)
            assert np.max(np.abs(lhs.data - d.data)) <= 1e-10

    def test_linearity_in_history(self):
        rng = np.random.default_rng(5)
        sys = _random_delay_system(rng, na=2, nb=1)
        x_hist = [rng.normal(size=2) for _ in range(3)]
        u_hist = [rng.normal(size=1)]
        d1, h1 = compute_offset(sys, 4, x_hist, u_hist)
        d2, h2 = compute_offset(sys, 4, [2 * x for x in x_hist], [2 * u for u in u_hist])
        np.testing.assert_array_equal(d2.data, 2 * d1.data)
        np.testing.assert_array_equal(h2.data, 2 * h1.data)


def _random_delay_system(rng, na, nb, nx=2, nu=1):
    return TimeDelaySystem(
        nx=nx, nu=nu, na=na, nb=nb,
        a_nom=[rng.uniform(-1, 1, size=(nx, nx)) for _ in range(na + 1)],
        b_nom=[rng.uniform(-1, 1, size=(nx, nu)) for _ in range(nb + 1)],
        vertices=[
            UncertaintyVertex(
                d_a=[np.zeros((nx, nx))] * (na + 1), d_b=[np.zeros((nx, nu))] * (nb + 1)
            )
        ],
        sigma_w=0.0,
    )


class TestSolvers:
    def test_unit_lower_solve_roundtrip(self):
        rng = np.random.default_rng(6)
        T, n = 5, 2
        banded = BltMatrix(
            T, n, n, {(i, j): rng.normal(size=(n, n)) for i in range(T) for j in range(i + 1)}
        )
        m = one_minus_shifted(banded)
        rhs = StackedSignal(n, rng.normal(size=(T + 1) * n))
        x = blt_solve_unit_lower(m, rhs)
        np.testing.assert_allclose(blt_apply(m, x).data, rhs.data, atol=1e-12)

    def test_unit_lower_requires_identity_diagonal(self):
        m = BltMatrix(1, 1, 1, {(0, 0): [[2.0]], (1, 1): [[1.0]]})
        with pytest.raises(ValueError):
            blt_solve_unit_lower(m, np.zeros(2))

    def test_general_lower_solve(self):
        rng = np.random.default_rng(7)
        T, n = 4, 2
        blocks = {(i, j): rng.normal(size=(n, n)) for i in range(T + 1) for j in range(i)}
        for i in range(T + 1):
            blocks[(i, i)] = np.diag(rng.uniform(0.5, 2.0, n))
        m = BltMatrix(T, n, n, blocks)
        rhs = rng.normal(size=(T + 1) * n)
        x = blt_solve_lower(m, rhs)
        np.testing.assert_allclose(blt_apply(m, x).data, rhs, atol=1e-10)

    def test_right_divide_recovers_product(self):
        rng = np.random.default_rng(8)
        T, nx, nu = 4, 2, 1
        den_blocks = {(i, j): rng.normal(size=(nx, nx)) for i in range(T + 1) for j in range(i)}
        for i in range(T + 1):
            den_blocks[(i, i)] = np.diag(rng.uniform(0.5, 2.0, nx))
        den = BltMatrix(T, nx, nx, den_blocks)
        k_true = BltMatrix(
            T, nu, nx,
            {(i, j): rng.normal(size=(nu, nx)) for i in range(T + 1) for j in range(i + 1)},
        )
        num = blt_compose(k_true, den)
        k = blt_right_divide(num, den)
        np.testing.assert_allclose(k.to_dense(), k_true.to_dense(), atol=1e-10)
