"""Block-lower-triangular operator algebra over a finite horizon.

Finite-horizon causal linear operators are stored as a sparse grid of
matrix blocks below (and on) the block diagonal.  Blocks are addressed by
absolute (block-row, block-column) pairs; an absent block is zero.  The
module also provides the banded block matrices describing delayed
dynamics, the known delay offset vectors, and the forward/backward block
substitution primitives everything downstream relies on.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Mapping

import numpy as np

__all__ = [
    "BltMatrix",
    "StackedSignal",
    "shift_operator",
    "eye_blt",
    "build_banded_blocks",
    "build_nominal_blocks",
    "build_delta_blocks",
    "compute_offset",
    "blt_apply",
    "blt_compose",
    "blt_solve_unit_lower",
    "blt_solve_lower",
    "blt_right_divide",
    "one_minus_shifted",
]


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class StackedSignal:
    """A finite-horizon signal stored as one flat vector of equal blocks.

    ``data`` holds ``n_blocks`` stacked blocks of length ``block_dim``;
    ``horizon_T`` is ``n_blocks - 1``.  Instances are immutable.
    """

    __slots__ = ("block_dim", "data")

    def __init__(self, block_dim: int, data: np.ndarray):
        if block_dim < 1:
            raise ValueError("block_dim must be >= 1")
        data = _freeze(np.ravel(data))
        if data.size % block_dim != 0 or data.size == 0:
            raise ValueError(
                f"data length {data.size} is not a positive multiple of block_dim {block_dim}"
            )
        object.__setattr__(self, "block_dim", block_dim)
        object.__setattr__(self, "data", data)

    def __setattr__(self, name, value):
        raise AttributeError("StackedSignal is immutable")

    @classmethod
    def from_blocks(cls, blocks: Iterable[np.ndarray]) -> "StackedSignal":
        blocks = [np.ravel(np.asarray(b, dtype=float)) for b in blocks]
        if not blocks:
            raise ValueError("need at least one block")
        n = blocks[0].size
        if any(b.size != n for b in blocks):
            raise ValueError("all blocks must have equal length")
        return cls(n, np.concatenate(blocks))

    @classmethod
    def zeros(cls, horizon_T: int, block_dim: int) -> "StackedSignal":
        return cls(block_dim, np.zeros((horizon_T + 1) * block_dim))

    @property
    def n_blocks(self) -> int:
        return self.data.size // self.block_dim

    @property
    def horizon_T(self) -> int:
        return self.n_blocks - 1

    def block(self, t: int) -> np.ndarray:
        if not 0 <= t < self.n_blocks:
            raise IndexError(f"block index {t} out of range 0..{self.n_blocks - 1}")
        n = self.block_dim
        return self.data[t * n : (t + 1) * n]

    def blocks(self) -> Iterator[np.ndarray]:
        for t in range(self.n_blocks):
            yield self.block(t)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, StackedSignal)
            and self.block_dim == other.block_dim
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"StackedSignal(block_dim={self.block_dim}, n_blocks={self.n_blocks})"


class BltMatrix:
    """Block-lower-triangular operator on a horizon of ``T + 1`` block slots.

    Blocks are ``p x q`` matrices keyed by absolute ``(block_row, block_col)``
    with ``0 <= col <= row <= T``; a missing key is a zero block.  An
    off-diagonal offset accessor is provided for the common
    "row, how-many-steps-back" addressing: ``offset_block(i, k)`` is the
    block at ``(i, i - k)``.
    """

    __slots__ = ("horizon_T", "block_rows", "block_cols", "_blocks")

    def __init__(
        self,
        horizon_T: int,
        block_rows: int,
        block_cols: int,
        blocks: Mapping[tuple[int, int], np.ndarray] | None = None,
    ):
        if horizon_T < 0:
            raise ValueError("horizon_T must be >= 0")
        if block_rows < 1 or block_cols < 1:
            raise ValueError("block dimensions must be >= 1")
        stored: dict[tuple[int, int], np.ndarray] = {}
        if blocks:
            for (i, j), blk in blocks.items():
                if not (0 <= j <= i <= horizon_T):
                    raise ValueError(f"block ({i}, {j}) violates lower-triangular structure")
                blk = np.asarray(blk, dtype=float)
                if blk.shape != (block_rows, block_cols):
                    raise ValueError(
                        f"block ({i}, {j}) has shape {blk.shape}, "
                        f"expected ({block_rows}, {block_cols})"
                    )
                stored[(i, j)] = _freeze(blk)
        object.__setattr__(self, "horizon_T", horizon_T)
        object.__setattr__(self, "block_rows", block_rows)
        object.__setattr__(self, "block_cols", block_cols)
        object.__setattr__(self, "_blocks", stored)

    def __setattr__(self, name, value):
        raise AttributeError("BltMatrix is immutable")

    def block(self, i: int, j: int) -> np.ndarray:
        """Block at absolute (row i, col j); zeros if absent."""
        if not (0 <= j <= i <= self.horizon_T):
            raise IndexError(f"({i}, {j}) outside lower-triangular range, T={self.horizon_T}")
        blk = self._blocks.get((i, j))
        if blk is None:
            return np.zeros((self.block_rows, self.block_cols))
        return blk

    def offset_block(self, i: int, k: int) -> np.ndarray:
        """Block k steps left of the diagonal in block-row i, i.e. at (i, i - k)."""
        return self.block(i, i - k)

    def stored_items(self) -> Iterator[tuple[tuple[int, int], np.ndarray]]:
        return iter(sorted(self._blocks.items()))

    @property
    def n_stored(self) -> int:
        return len(self._blocks)

    @property
    def shape(self) -> tuple[int, int]:
        return ((self.horizon_T + 1) * self.block_rows, (self.horizon_T + 1) * self.block_cols)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        p, q = self.block_rows, self.block_cols
        for (i, j), blk in self._blocks.items():
            out[i * p : (i + 1) * p, j * q : (j + 1) * q] = blk
        return out

    def apply(self, s: StackedSignal | np.ndarray) -> StackedSignal:
        return blt_apply(self, s)

    def compose(self, other: "BltMatrix") -> "BltMatrix":
        return blt_compose(self, other)

    def __matmul__(self, other):
        if isinstance(other, BltMatrix):
            return blt_compose(self, other)
        if isinstance(other, (StackedSignal, np.ndarray)):
            return blt_apply(self, other)
        return NotImplemented

    def scaled(self, factor: float) -> "BltMatrix":
        return BltMatrix(
            self.horizon_T,
            self.block_rows,
            self.block_cols,
            {ij: factor * blk for ij, blk in self._blocks.items()},
        )

    def add(self, other: "BltMatrix") -> "BltMatrix":
        if (self.horizon_T, self.block_rows, self.block_cols) != (
            other.horizon_T,
            other.block_rows,
            other.block_cols,
        ):
            raise ValueError("incompatible shapes for BLT addition")
        keys = set(self._blocks) | set(other._blocks)
        return BltMatrix(
            self.horizon_T,
            self.block_rows,
            self.block_cols,
            {ij: self.block(*ij) + other.block(*ij) for ij in keys},
        )

    def __repr__(self) -> str:
        return (
            f"BltMatrix(T={self.horizon_T}, block={self.block_rows}x{self.block_cols}, "
            f"stored={self.n_stored})"
        )


def shift_operator(T: int, n: int) -> BltMatrix:
    """Block down-shift: identity blocks on the first subdiagonal, zero elsewhere."""
    if T < 0 or n < 1:
        raise ValueError("need T >= 0 and n >= 1")
    eye = np.eye(n)
    return BltMatrix(T, n, n, {(i, i - 1): eye for i in range(1, T + 1)})


def eye_blt(T: int, n: int) -> BltMatrix:
    eye = np.eye(n)
    return BltMatrix(T, n, n, {(i, i): eye for i in range(T + 1)})


def build_banded_blocks(
    mats: list[np.ndarray], T: int
) -> tuple[BltMatrix, np.ndarray]:
    """Banded horizon operator and its history companion for one matrix family.

    Given ``mats = [M_0, ..., M_nd]`` (each ``nx x m``), returns

    * the ``(T+1) x (T+1)``-block operator with ``M_k`` on the k-th
      subdiagonal of block-rows ``0..T-1`` and an all-zero last block row,
    * the dense ``(T+1)*nx x nd*m`` history matrix whose block-row ``i``
      (for ``i < nd``) holds ``[0 ... 0, M_nd, ..., M_{i+1}]``, so that its
      product with the stacked history ``[s(-nd), ..., s(-1)]`` gives the
      delayed contributions entering steps ``i`` of the horizon.
    """
    mats = [np.asarray(m, dtype=float) for m in mats]
    nd = len(mats) - 1
    if nd < 0:
        raise ValueError("need at least one matrix")
    nx, m = mats[0].shape
    if any(mat.shape != (nx, m) for mat in mats):
        raise ValueError("all matrices in the family must share one shape")
    if T <= nd:
        raise ValueError(f"horizon T={T} must exceed the delay span {nd}")

    blocks: dict[tuple[int, int], np.ndarray] = {}
    for i in range(T):  # last block row stays zero
        for k in range(min(i, nd) + 1):
            blocks[(i, i - k)] = mats[k]
    banded = BltMatrix(T, nx, m, blocks)

    hist = np.zeros(((T + 1) * nx, nd * m))
    for i in range(nd):
        # block-row i: columns j = i..nd-1 hold M_{nd - (j - i)}
        for j in range(i, nd):
            hist[i * nx : (i + 1) * nx, j * m : (j + 1) * m] = mats[nd - (j - i)]
    return banded, hist


def build_nominal_blocks(sys, T: int):
    """Nominal banded operators (A_hat, B_hat, A_hat_minus, B_hat_minus)."""
    a_hat, a_minus = build_banded_blocks(list(sys.a_nom), T)
    b_hat, b_minus = build_banded_blocks(list(sys.b_nom), T)
    return a_hat, b_hat, a_minus, b_minus


def build_delta_blocks(vertex, T: int):
    """Uncertainty banded operators for one polytope vertex, same layout as nominal."""
    d_a, d_a_minus = build_banded_blocks(list(vertex.d_a), T)
    d_b, d_b_minus = build_banded_blocks(list(vertex.d_b), T)
    return d_a, d_b, d_a_minus, d_b_minus


def _shifted_banded_block(banded: BltMatrix, i: int, m: int) -> np.ndarray | None:
    """Block (i, m) of Z @ banded, or None when structurally zero."""
    if i == 0 or m > i - 1:
        return None
    blk = banded._blocks.get((i - 1, m))
    return blk


def blt_apply(mat: BltMatrix, s: StackedSignal | np.ndarray) -> StackedSignal:
    """Matrix-signal product; returns a stacked signal of mat's row block size."""
    data = s.data if isinstance(s, StackedSignal) else np.ravel(np.asarray(s, dtype=float))
    q = mat.block_cols
    if data.size != (mat.horizon_T + 1) * q:
        raise ValueError(
            f"signal length {data.size} incompatible with operator needing "
            f"{(mat.horizon_T + 1) * q}"
        )
    out = np.zeros((mat.horizon_T + 1) * mat.block_rows)
    p = mat.block_rows
    for (i, j), blk in mat._blocks.items():
        out[i * p : (i + 1) * p] += blk @ data[j * q : (j + 1) * q]
    return StackedSignal(p, out)


def blt_compose(m1: BltMatrix, m2: BltMatrix) -> BltMatrix:
    """Product m1 @ m2; strictly lower-triangular structure is preserved."""
    if m1.horizon_T != m2.horizon_T or m1.block_cols != m2.block_rows:
        raise ValueError("incompatible operators for composition")
    out: dict[tuple[int, int], np.ndarray] = {}
    # group m2 blocks by block-row for the inner contraction
    by_row: dict[int, list[tuple[int, np.ndarray]]] = {}
    for (k, j), blk in m2._blocks.items():
        by_row.setdefault(k, []).append((j, blk))
    for (i, k), left in m1._blocks.items():
        for j, right in by_row.get(k, ()):
            prod = left @ right
            key = (i, j)
            if key in out:
                out[key] = out[key] + prod
            else:
                out[key] = prod
    return BltMatrix(m1.horizon_T, m1.block_rows, m2.block_cols, out)


def one_minus_shifted(banded: BltMatrix) -> BltMatrix:
    """The operator I - Z @ banded (unit block diagonal, shifted band below)."""
    n = banded.block_rows
    if banded.block_cols != n:
        raise ValueError("need a square-block operator")
    T = banded.horizon_T
    blocks: dict[tuple[int, int], np.ndarray] = {(i, i): np.eye(n) for i in range(T + 1)}
    for (i, j), blk in banded._blocks.items():
        if i + 1 <= T:
            blocks[(i + 1, j)] = blocks.get((i + 1, j), np.zeros((n, n))) - blk
    return BltMatrix(T, n, n, blocks)


def blt_solve_unit_lower(mat: BltMatrix, rhs: StackedSignal | np.ndarray) -> StackedSignal:
    """Solve mat @ x = rhs by block forward substitution; diagonal blocks must be I."""
    n = mat.block_rows
    if mat.block_cols != n:
        raise ValueError("need a square-block operator")
    data = rhs.data if isinstance(rhs, StackedSignal) else np.ravel(np.asarray(rhs, dtype=float))
    T = mat.horizon_T
    if data.size != (T + 1) * n:
        raise ValueError("rhs length incompatible with operator")
    for i in range(T + 1):
        diag = mat._blocks.get((i, i))
        if diag is None or not np.array_equal(diag, np.eye(n)):
            raise ValueError(f"diagonal block ({i}, {i}) is not the identity")
    x = np.zeros_like(data)
    for i in range(T + 1):
        acc = data[i * n : (i + 1) * n].copy()
        for j in range(i):
            blk = mat._blocks.get((i, j))
            if blk is not None:
                acc -= blk @ x[j * n : (j + 1) * n]
        x[i * n : (i + 1) * n] = acc
    return StackedSignal(n, x)


def blt_solve_lower(mat: BltMatrix, rhs: StackedSignal | np.ndarray) -> StackedSignal:
    """Solve mat @ x = rhs by block forward substitution (invertible diagonal blocks)."""
    n = mat.block_rows
    if mat.block_cols != n:
        raise ValueError("need a square-block operator")
    data = rhs.data if isinstance(rhs, StackedSignal) else np.ravel(np.asarray(rhs, dtype=float))
    T = mat.horizon_T
    if data.size != (T + 1) * n:
        raise ValueError("rhs length incompatible with operator")
    x = np.zeros_like(data)
    for i in range(T + 1):
        acc = data[i * n : (i + 1) * n].copy()
        for j in range(i):
            blk = mat._blocks.get((i, j))
            if blk is not None:
                acc -= blk @ x[j * n : (j + 1) * n]
        diag = mat._blocks.get((i, i))
        if diag is None:
            raise ValueError(f"diagonal block ({i}, {i}) is zero; system is singular")
        x[i * n : (i + 1) * n] = np.linalg.solve(diag, acc)
    return StackedSignal(n, x)


def blt_right_divide(num: BltMatrix, den: BltMatrix) -> BltMatrix:
    """Solve K @ den = num for K (den square-block, invertible diagonal blocks).

    Backward substitution over block columns: the (t, t) entry of K comes from
    den's diagonal alone, then earlier columns are peeled off one at a time.
    """
    if den.block_rows != den.block_cols:
        raise ValueError("denominator must have square blocks")
    if num.horizon_T != den.horizon_T or num.block_cols != den.block_rows:
        raise ValueError("incompatible operators for right division")
    T = num.horizon_T
    n = den.block_rows
    out: dict[tuple[int, int], np.ndarray] = {}
    diags = []
    for t in range(T + 1):
        diag = den._blocks.get((t, t))
        if diag is None:
            raise ValueError(f"denominator diagonal block ({t}, {t}) is zero")
        diags.append(diag)
    for t in range(T + 1):
        for j in range(t, -1, -1):
            acc = np.array(num.block(t, j))
            for m in range(j + 1, t + 1):
                k_blk = out.get((t, m))
                den_blk = den._blocks.get((m, j))
                if k_blk is not None and den_blk is not None:
                    acc -= k_blk @ den_blk
            # K[t, j] = acc @ inv(den[j, j])
            out[(t, j)] = np.linalg.solve(diags[j].T, acc.T).T
    return BltMatrix(T, num.block_rows, n, out)


def compute_offset(sys, T: int, x_hist, u_hist) -> tuple[StackedSignal, StackedSignal]:
    """Known delay offset d and its propagation h through the nominal dynamics.

    ``x_hist`` holds the ``na + 1`` states up to and including the current one
    (the trailing entry is the current state and does not enter d); ``u_hist``
    holds the ``nb`` past inputs.  ``h`` solves the unit-lower system
    ``(I - Z A_hat) h = d`` by forward substitution, so ``h_0 = 0`` always.
    """
    nx, nu = sys.nx, sys.nu
    na, nb = sys.na, sys.nb
    x_hist = [np.asarray(x, dtype=float) for x in x_hist]
    u_hist = [np.asarray(u, dtype=float) for u in u_hist]
    if len(x_hist) != na + 1:
        raise ValueError(f"x_hist must hold na+1={na + 1} states, got {len(x_hist)}")
    if len(u_hist) != nb:
        raise ValueError(f"u_hist must hold nb={nb} inputs, got {len(u_hist)}")

    a_hat, b_hat, a_minus, b_minus = build_nominal_blocks(sys, T)
    x_past = np.concatenate([x.ravel() for x in x_hist[:-1]]) if na > 0 else np.zeros(0)
    u_past = np.concatenate([u.ravel() for u in u_hist]) if nb > 0 else np.zeros(0)

    pre = a_minus @ x_past + b_minus @ u_past  # contributions landing at steps 0..T-1
    d = np.zeros((T + 1) * nx)
    d[nx:] = pre[:-nx]  # down-shift by one block
    d_sig = StackedSignal(nx, d)
    h_sig = blt_solve_unit_lower(one_minus_shifted(a_hat), d_sig)
    return d_sig, h_sig
