"""Problem data for robust MPC of uncertain linear time-delay systems.

Defines the uncertain delayed dynamics, polytopic constraint sets, and the
finite-horizon optimal control problem, together with non-throwing
validation and a JSON problem-file format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "UncertaintyVertex",
    "TimeDelaySystem",
    "PolytopeSet",
    "OcpProblem",
    "Violation",
    "validate",
    "load_problem",
    "loads_problem",
    "dump_problem",
    "ProblemFormatError",
    "ProblemValidationError",
]


def _mat(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != 2:
        raise ProblemFormatError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def _vec(a, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != 1:
        arr = arr.ravel()
    arr.setflags(write=False)
    return arr


class ProblemFormatError(ValueError):
    """Problem file cannot be parsed into problem data."""


class ProblemValidationError(ValueError):
    """Parsed problem data violates one or more invariants."""

    def __init__(self, violations: Sequence["Violation"]):
        self.violations = list(violations)
        lines = "; ".join(f"[{v.code}] {v.message}" for v in self.violations)
        super().__init__(f"invalid problem: {lines}")


@dataclass(frozen=True)
class Violation:
    """One violated invariant: a stable machine code plus a human message."""

    code: str
    message: str


@dataclass(frozen=True)
class UncertaintyVertex:
    """One vertex of the model-uncertainty polytope: (dA_0..dA_na, dB_0..dB_nb)."""

    d_a: tuple[np.ndarray, ...]
    d_b: tuple[np.ndarray, ...]

    def __init__(self, d_a, d_b):
        object.__setattr__(self, "d_a", tuple(_mat(m, "dA") for m in d_a))
        object.__setattr__(self, "d_b", tuple(_mat(m, "dB") for m in d_b))


@dataclass(frozen=True)
class TimeDelaySystem:
    """Uncertain linear dynamics with state delay na and input delay nb.

    The next state is the sum of ``(A_i + dA_i) x(k-i)`` for ``i = 0..na``,
    ``(B_j + dB_j) u(k-j)`` for ``j = 0..nb``, and a disturbance bounded in
    infinity norm by ``sigma_w``; the uncertainty tuple ``(dA, dB)`` ranges
    over the convex hull of ``vertices``.
    """

    nx: int
    nu: int
    na: int
    nb: int
    a_nom: tuple[np.ndarray, ...]
    b_nom: tuple[np.ndarray, ...]
    vertices: tuple[UncertaintyVertex, ...]
    sigma_w: float

    def __init__(self, nx, nu, na, nb, a_nom, b_nom, vertices, sigma_w):
        object.__setattr__(self, "nx", int(nx))
        object.__setattr__(self, "nu", int(nu))
        object.__setattr__(self, "na", int(na))
        object.__setattr__(self, "nb", int(nb))
        object.__setattr__(self, "a_nom", tuple(_mat(m, "A_nom") for m in a_nom))
        object.__setattr__(self, "b_nom", tuple(_mat(m, "B_nom") for m in b_nom))
        object.__setattr__(
            self,
            "vertices",
            tuple(v if isinstance(v, UncertaintyVertex) else UncertaintyVertex(**v) for v in vertices),
        )
        object.__setattr__(self, "sigma_w", float(sigma_w))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class PolytopeSet:
    """Polytope { z : f_mat @ z <= b_vec } with the origin in its interior."""

    f_mat: np.ndarray
    b_vec: np.ndarray

    def __init__(self, f_mat, b_vec):
        object.__setattr__(self, "f_mat", _mat(f_mat, "F"))
        object.__setattr__(self, "b_vec", _vec(b_vec, "b"))

    @classmethod
    def box(cls, radii: Sequence[float]) -> "PolytopeSet":
        """Axis-aligned box |z_i| <= radii[i]."""
        radii = np.asarray(radii, dtype=float)
        n = radii.size
        eye = np.eye(n)
        return cls(np.vstack([eye, -eye]), np.concatenate([radii, radii]))

    @property
    def n_facets(self) -> int:
        return self.f_mat.shape[0]

    @property
    def dim(self) -> int:
        return self.f_mat.shape[1]

    def facets(self) -> Iterator[tuple[np.ndarray, float]]:
        """Yield (normal row, offset) pairs in row order."""
        for k in range(self.n_facets):
            yield self.f_mat[k], float(self.b_vec[k])

    def contains(self, z: np.ndarray, tol: float = 0.0) -> bool:
        return bool(np.all(self.f_mat @ np.asarray(z, dtype=float) <= self.b_vec + tol))

    def slacks(self, z: np.ndarray) -> np.ndarray:
        """Per-facet slack b - f@z (negative entries are violations)."""
        return self.b_vec - self.f_mat @ np.asarray(z, dtype=float)


@dataclass(frozen=True)
class OcpProblem:
    """Finite-horizon robust OCP data.

    ``x_hist`` holds the known states from ``na`` steps back up to the
    current state (``na + 1`` vectors, current state last); ``u_hist`` holds
    the ``nb`` past inputs, oldest first.  ``x_set_overrides`` optionally
    replaces the state constraint set at individual times ``t < horizon_T``.
    """

    system: TimeDelaySystem
    horizon_T: int
    x_set: PolytopeSet
    u_set: PolytopeSet
    q_weight: np.ndarray
    r_weight: np.ndarray
    qt_weight: np.ndarray
    x_hist: tuple[np.ndarray, ...]
    u_hist: tuple[np.ndarray, ...]
    terminal_set: PolytopeSet | None = None
    x_set_overrides: Mapping[int, PolytopeSet] | None = None

    def __init__(
        self,
        system,
        horizon_T,
        x_set,
        u_set,
        q_weight,
        r_weight,
        qt_weight,
        x_hist,
        u_hist=(),
        terminal_set=None,
        x_set_overrides=None,
    ):
        object.__setattr__(self, "system", system)
        object.__setattr__(self, "horizon_T", int(horizon_T))
        object.__setattr__(self, "x_set", x_set)
        object.__setattr__(self, "u_set", u_set)
        object.__setattr__(self, "q_weight", _mat(q_weight, "Q"))
        object.__setattr__(self, "r_weight", _mat(r_weight, "R"))
        object.__setattr__(self, "qt_weight", _mat(qt_weight, "QT"))
        object.__setattr__(self, "x_hist", tuple(_vec(x, "x_hist") for x in x_hist))
        object.__setattr__(self, "u_hist", tuple(_vec(u, "u_hist") for u in u_hist))
        object.__setattr__(self, "terminal_set", terminal_set)
        object.__setattr__(
            self,
            "x_set_overrides",
            dict(x_set_overrides) if x_set_overrides else None,
        )

    @property
    def x0(self) -> np.ndarray:
        return self.x_hist[-1]

    def x_set_at(self, t: int) -> PolytopeSet:
        if self.x_set_overrides and t in self.x_set_overrides:
            return self.x_set_overrides[t]
        return self.x_set

    def with_history(self, x_hist, u_hist) -> "OcpProblem":
        """Same problem re-anchored at a new known history."""
        return OcpProblem(
            system=self.system,
            horizon_T=self.horizon_T,
            x_set=self.x_set,
            u_set=self.u_set,
            q_weight=self.q_weight,
            r_weight=self.r_weight,
            qt_weight=self.qt_weight,
            x_hist=x_hist,
            u_hist=u_hist,
            terminal_set=self.terminal_set,
            x_set_overrides=self.x_set_overrides,
        )


def _check_psd(mat: np.ndarray, name: str, out: list[Violation]) -> None:
    if mat.shape[0] != mat.shape[1]:
        out.append(Violation("weight_not_square", f"{name} must be square, got {mat.shape}"))
        return
    if not np.allclose(mat, mat.T, atol=1e-12):
        out.append(Violation("weight_not_symmetric", f"{name} must be symmetric"))
        return
    eigs = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    if eigs.min(initial=0.0) < -1e-10:
        out.append(
            Violation("weight_not_psd", f"{name} has negative eigenvalue {eigs.min():.3e}")
        )


def _check_polytope(ps: PolytopeSet, name: str, dim: int, out: list[Violation]) -> None:
    if ps.f_mat.shape[0] != ps.b_vec.size:
        out.append(
            Violation(
                "facet_count_mismatch",
                f"{name}: F has {ps.f_mat.shape[0]} rows but b has {ps.b_vec.size} entries",
            )
        )
    if ps.f_mat.shape[1] != dim:
        out.append(
            Violation(
                "facet_dim_mismatch",
                f"{name}: facet normals have dimension {ps.f_mat.shape[1]}, expected {dim}",
            )
        )
    if ps.b_vec.size and ps.b_vec.min() <= 0:
        out.append(
            Violation(
                "origin_not_interior",
                f"{name}: offsets must be strictly positive (origin in the interior), "
                f"min is {ps.b_vec.min():.3e}",
            )
        )


def validate(problem: OcpProblem) -> list[Violation]:
    """Collect every violated invariant; an empty list means the problem is usable.

    Never raises on malformed-but-constructible data: all checks run and all
    findings are reported together.
    """
    out: list[Violation] = []
    sys = problem.system
    nx, nu, na, nb = sys.nx, sys.nu, sys.na, sys.nb

    if nx < 1 or nu < 1:
        out.append(Violation("bad_dims", f"nx and nu must be positive, got {nx}, {nu}"))
    if na < 0 or nb < 0:
        out.append(Violation("bad_delay", f"na and nb must be >= 0, got {na}, {nb}"))

    if len(sys.a_nom) != na + 1:
        out.append(
            Violation("a_nom_len", f"A_nom must hold na+1={na + 1} matrices, got {len(sys.a_nom)}")
        )
    if len(sys.b_nom) != nb + 1:
        out.append(
            Violation("b_nom_len", f"B_nom must hold nb+1={nb + 1} matrices, got {len(sys.b_nom)}")
        )
    for i, m in enumerate(sys.a_nom):
        if m.shape != (nx, nx):
            out.append(
                Violation("a_nom_shape", f"A_nom[{i}] has shape {m.shape}, expected ({nx}, {nx})")
            )
    for j, m in enumerate(sys.b_nom):
        if m.shape != (nx, nu):
            out.append(
                Violation("b_nom_shape", f"B_nom[{j}] has shape {m.shape}, expected ({nx}, {nu})")
            )

    if sys.n_vertices < 1:
        out.append(Violation("no_vertices", "uncertainty polytope needs at least one vertex"))
    for k, v in enumerate(sys.vertices):
        if len(v.d_a) != len(sys.a_nom) or len(v.d_b) != len(sys.b_nom):
            out.append(
                Violation(
                    "vertex_len_mismatch",
                    f"vertex {k} must hold {len(sys.a_nom)} dA and {len(sys.b_nom)} dB matrices",
                )
            )
            continue
        if any(m.shape != (nx, nx) for m in v.d_a) or any(m.shape != (nx, nu) for m in v.d_b):
            out.append(Violation("vertex_shape", f"vertex {k} has a wrongly shaped matrix"))

    if not np.isfinite(sys.sigma_w) or sys.sigma_w < 0:
        out.append(Violation("sigma_w_negative", f"sigma_w must be >= 0, got {sys.sigma_w}"))

    if problem.horizon_T <= max(na, nb):
        out.append(
            Violation(
                "horizon_too_short",
                f"horizon T={problem.horizon_T} must exceed max(na, nb)={max(na, nb)}",
            )
        )

    _check_polytope(problem.x_set, "X", nx, out)
    _check_polytope(problem.u_set, "U", nu, out)
    if problem.terminal_set is not None:
        _check_polytope(problem.terminal_set, "XT", nx, out)
    if problem.x_set_overrides:
        for t, ps in problem.x_set_overrides.items():
            if not 0 <= t < problem.horizon_T:
                out.append(
                    Violation("override_time", f"x_set override at t={t} outside 0..T-1")
                )
            _check_polytope(ps, f"X@t={t}", nx, out)

    if problem.q_weight.shape != (nx, nx):
        out.append(Violation("q_shape", f"Q has shape {problem.q_weight.shape}, expected ({nx}, {nx})"))
    else:
        _check_psd(problem.q_weight, "Q", out)
    if problem.qt_weight.shape != (nx, nx):
        out.append(Violation("qt_shape", f"QT has shape {problem.qt_weight.shape}"))
    else:
        _check_psd(problem.qt_weight, "QT", out)
    if problem.r_weight.shape != (nu, nu):
        out.append(Violation("r_shape", f"R has shape {problem.r_weight.shape}, expected ({nu}, {nu})"))
    else:
        _check_psd(problem.r_weight, "R", out)

    if len(problem.x_hist) != na + 1:
        out.append(
            Violation("x_hist_len", f"x_hist must hold na+1={na + 1} states, got {len(problem.x_hist)}")
        )
    if any(x.size != nx for x in problem.x_hist):
        out.append(Violation("x_hist_dim", f"every x_hist entry must have length nx={nx}"))
    if len(problem.u_hist) != nb:
        out.append(
            Violation("u_hist_len", f"u_hist must hold nb={nb} inputs, got {len(problem.u_hist)}")
        )
    if any(u.size != nu for u in problem.u_hist):
        out.append(Violation("u_hist_dim", f"every u_hist entry must have length nu={nu}"))

    for arrs, name in (
        (sys.a_nom, "A_nom"),
        (sys.b_nom, "B_nom"),
        (problem.x_hist, "x_hist"),
        (problem.u_hist, "u_hist"),
    ):
        if any(not np.all(np.isfinite(a)) for a in arrs):
            out.append(Violation("non_finite", f"{name} contains non-finite entries"))

    return out


# ---------------------------------------------------------------------------
# JSON problem files


def _get(obj: dict, key: str, where: str):
    if key not in obj:
        raise ProblemFormatError(f"missing field '{key}' in {where}")
    return obj[key]


def _parse_set(obj, name: str) -> PolytopeSet:
    if not isinstance(obj, dict):
        raise ProblemFormatError(f"field '{name}' must be an object with F and b")
    try:
        return PolytopeSet(_get(obj, "F", name), _get(obj, "b", name))
    except (TypeError, ValueError) as exc:
        raise ProblemFormatError(f"field '{name}': {exc}") from exc


def loads_problem(text: str) -> OcpProblem:
    """Parse and validate a JSON problem file; raises on malformed or invalid data."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFormatError(
            f"not valid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ProblemFormatError("top-level JSON value must be an object")

    try:
        vertices = []
        for k, v in enumerate(_get(raw, "vertices", "problem")):
            if not isinstance(v, dict):
                raise ProblemFormatError(f"vertices[{k}] must be an object with dA and dB")
            vertices.append(
                UncertaintyVertex(
                    d_a=_get(v, "dA", f"vertices[{k}]"), d_b=_get(v, "dB", f"vertices[{k}]")
                )
            )
        system = TimeDelaySystem(
            nx=_get(raw, "nx", "problem"),
            nu=_get(raw, "nu", "problem"),
            na=_get(raw, "na", "problem"),
            nb=_get(raw, "nb", "problem"),
            a_nom=_get(raw, "A_nom", "problem"),
            b_nom=_get(raw, "B_nom", "problem"),
            vertices=vertices,
            sigma_w=_get(raw, "sigma_w", "problem"),
        )
        problem = OcpProblem(
            system=system,
            horizon_T=_get(raw, "T", "problem"),
            x_set=_parse_set(_get(raw, "X", "problem"), "X"),
            u_set=_parse_set(_get(raw, "U", "problem"), "U"),
            terminal_set=_parse_set(raw["XT"], "XT") if raw.get("XT") is not None else None,
            q_weight=_get(raw, "Q", "problem"),
            r_weight=_get(raw, "R", "problem"),
            qt_weight=_get(raw, "QT", "problem"),
            x_hist=_get(raw, "x_hist", "problem"),
            u_hist=raw.get("u_hist", []),
        )
    except ProblemFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise ProblemFormatError(str(exc)) from exc

    violations = validate(problem)
    if violations:
        raise ProblemValidationError(violations)
    return problem


def load_problem(path) -> OcpProblem:
    """Read a problem file from disk."""
    with open(path, "r", encoding="utf-8") as fh:
        return loads_problem(fh.read())


def dump_problem(problem: OcpProblem, indent: int | None = 2) -> str:
    """Serialize a problem to the JSON problem-file format (round-trips exactly)."""
    sys = problem.system

    def mats(ms):
        return [m.tolist() for m in ms]

    obj = {
        "nx": sys.nx,
        "nu": sys.nu,
        "na": sys.na,
        "nb": sys.nb,
        "A_nom": mats(sys.a_nom),
        "B_nom": mats(sys.b_nom),
        "vertices": [{"dA": mats(v.d_a), "dB": mats(v.d_b)} for v in sys.vertices],
        "sigma_w": sys.sigma_w,
        "T": problem.horizon_T,
        "X": {"F": problem.x_set.f_mat.tolist(), "b": problem.x_set.b_vec.tolist()},
        "U": {"F": problem.u_set.f_mat.tolist(), "b": problem.u_set.b_vec.tolist()},
        "Q": problem.q_weight.tolist(),
        "R": problem.r_weight.tolist(),
        "QT": problem.qt_weight.tolist(),
        "x_hist": [x.tolist() for x in problem.x_hist],
        "u_hist": [u.tolist() for u in problem.u_hist],
    }
    if problem.terminal_set is not None:
        obj["XT"] = {
            "F": problem.terminal_set.f_mat.tolist(),
            "b": problem.terminal_set.b_vec.tolist(),
        }
    return json.dumps(obj, indent=indent)
