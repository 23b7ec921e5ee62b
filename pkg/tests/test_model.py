import json

import numpy as np
import pytest

from delaympc.model import (
    OcpProblem,
    PolytopeSet,
    ProblemFormatError,
    ProblemValidationError,
    TimeDelaySystem,
    UncertaintyVertex,
    dump_problem,
    loads_problem,
    validate,
)
from delaympc.presets import demo_problem_3d


class TestValidate:
    def test_demo_problem_is_valid(self, demo_problem):
        assert validate(demo_problem) == []

    def test_horizon_must_exceed_delay(self, demo_problem):
        bad = demo_problem.with_history(demo_problem.x_hist, demo_problem.u_hist)
        bad = OcpProblem(
            system=bad.system, horizon_T=3, x_set=bad.x_set, u_set=bad.u_set,
            q_weight=bad.q_weight, r_weight=bad.r_weight, qt_weight=bad.qt_weight,
            x_hist=bad.x_hist, u_hist=bad.u_hist,
        )
        codes = [v.code for v in validate(bad)]
        assert codes == ["horizon_too_short"]

    def test_origin_must_be_interior(self, demo_problem):
        bad_set = PolytopeSet([[1.0, 0, 0], [-1.0, 0, 0]], [0.0, 1.0])
        bad = OcpProblem(
            system=demo_problem.system, horizon_T=6, x_set=bad_set,
            u_set=demo_problem.u_set, q_weight=np.eye(3), r_weight=[[0.01]],
            qt_weight=np.eye(3), x_hist=demo_problem.x_hist, u_hist=[],
        )
        assert any(v.code == "origin_not_interior" for v in validate(bad))

    def test_validation_is_total_on_many_faults(self):
        # several simultaneous defects are all reported, none aborts the scan
        system = TimeDelaySystem(
            nx=2, nu=1, na=1, nb=0,
            a_nom=[np.eye(2)],                      # wrong length
            b_nom=[np.zeros((2, 1))],
            vertices=[UncertaintyVertex(d_a=[np.eye(2)], d_b=[np.zeros((2, 1))])],
            sigma_w=-1.0,                           # negative bound
        )
        problem = OcpProblem(
            system=system, horizon_T=1,             # too short
            x_set=PolytopeSet.box([1.0, 1.0]),
            u_set=PolytopeSet.box([1.0]),
            q_weight=np.eye(2), r_weight=[[1.0]],
            qt_weight=[[1.0, 2.0], [0.0, 1.0]],     # not symmetric
            x_hist=[[0.0, 0.0]],                    # wrong length for na=1
            u_hist=[],
        )
        codes = {v.code for v in validate(problem)}
        assert {"a_nom_len", "sigma_w_negative", "horizon_too_short",
                "weight_not_symmetric", "x_hist_len"} <= codes

    def test_psd_check(self):
        system = TimeDelaySystem(
            nx=1, nu=1, na=0, nb=0, a_nom=[[[1.0]]], b_nom=[[[1.0]]],
            vertices=[UncertaintyVertex(d_a=[[[0.0]]], d_b=[[[0.0]]])], sigma_w=0.0,
        )
        problem = OcpProblem(
            system=system, horizon_T=2, x_set=PolytopeSet.box([1.0]),
            u_set=PolytopeSet.box([1.0]), q_weight=[[-1.0]], r_weight=[[1.0]],
            qt_weight=[[1.0]], x_hist=[[0.0]], u_hist=[],
        )
        assert any(v.code == "weight_not_psd" for v in validate(problem))


class TestPolytopeSet:
    def test_scalar_box_facets(self):
        ps = PolytopeSet.box([np.pi])
        facets = list(ps.facets())
        assert len(facets) == 2
        f0, b0 = facets[0]
        f1, b1 = facets[1]
        np.testing.assert_array_equal(f0, [1.0])
        np.testing.assert_array_equal(f1, [-1.0])
        assert b0 == b1 == pytest.approx(np.pi)

    def test_box_2d_has_four_facets(self):
        ps = PolytopeSet.box([30.0, 30.0])
        assert ps.n_facets == 4
        assert ps.contains([29.9, -29.9])
        assert not ps.contains([30.1, 0.0])

    def test_single_facet_passthrough(self):
        ps = PolytopeSet([[2.0, 1.0]], [3.0])
        (f, b), = list(ps.facets())
        np.testing.assert_array_equal(f, [2.0, 1.0])
        assert b == 3.0

    def test_slacks_sign(self):
        ps = PolytopeSet.box([1.0])
        assert ps.slacks([0.5]).min() == pytest.approx(0.5)
        assert ps.slacks([1.5]).min() == pytest.approx(-0.5)


class TestProblemFiles:
    def test_round_trip_demo(self, demo_problem):
        text = dump_problem(demo_problem)
        again = loads_problem(text)
        assert again.system.na == 3 and again.system.nb == 0
        assert again.system.n_vertices == 2
        assert again.horizon_T == 6
        np.testing.assert_array_equal(again.x0, demo_problem.x0)
        for m1, m2 in zip(again.system.a_nom, demo_problem.system.a_nom):
            np.testing.assert_array_equal(m1, m2)
        for v1, v2 in zip(again.system.vertices, demo_problem.system.vertices):
            for m1, m2 in zip(v1.d_a, v2.d_a):
                np.testing.assert_array_equal(m1, m2)
        # a second serialization is byte-identical
        assert dump_problem(again) == text

    def test_optional_terminal_set(self, demo_problem):
        text = dump_problem(demo_problem)
        assert loads_problem(text).terminal_set is None
        raw = json.loads(text)
        raw["XT"] = {"F": [[1, 0, 0], [-1, 0, 0]], "b": [1.0, 1.0]}
        with_terminal = loads_problem(json.dumps(raw))
        assert with_terminal.terminal_set is not None
        assert with_terminal.terminal_set.n_facets == 2

    def test_mismatched_dimensions_rejected(self, demo_problem):
        raw = json.loads(dump_problem(demo_problem))
        raw["A_nom"][1] = [[0.0, 0.0], [0.0, 0.0]]  # 2x2 in a 3-state system
        with pytest.raises(ProblemValidationError) as exc:
            loads_problem(json.dumps(raw))
        assert any(v.code == "a_nom_shape" for v in exc.value.violations)

    def test_parse_error_reports_location(self):
        with pytest.raises(ProblemFormatError, match="line"):
            loads_problem('{"nx": 1,\n  "nu": }')

    def test_missing_field_named(self):
        with pytest.raises(ProblemFormatError, match="sigma_w"):
            loads_problem(json.dumps({
                "nx": 1, "nu": 1, "na": 0, "nb": 0,
                "A_nom": [[[1.0]]], "B_nom": [[[1.0]]], "vertices": [],
            }))

    def test_validation_failure_aggregates(self, demo_problem):
        raw = json.loads(dump_problem(demo_problem))
        raw["T"] = 2
        raw["sigma_w"] = -0.5
        with pytest.raises(ProblemValidationError) as exc:
            loads_problem(json.dumps(raw))
        codes = {v.code for v in exc.value.violations}
        assert {"horizon_too_short", "sigma_w_negative"} <= codes

    def test_random_round_trips(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            na, nb = int(rng.integers(0, 3)), int(rng.integers(0, 3))
            nx, nu = int(rng.integers(1, 4)), int(rng.integers(1, 3))
            system = TimeDelaySystem(
                nx=nx, nu=nu, na=na, nb=nb,
                a_nom=[rng.normal(size=(nx, nx)) for _ in range(na + 1)],
                b_nom=[rng.normal(size=(nx, nu)) for _ in range(nb + 1)],
                vertices=[
                    UncertaintyVertex(
                        d_a=[rng.normal(size=(nx, nx)) * 0.1 for _ in range(na + 1)],
                        d_b=[rng.normal(size=(nx, nu)) * 0.1 for _ in range(nb + 1)],
                    )
                    for _ in range(int(rng.integers(1, 4)))
                ],
                sigma_w=float(rng.uniform(0, 0.2)),
            )
            problem = OcpProblem(
                system=system,
                horizon_T=int(rng.integers(max(na, nb) + 1, max(na, nb) + 5)),
                x_set=PolytopeSet.box(rng.uniform(1, 5, nx)),
                u_set=PolytopeSet.box(rng.uniform(1, 5, nu)),
                q_weight=np.eye(nx), r_weight=np.eye(nu), qt_weight=2 * np.eye(nx),
                x_hist=[rng.normal(size=nx) for _ in range(na + 1)],
                u_hist=[rng.normal(size=nu) for _ in range(nb)],
            )
            text = dump_problem(problem)
            again = loads_problem(text)
            assert dump_problem(again) == text
            np.testing.assert_array_equal(again.x0, problem.x0)

    def test_x_set_override_hook(self, demo_problem):
        tight = PolytopeSet.box([0.5, 0.5, 0.5])
        problem = OcpProblem(
            system=demo_problem.system, horizon_T=6, x_set=demo_problem.x_set,
            u_set=demo_problem.u_set, q_weight=np.eye(3), r_weight=[[0.01]],
            qt_weight=100 * np.eye(3), x_hist=demo_problem.x_hist, u_hist=[],
            x_set_overrides={2: tight},
        )
        assert problem.x_set_at(2) is tight
        assert problem.x_set_at(1) is problem.x_set
        assert validate(problem) == []
