import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relgrid.conic import ConicProgram
from relgrid.errors import Infeasible
from relgrid.grid import case_from_dict
from relgrid.opf import build_cm, extract_solution, feasibility_report
from relgrid.scenario import build_scenario
from relgrid.solve import BnbOptions, SolverOptions, solve_continuous, solve_misocp

from conftest import toy_case


def test_bound():
    p = ConicProgram()
    x = p.add_var("x", lb=3.0)
    p.add_objective(x)
    r = solve_continuous(p)
    assert r.ok and r.x[0] == pytest.approx(3.0, abs=1e-7)


@pytest.mark.parametrize("backend", ["clarabel", "cvxopt"])
def test_cone_geometry(backend):
    p = ConicProgram()
    x, y, z = p.add_var("x"), p.add_var("y"), p.add_var("z", ub=5.0)
    p.add_soc(z, [x, y])
    p.add_objective(-1.0 * (x + y))
    r = solve_continuous(p, options=SolverOptions(backend=backend))
    assert r.ok
    np.testing.assert_allclose(r.x[:2], 5 / math.sqrt(2), atol=1e-6)


@pytest.mark.parametrize("backend", ["clarabel", "cvxopt"])
def test_rotated_cone_and_proximal(backend):
    p = ConicProgram()
    a, b, x = p.add_var("a", lb=0), p.add_var("b", lb=0, ub=2.0), p.add_var("x", lb=1.0)
    p.add_rsoc(a, b, [x])
    p.add_objective(a)
    p.add_proximal([1], [2.0], 10.0)
    r = solve_continuous(p, options=SolverOptions(backend=backend))
    assert r.ok
    assert r.x[0] == pytest.approx(0.5, abs=1e-5)
    assert r.x[1] == pytest.approx(2.0, abs=1e-5)


def test_infeasible_detected():
    p = ConicProgram()
    x = p.add_var("x", lb=0.0, ub=1.0)
    p.add_ge(x, 2.0)
    p.add_objective(x)
    assert solve_continuous(p).status == "Infeasible"
    p.add_var("u", binary=True)
    with pytest.raises(Infeasible):
        solve_misocp(p)


def test_no_binaries_matches_continuous(cm33):
    prog = build_cm(*_two_bus_no_der())
    a = solve_misocp(prog)
    b = solve_continuous(prog)
    assert a.objective == pytest.approx(b.objective, rel=1e-12)


def _two_bus_no_der():
    net, ders = toy_case(2)
    sc = build_scenario(net, [1.0], [20.0], {"substation": 50.0})
    return net, sc, ders


def test_bess_toy_negative_charge_price():
    bess = {"bess": [{"bus": 1, "p_min": 0.0, "p_max": 0.2, "soc_min": 0.0, "soc_max": 1.0, "soc_init": 0.0}]}
    net, ders = toy_case(2, ders=bess)
    sc = build_scenario(net, [1.0], [20.0], {"substation": 0.0, "bess_charge": -15.0})
    prog = build_cm(net, sc, ders)
    res = solve_misocp(prog)
    sol = extract_solution(prog, res.x)
    cap = 0.2 * sc.derating.bess_factor[0]  # a full charge from empty in one step
    assert sol.u_bess[1, 0] == 1.0
    assert sol.p_bc[1, 0] == pytest.approx(min(0.2, cap), abs=1e-6)


def _knapsack(values, weights, cap):
    p = ConicProgram()
    xs = [p.add_var(f"x{i}", binary=True) for i in range(len(values))]
    s = p.add_var("s", lb=0.0)
    load = sum((w * x for w, x in zip(weights, xs)), start=0.0)
    p.add_le(load, cap)
    # a cone so the relaxation is a genuine SOCP
    p.add_soc(s, [load - cap / 2])
    p.add_objective(sum((-v * x for v, x in zip(values, xs)), start=0.0) + 0.1 * s)
    return p


def _enumerate(p, bins):
    best = math.inf
    for pattern in itertools.product([0.0, 1.0], repeat=len(bins)):
        lb = np.asarray(p.lb, dtype=float).copy()
        ub = np.asarray(p.ub, dtype=float).copy()
        lb[bins] = ub[bins] = pattern
        r = solve_continuous(p, lb, ub)
        if r.ok:
            best = min(best, r.objective)
    return best


@settings(max_examples=15, deadline=None)
@given(
    st.lists(st.floats(0.5, 5.0), min_size=4, max_size=6),
    st.lists(st.floats(0.5, 3.0), min_size=6, max_size=6),
    st.floats(2.0, 6.0),
)
def test_bnb_matches_enumeration_knapsack(values, weights, cap):
    p = _knapsack(values, weights[: len(values)], cap)
    res = solve_misocp(p)
    assert res.objective == pytest.approx(_enumerate(p, list(p.binary)), abs=1e-6)
    relax = solve_continuous(p)
    assert relax.objective <= res.objective + 1e-7


def test_bnb_deterministic():
    p = _knapsack([3.0, 2.0, 4.0, 2.5, 1.5], [1.3, 2.1, 2.7, 0.9, 1.6], 4.2)
    a, b = solve_misocp(p), solve_misocp(p)
    np.testing.assert_array_equal(a.x, b.x)
    assert a.info["nodes"] == b.info["nodes"]


def test_bnb_reduced_case_matches_enumeration():
    import json

    from relgrid.cli import data_path

    with open(data_path("case33.json")) as fh:
        doc = json.load(fh)
    doc["ders"]["bess"] = doc["ders"]["bess"][:2]
    doc["ders"]["dr"] = []
    net, ders = case_from_dict(doc)
    prof = [6193.28, 7200.0, 7700.0, 5300.0]
    sc = build_scenario(net, prof, [21.5, 24.0, 27.0, 23.0],
                        {"substation": 50.0, "dg": 8.0, "bess_charge": -15.0, "bess_discharge": 28.0})
    prog = build_cm(net, sc, ders)
    assert len(prog.binary) == 8
    res = solve_misocp(prog)
    assert feasibility_report(extract_solution(prog, res.x), net, sc, ders, tol=1e-6) == []
    assert res.objective == pytest.approx(_enumerate(prog, list(prog.binary)), abs=1e-6)


def test_node_limit_uses_incumbent():
    p = _knapsack([3.0, 2.0, 4.0, 2.5, 1.5], [1.3, 2.1, 2.7, 0.9, 1.6], 4.2)
    r = solve_misocp(p, BnbOptions(node_limit=1))
    assert r.ok
    assert r.objective >= solve_misocp(p).objective - 1e-9


def test_dump(tmp_path):
    p = _knapsack([1.0, 2.0], [1.0, 1.0], 1.5)
    p.add_proximal([2], [0.5], 3.0)
    out = tmp_path / "prog.txt"
    p.dump(out)
    text = out.read_text()
    for sec in ("VARS 3", "OBJ", "QUAD 1", "EQ 0", "LE 1", "CONES 1", "CONST"):
        assert sec in text
