import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relgrid import opf, reliability as rl, scp
from relgrid.errors import AlreadyReformulated, InputError, IterationLimit


@pytest.fixture(scope="module")
def crm33(case33, cm33):
    net, ders, sc, model, w = case33
    prog, res, _ = cm33
    return scp.solve_crm(net, sc, ders, model, w, cm=(prog, res))


def test_regularization_weight_first_iteration():
    assert scp.regularization_weight(1) == pytest.approx(1e5 / 0.85**6, rel=1e-15)
    assert scp.regularization_weight(1) == pytest.approx(265146.834, rel=1e-9)


@given(st.integers(1, 200))
def test_regularization_geometric(k):
    assert scp.regularization_weight(k + 1) / scp.regularization_weight(k) == pytest.approx(1 / 0.85, rel=1e-12)


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.integers(1, 50))
def test_regularization_zero_at_center(v, k):
    assert scp.regularization_term(k, v, v) == 0.0
    shifted = np.asarray(v) + 1.0
    assert scp.regularization_term(k, shifted, v) == pytest.approx(scp.regularization_weight(k) * len(v))


def test_regularization_rejects_k0():
    with pytest.raises(InputError):
        scp.regularization_weight(0)


@pytest.mark.parametrize("kw", [dict(eps1=0), dict(eps3=-1), dict(reg_decay=1.0), dict(k_max=0)])
def test_options_validation(kw):
    with pytest.raises(InputError):
        scp.ScpOptions(**kw)


def test_epigraph_structure(case33, cm33):
    net, _, sc, _, _ = case33
    prog = scp.epigraph_reformulate(cm33[0].copy(), sc)
    n, T = net.n_bus, sc.horizon
    assert prog.n == cm33[0].n + n * T
    assert sum(t.startswith("epi_") for t in prog.le_tags()) == 2 * n * T
    with pytest.raises(AlreadyReformulated):
        scp.epigraph_reformulate(prog, sc)


def test_epigraph_tight_at_optimum(case33, crm33):
    _, _, sc, _, _ = case33
    sol = crm33.solution
    gap = sol.p_tilde - np.abs(sol.net_injection(sc.load_p))
    assert gap.min() >= -1e-6
    assert gap.max() <= 1e-6


def test_zeroth_order_consistency(case33):
    net, ders, sc, model, w = case33
    rng = np.random.default_rng(11)
    for _ in range(25):
        pt = scp.random_point(net, ders, sc, rng)
        lin = scp.linearize_eens(pt, w, model, net, sc.ambient_temp)
        exact = rl.eens_cost(pt, w, model, net, sc.ambient_temp)
        assert np.abs(lin.evaluate(pt) - exact).max() <= 1e-10


def test_linear_objective_matches_evaluate(case33, cm33):
    net, ders, sc, model, w = case33
    prog = scp.epigraph_reformulate(cm33[0].copy(), sc)
    pt = scp.random_point(net, ders, sc, np.random.default_rng(2))
    lin = scp.linearize_eens(pt, w, model, net, sc.ambient_temp)
    sol = opf.extract_solution(prog, np.zeros(prog.n))
    for k in ("p0", "p_tilde", "l", "p_dg", "p_bc", "p_bd", "p_dr"):
        sol.arrays[k] = np.asarray(getattr(pt, k), dtype=float).copy()
    x = opf.solution_vector(prog, sol)
    e = lin.objective(prog)
    # variables the program does not declare (no DER at a bus) carry no term
    masked = rl.EensPoint(*(np.where(prog.meta["idx"][k] >= 0, getattr(pt, k), 0.0) if k != "load_p" else pt.load_p
                            for k in ("p0", "p_tilde", "l", "load_p", "p_dg", "p_bc", "p_bd", "p_dr")))
    assert e.value(x) == pytest.approx(lin.evaluate(masked).sum(), rel=1e-12)


def test_single_bus_slope():
    from relgrid.grid import build_network

    net = build_network([{"id": 0}, {"id": 1}], [{"from": 0, "to": 1, "r": 0.1, "x": 0.1}])
    m = rl.FailureModel(np.array([1.0, 3.0]), np.array([0.0, 0.9]), np.array([0.0, 0.01]),
                        np.array([1.0, 1e300]), np.zeros(2), np.zeros(2))
    w = rl.EensWeights.uniform(2, load=4.0)
    z = np.zeros((2, 1))
    pt = rl.EensPoint(np.ones(1), np.array([[0.0], [0.6]]), z, np.array([[0.0], [1.0]]), z, z, z, z)
    lin = scp.linearize_eens(pt, w, m, net, [25.0])
    pr = rl.interval_unreliability_bus(m, 1, 0.6, 25.0)
    assert lin.grad["p_tilde"][1, 0] == pytest.approx(4.0 * pr * (1 - pr) * 0.9, rel=1e-12)


def test_linearization_route_equivalence(case33):
    net, ders, sc, model, w = case33
    lin_gap, zero_gap = scp.linearization_probe(net, ders, sc, model, w, n_points=100, seed=0)
    assert lin_gap <= 1e-9
    assert zero_gap <= 1e-10


def test_zero_weights_reduce_to_cost_model(case33, cm33):
    net, ders, sc, model, w = case33
    prog, res, _ = cm33
    out = scp.solve_crm(net, sc, ders, model, w.scaled(0.0), cm=(prog, res))
    assert out.trace.reason == "criterion2"
    assert len(out.trace.rows) == 2
    crm = out.trace.rows[-1].obj_crm
    assert abs(crm - out.obj_cm) <= 1e-6 * abs(out.obj_cm)


def test_trace_shape(crm33):
    tr = crm33.trace
    assert tr.reason in ("criterion1", "criterion2", "criterion3")
    assert len(tr.rows) <= scp.ScpOptions().k_max + 1
    assert tr.rows[0].k == 0 and tr.rows[0].obj_crm == tr.rows[0].obj_cm == crm33.obj_cm
    assert [r.k for r in tr.rows] == list(range(len(tr.rows)))
    # the first iterate only has the deviation metric
    assert tr.rows[1].metric1 is None and tr.rows[1].metric3 is None


def test_true_objective_recomputed(case33, crm33):
    net, _, sc, model, w = case33
    op, ee, total = scp.true_objective(crm33.solution, sc, w, model, net)
    assert total == pytest.approx(crm33.trace.rows[-1].obj_crm, rel=1e-12)
    assert op + ee == total


def test_crm_costs_at_least_cm(crm33):
    last = crm33.trace.rows[-1]
    assert last.obj_cm >= crm33.obj_cm - 1e-6 * abs(crm33.obj_cm)


def test_appx_gap_shrinks_over_tail(crm33):
    gaps = [r.appx_gap for r in crm33.trace.rows[1:]][-10:]
    assert all(b <= a for a, b in zip(gaps, gaps[1:])), gaps


def test_trace_csv_round_trip(tmp_path, crm33):
    p = tmp_path / "trace.csv"
    crm33.trace.write_csv(p)
    back = scp.ScpTrace.read_csv(p)
    assert len(back.rows) == len(crm33.trace.rows)
    for a, b in zip(crm33.trace.rows, back.rows):
        assert a.k == b.k and a.obj_crm == b.obj_crm and a.obj_crm_appx == b.obj_crm_appx
        assert a.metric1 == b.metric1 and a.metric2 == b.metric2 and a.metric3 == b.metric3
    header = p.read_text().splitlines()[0].split(",")
    assert header[:7] == ["iteration", "CRM", "CRM-APPX", "eps1", "eps2", "eps3", "seconds"]


def test_iteration_limit_returns_best(case33, cm33):
    net, ders, sc, model, w = case33
    opts = scp.ScpOptions(eps1=1e-300, eps2=1e-300, eps3=1e-300, k_max=1)
    with pytest.raises(IterationLimit) as ei:
        scp.solve_crm(net, sc, ders, model, w, options=opts, cm=cm33[:2])
    err = ei.value
    assert err.trace.reason == "iteration_limit"
    assert len(err.trace.rows) == 2
    assert err.solution is not None


def test_binaries_fixed_to_cm(cm33, crm33):
    cm = crm33.cm_solution
    for b in opf.BINARY_FIELDS:
        np.testing.assert_array_equal(crm33.solution.arrays[b], cm.arrays[b])


def test_deterministic(case33, cm33, crm33):
    net, ders, sc, model, w = case33
    again = scp.solve_crm(net, sc, ders, model, w, cm=cm33[:2])
    assert [r.obj_crm for r in again.trace.rows] == [r.obj_crm for r in crm33.trace.rows]
