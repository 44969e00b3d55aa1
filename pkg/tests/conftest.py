import numpy as np
import pytest

from relgrid import opf, reliability as rl
from relgrid.cli import data_path
from relgrid.grid import build_network, case_from_dict, load_case
from relgrid.scenario import build_scenario, load_scenario
from relgrid.solve import solve_misocp


@pytest.fixture(scope="session")
def case33():
    net, ders = load_case(data_path("case33.json"))
    sc = load_scenario(data_path("scenario33.json"), net)
    model = rl.load_coeffs(data_path("coeffs33.csv"), net)
    weights = rl.EensWeights.from_mapping(net.n_bus, sc.shed_weights)
    return net, ders, sc, model, weights


@pytest.fixture(scope="session")
def cm33(case33):
    net, ders, sc, _, _ = case33
    prog = opf.build_cm(net, sc, ders)
    res = solve_misocp(prog)
    assert res.ok
    return prog, res, opf.extract_solution(prog, res.x)


def chain_records(n, r=0.01, x=0.01, load=0.05, s_max=5.0):
    """Buses 0..n-1 in a line; loads on every non-root bus."""
    buses = [{"id": 0, "vsq_min": 1.0, "vsq_max": 1.0}]
    buses += [{"id": i, "p_load_mw": load, "q_load_mvar": 0.5 * load} for i in range(1, n)]
    lines = [{"id": i, "from": i - 1, "to": i, "r": r, "x": x, "s_max": s_max} for i in range(1, n)]
    return buses, lines


def toy_case(n=2, ders=None, **kw):
    buses, lines = chain_records(n, **kw)
    return case_from_dict({"buses": buses, "lines": lines, "ders": ders or {}, "power_base_mva": 1.0})


def toy_scenario(net, T=1, temp=20.0, prices=None, weights=None):
    return build_scenario(net, np.ones(T), np.full(T, temp), prices or {"substation": 50.0}, weights or {})


@pytest.fixture
def chain():
    return build_network(*chain_records(4))
