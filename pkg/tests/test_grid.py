import json

import pytest
from hypothesis import given, settings, strategies as st

from relgrid.cli import data_path
from relgrid.errors import (
    CycleDetected,
    Disconnected,
    DuplicateLineToBus,
    InputError,
    MissingSubstation,
    UnknownBus,
    UnknownDerBus,
)
from relgrid.grid import build_ders, build_network, case_from_dict, load_case, minimum_cut_set

from conftest import chain_records


def test_case33_shape(case33):
    net = case33[0]
    assert net.n_bus == 33
    assert len(net.lines) == 32
    assert set(net.children[2]) == {3, 22}


def test_case33_impedance_in_per_unit(case33):
    net = case33[0]
    zbase = 12.66**2 / 1.0
    assert net.line(1).r == pytest.approx(0.0922 / zbase)
    assert net.line(1).x == pytest.approx(0.0470 / zbase)


def test_two_bus_chain():
    net = build_network(*chain_records(2))
    assert net.ancestor[1] == 0
    assert minimum_cut_set(net, 1) == [1]


def test_cycle_detected():
    buses = [{"id": i} for i in range(3)]
    lines = [{"from": 0, "to": 1, "r": 0.1, "x": 0.1}, {"from": 1, "to": 2, "r": 0.1, "x": 0.1},
             {"from": 2, "to": 1, "r": 0.1, "x": 0.1}]
    with pytest.raises(CycleDetected):
        build_network(buses, lines)


@pytest.mark.parametrize("bus,path", [(1, [1]), (24, [1, 2, 22, 23, 24]), (17, list(range(1, 18)))])
def test_case33_cut_sets(case33, bus, path):
    assert minimum_cut_set(case33[0], bus) == path


def test_reversed_lines_are_oriented():
    buses, lines = chain_records(4)
    flipped = [{**ln, "from": ln["to"], "to": ln["from"]} for ln in lines]
    assert build_network(buses, flipped).canonical() == build_network(buses, lines).canonical()


def test_disconnected():
    buses = [{"id": i} for i in range(3)]
    with pytest.raises(Disconnected):
        build_network(buses, [{"from": 0, "to": 1, "r": 0.1, "x": 0.1}])


def test_missing_substation_and_unknown_bus():
    with pytest.raises(MissingSubstation):
        build_network([{"id": 1}, {"id": 2}], [{"from": 1, "to": 2, "r": 0.1, "x": 0.1}])
    with pytest.raises(UnknownBus):
        build_network([{"id": 0}, {"id": 1}], [{"from": 0, "to": 5, "r": 0.1, "x": 0.1}])


def test_declared_line_id_must_match_downstream_bus():
    buses, lines = chain_records(3)
    lines[1]["id"] = 1
    with pytest.raises(DuplicateLineToBus):
        build_network(buses, lines)
    buses, lines = chain_records(3)
    lines[1]["id"] = 7
    with pytest.raises(DuplicateLineToBus):
        build_network(buses, lines)


def test_ohm_impedance_needs_base():
    buses = [{"id": 0}, {"id": 1}]
    with pytest.raises(InputError):
        build_network(buses, [{"from": 0, "to": 1, "r_ohm": 1.0, "x_ohm": 1.0}])


def test_der_validation(case33):
    net = case33[0]
    bad = build_ders({"dg": [{"bus": 40, "p_min": 0, "p_max": 1, "q_min": 0, "q_max": 1}]})
    with pytest.raises(UnknownDerBus):
        bad.check(net)
    bad = build_ders({"bess": [{"bus": 3, "p_min": 0, "p_max": 0.2, "soc_init": 2.0}]})
    with pytest.raises(InputError):
        bad.check(net)


def test_case33_ders(case33):
    ders = case33[1]
    assert sorted(ders.dg) == [15, 16, 17, 18, 21, 23, 24, 26, 30]
    assert sorted(ders.bess) == [17, 18, 23, 24]
    assert sorted(ders.dr) == [2, 3, 5]


def test_case_roundtrip_deterministic():
    with open(data_path("case33.json")) as fh:
        doc = json.load(fh)
    a, _ = case_from_dict(doc)
    b, _ = load_case(data_path("case33.json"))
    assert a.canonical() == b.canonical()


@st.composite
def random_tree(draw):
    n = draw(st.integers(2, 40))
    parents = [draw(st.integers(0, i - 1)) for i in range(1, n)]
    perm = draw(st.permutations(list(range(1, n))))
    relabel = {0: 0, **{i + 1: perm[i] for i in range(n - 1)}}
    lines = [{"from": relabel[p], "to": relabel[i + 1], "r": 0.01, "x": 0.01} for i, p in enumerate(parents)]
    flip = draw(st.lists(st.booleans(), min_size=n - 1, max_size=n - 1))
    lines = [{**ln, "from": ln["to"], "to": ln["from"]} if f else ln for ln, f in zip(lines, flip)]
    order = draw(st.permutations(lines))
    return [{"id": i} for i in range(n)], list(order)


@settings(max_examples=60, deadline=None)
@given(random_tree())
def test_tree_invariants(tree):
    buses, lines = tree
    net = build_network(buses, lines)
    assert sum(len(c) for c in net.children.values()) == len(net.lines)
    for i in net.order[1:]:
        assert net.mcs[i] == net.mcs[net.ancestor[i]] + (i,)
        assert minimum_cut_set(net, i)[-1] == i
    again = build_network(buses, list(reversed(lines)))
    assert again.canonical() == net.canonical()
