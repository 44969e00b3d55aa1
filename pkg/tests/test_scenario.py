import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relgrid.cli import data_path
from relgrid.errors import DimensionMismatch, EmptyProfile, InputError, NonPositiveMax, TemperatureOutOfRange
from relgrid.scenario import build_scenario, derating, load_scenario, read_series_csv, scale_loads


def test_scale_examples():
    np.testing.assert_allclose(scale_loads(0.1, [5000, 10000]), [0.05, 0.1])
    np.testing.assert_allclose(scale_loads(0.1, [7, 7, 7]), [0.1, 0.1, 0.1])


def test_scale_errors():
    with pytest.raises(EmptyProfile):
        scale_loads(0.1, [])
    with pytest.raises(NonPositiveMax):
        scale_loads(0.1, [0, 0])


def test_bundled_peak_equals_base(case33):
    net, _, sc, _, _ = case33
    base = np.array([b.base_load_p for b in net.buses])
    prof = read_series_csv(data_path("nyc_load.csv"))
    peak = int(np.argmax(prof))
    np.testing.assert_allclose(sc.load_p[:, peak], base)
    assert sc.load_p.shape == (33, 12)
    assert (sc.load_p <= base[:, None] + 1e-15).all()


def test_derating_values():
    d = derating(0.0)
    assert d.line_factor[0] == pytest.approx(1.1945)
    assert d.dg_factor[0] == pytest.approx(1.1160)
    assert d.bess_factor[0] == pytest.approx(0.6075)
    d = derating(21.5)
    assert d.line_factor[0] == pytest.approx(1.02895)
    # -0.016*21.5**2 + 1.97*21.5 + 60.75 = 95.709
    assert d.bess_factor[0] == pytest.approx(0.95709)


def test_derating_range():
    with pytest.raises(TemperatureOutOfRange):
        derating(75.0)
    with pytest.raises(TemperatureOutOfRange):
        derating(float("nan"))
    derating(75.0, temp_range=(-40, 80))


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 59.9), st.floats(0.01, 5))
def test_derating_monotone(t, dt):
    t2 = min(t + dt, 60.0)
    a, b = derating(t), derating(t2)
    if t2 > t:
        assert b.line_factor[0] < a.line_factor[0]
        assert b.dg_factor[0] < a.dg_factor[0]
        assert b.bess_factor[0] > a.bess_factor[0]


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.floats(0.001, 10), min_size=2, max_size=6),
    st.lists(st.floats(0.1, 1e4), min_size=1, max_size=12),
)
def test_scale_preserves_ratios(base, profile):
    out = scale_loads(base, profile)
    for t in range(out.shape[1]):
        np.testing.assert_allclose(out[:, t] / out[0, t], np.array(base) / base[0], rtol=1e-12)


def test_temperature_length_mismatch(case33, tmp_path):
    net = case33[0]
    with pytest.raises(DimensionMismatch):
        build_scenario(net, np.ones(12), np.ones(11) * 20, {"substation": 50})
    with open(data_path("scenario33.json")) as fh:
        doc = json.load(fh)
    doc["load_csv"] = data_path("nyc_load.csv")
    doc["temperature"] = [20.0] * 11
    doc.pop("temperature_csv", None)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(DimensionMismatch):
        load_scenario(p, net)


def test_bundled_prices_and_weights(case33):
    sc = case33[2]
    assert sc.horizon == 12 and sc.step_hours == 2.0
    np.testing.assert_allclose(sc.price_substation, 50.0)
    assert sc.der_prices["bess_charge"][0] == -15.0
    assert sc.shed_weights["load"] == 1e5


def test_weight_validation(case33):
    net = case33[0]
    with pytest.raises(InputError):
        build_scenario(net, np.ones(2), [20, 20], {}, {"nonsense": 1.0})
    with pytest.raises(InputError):
        build_scenario(net, np.ones(2), [20, 20], {}, {"load": -1.0})


def test_with_prices_scales(case33):
    sc = case33[2]
    s2 = sc.with_prices(2.0)
    np.testing.assert_allclose(s2.price_substation, 2 * sc.price_substation)
    for k in sc.der_prices:
        np.testing.assert_allclose(s2.der_prices[k], 2 * sc.der_prices[k])
