import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relgrid import estimate as est
from relgrid.errors import (AllOneClass, DegenerateCovariate, DivergentTrajectories, InputError,
                            Separation)


def test_tsfr_bus():
    assert est.tsfr("bus") == pytest.approx(4.93e-6, rel=1e-3)
    life = 10 ** (6328.80 / (273 + 102) - 11.269)
    assert est.tsfr("bus") == pytest.approx(2.0 / life, rel=1e-14)


def test_tsfr_line():
    assert est.tsfr("line") == pytest.approx(1.14e-5, rel=2e-3)
    assert est.tsfr("line") == 0.05 / (365 * 12)


def test_tsfr_kind():
    with pytest.raises(InputError):
        est.tsfr("transformer")


@pytest.mark.parametrize("kind", ["bus", "line"])
def test_step_probability_small_rate(kind):
    r = est.tsfr(kind)
    assert abs(est.step_failure_probability(r) - r) / r <= 1e-5


def _ten_above(n_low=90, rng=None):
    rng = rng or np.random.default_rng(0)
    low = rng.normal(size=(n_low, 2))
    high = np.full((10, 2), 10.0)
    x = np.vstack([low[:40], high[:5], low[40:], high[5:]])
    return x


def test_labels_ten_above():
    x = _ten_above()
    d = est.label_failures(x)
    assert d.n_above == 10
    above = (x > np.array(d.thresholds)).all(axis=1)
    assert int(d.y[above].sum()) == 7
    assert int(d.y[~above].sum()) == 0
    # scan order: the first seven high rows in file order
    assert list(np.flatnonzero(d.y)) == list(np.flatnonzero(above)[:7])


def test_labels_thresholds_use_sample_sd():
    x = _ten_above()
    d = est.label_failures(x)
    np.testing.assert_allclose(d.thresholds, x.mean(axis=0) + x.std(axis=0, ddof=1))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 150), st.integers(0, 10_000))
def test_label_counts_floor(s, seed):
    rng = np.random.default_rng(seed)
    n_low = 20 * s + 50
    low = rng.uniform(-1, 0, size=(n_low, 2))
    high = rng.uniform(50, 60, size=(s, 2))
    x = rng.permutation(np.vstack([low, high]))
    d = est.label_failures(x)
    assert d.n_above == s
    above = (x > np.array(d.thresholds)).all(axis=1)
    assert int(d.y[above].sum()) == (s * 72) // 100
    assert int(d.y[~above].sum()) == (s * 8) // 100
    assert set(np.unique(d.y)) <= {0.0, 1.0}


def test_label_random_order_seeded():
    x = np.random.default_rng(1).normal(size=(500, 2))
    a = est.label_failures(x, seed=3, order="random")
    b = est.label_failures(x, seed=3, order="random")
    np.testing.assert_array_equal(a.y, b.y)
    assert a.n_fail == est.label_failures(x).n_fail


def test_labels_degenerate():
    with pytest.raises(DegenerateCovariate):
        est.label_failures(np.ones((20, 2)))
    with pytest.raises(InputError):
        est.label_failures(np.ones((1, 2)))
    with pytest.raises(InputError):
        est.label_failures(np.ones((5, 3)))


def _dataset(n, s):
    y = np.zeros(n)
    y[:s] = 1
    return est.LabeledDataset(np.zeros((n, 2)), y)


def test_weights_matched_prevalence():
    d = _dataset(200, 30)
    w = est.bootstrap_weights(d, 30 / 200)
    np.testing.assert_allclose(w, 1.0, rtol=1e-14)


def test_weights_example():
    d = _dataset(1464, 100)
    w = est.bootstrap_weights(d, 4.93e-6)
    assert w[0] == pytest.approx(4.93e-6 / (100 / 1464), rel=1e-14)
    assert w[-1] == pytest.approx((1 - 4.93e-6) / (1364 / 1464), rel=1e-14)
    assert w.sum() == pytest.approx(1464, rel=1e-12)
    # expected failure share of the resampling distribution
    assert (w @ d.y) / w.sum() == pytest.approx(4.93e-6, rel=1e-12)


def test_weights_one_class():
    with pytest.raises(AllOneClass):
        est.bootstrap_weights(_dataset(10, 0), 0.1)
    with pytest.raises(AllOneClass):
        est.bootstrap_weights(_dataset(10, 10), 0.1)
    with pytest.raises(InputError):
        est.bootstrap_weights(_dataset(10, 3), 0.0)


def test_resample_prevalence_lln():
    d = _dataset(1464, 100)
    target = 0.02
    counts = est.resample_counts(est.bootstrap_weights(d, target), 1_000_000, np.random.default_rng(9))
    assert counts.sum() == 1_000_000
    prev = (counts @ d.y) / counts.sum()
    assert abs(prev - target) / target <= 0.05


def _synthetic(n, beta, rng):
    X = np.column_stack([np.ones(n), rng.uniform(0, 10, n), rng.uniform(0, 40, n)])
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    return X, y


def test_mle_recovers_truth():
    truth = np.array([-12.0, 0.3, 0.3])
    X, y = _synthetic(1_000_000, truth, np.random.default_rng(21))
    r = est.fit_mle(X, y)
    assert r.grad_norm <= 1e-8
    assert np.all(np.abs(r.beta - truth) <= 3 * r.se)


def test_mle_counts_equal_expansion():
    rng = np.random.default_rng(2)
    X, y = _synthetic(300, np.array([-3.0, 0.2, 0.05]), rng)
    counts = rng.integers(0, 4, 300).astype(float)
    a = est.fit_mle(X, y, counts)
    rep = np.repeat(np.arange(300), counts.astype(int))
    b = est.fit_mle(X[rep], y[rep])
    np.testing.assert_allclose(a.beta, b.beta, rtol=1e-9)
    np.testing.assert_allclose(a.se, b.se, rtol=1e-9)


def test_mle_intercept_only():
    y = np.zeros(1000)
    y[:37] = 1
    r = est.fit_mle(np.ones((1000, 1)), y)
    assert r.beta[0] == pytest.approx(math.log(0.037 / 0.963), abs=1e-12)


def test_mle_one_class():
    with pytest.raises(Separation):
        est.fit_mle(np.column_stack([np.ones(50), np.arange(50.0)]), np.zeros(50))


def test_mle_separable():
    x = np.arange(40.0)
    with pytest.raises(Separation):
        est.fit_mle(np.column_stack([np.ones(40), x]), (x > 19.5).astype(float))


@pytest.mark.parametrize("kw", [dict(burn_in=10, total_iters=10), dict(target_accept=1.0),
                                dict(target_accept=0.0), dict(step_jitter=1.0), dict(leapfrog_steps=0)])
def test_hmc_config_validation(kw):
    with pytest.raises(InputError):
        est.HmcConfig(**kw)


def test_hmc_prior_recovery():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 2))])
    y = (rng.random(50) < 0.3).astype(float)
    mu = np.array([-12.0, 0.3, 0.3])
    cfg = est.HmcConfig(total_iters=55_000, burn_in=5_000, seed=1)
    r = est.hmc_posterior(X, y, np.zeros(50), mu, cfg)
    assert np.all(np.abs(r.mean - mu) <= 0.1 * cfg.prior_sd)
    np.testing.assert_allclose(r.sd, cfg.prior_sd, rtol=0.1)


def test_hmc_gaussian_moments_with_dense_mass():
    # zero likelihood weights leave an isotropic Gaussian target; a correlated
    # mass matrix exercises the whitening transform
    X = np.column_stack([np.ones(5), np.arange(5.0)])
    mu = np.array([1.0, -2.0])
    mass = np.array([[2.0, 0.9], [0.9, 1.0]])
    cfg = est.HmcConfig(total_iters=44_000, burn_in=4_000, prior_sd=2.0, mass=mass, seed=5, leapfrog_steps=10)
    r = est.hmc_posterior(X, np.zeros(5), np.zeros(5), mu, cfg)
    s = r.samples
    assert np.all(np.abs(r.mean - mu) <= 3 * r.mcse)
    dev = s - mu
    sq = est._batch_mcse(dev**2)
    assert np.all(np.abs((dev**2).mean(axis=0) - 4.0) <= 3 * sq)
    cross = dev[:, 0] * dev[:, 1]
    assert abs(cross.mean()) <= 3 * est._batch_mcse(cross[:, None])[0]
    assert 0.55 <= r.accept_rate <= 0.75


def test_hmc_round_trip_with_mle_mass():
    truth = np.array([-4.0, 0.3, 0.05])
    X, y = _synthetic(2_000, truth, np.random.default_rng(8))
    mle = est.fit_mle(X, y)
    cfg = est.HmcConfig(total_iters=12_000, burn_in=2_000, mass=mle.information, seed=2)
    r = est.hmc_posterior(X, y, np.ones(y.size), mle.beta, cfg)
    assert np.all(np.abs(r.mean - truth) <= 3 * r.sd)
    assert 0.55 <= r.accept_rate <= 0.75
    assert r.lam_hat == pytest.approx(math.exp(-r.mean[0]))


def test_hmc_reproducible():
    X, y = _synthetic(500, np.array([-2.0, 0.2, 0.02]), np.random.default_rng(1))
    cfg = est.HmcConfig(total_iters=600, burn_in=100, seed=7)
    a = est.hmc_posterior(X, y, np.ones(500), np.zeros(3), cfg)
    b = est.hmc_posterior(X, y, np.ones(500), np.zeros(3), cfg)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert a.step_size == b.step_size


def test_hmc_divergence_reported():
    X, y = _synthetic(2000, np.array([-2.0, 0.2, 0.02]), np.random.default_rng(1))
    cfg = est.HmcConfig(total_iters=50, burn_in=0, init_step=50.0, step_jitter=0.0, seed=0)
    with pytest.raises(DivergentTrajectories) as ei:
        est.hmc_posterior(X, y, np.ones(2000), np.zeros(3), cfg)
    assert ei.value.diagnostics["divergent"] > 5


def test_hmc_bad_mass():
    with pytest.raises(InputError):
        est.hmc_posterior(np.ones((3, 2)), np.zeros(3), np.zeros(3), np.zeros(2),
                          est.HmcConfig(total_iters=10, burn_in=1, mass=np.array([[1.0, 2.0], [2.0, 1.0]])))


def _component_series(rng, n=1464):
    cov = rng.gamma(2.0, 0.3, n)
    temps = 20 + 8 * rng.random(n)
    return cov, temps


def test_component_pipeline():
    cov, temps = _component_series(np.random.default_rng(3))
    cfg = est.EstimateConfig(n_boot=10_000_000, hmc=est.HmcConfig(total_iters=3_000, burn_in=1_000))
    r = est.estimate_component(cov, temps, "line", 4, cfg, np.random.SeedSequence(1))
    assert r.error is None
    assert r.n_rows == 1464
    s = est.label_failures(np.column_stack([cov, temps])).n_above
    assert r.n_fail == (s * 72) // 100 + (s * 8) // 100
    assert r.target_pr == est.tsfr("line")
    assert math.isfinite(r.lam) and r.lam > 0
    assert 0.55 <= r.accept_rate <= 0.75


def test_small_bootstrap_falls_back():
    cov, temps = _component_series(np.random.default_rng(3))
    cfg = est.EstimateConfig(n_boot=1_000, hmc=est.HmcConfig(total_iters=200, burn_in=50))
    res = est._job((cov, temps, "bus", 2, cfg, np.random.SeedSequence(0)))
    assert res.error and res.error.startswith("Separation")
    assert res.beta_post[1:] == [0.0, 0.0]
    assert res.lam == pytest.approx(1 / est.step_failure_probability(est.tsfr("bus")) - 1, rel=1e-9)
    strict = est.EstimateConfig(n_boot=1_000, fallback=False, hmc=cfg.hmc)
    with pytest.raises(Separation):
        est._job((cov, temps, "bus", 2, strict, np.random.SeedSequence(0)))


def test_estimate_model_assembles():
    rng = np.random.default_rng(5)
    n, rows = 3, 400
    bus = rng.gamma(2.0, 0.3, (rows, n))
    line = rng.gamma(2.0, 0.3, (rows, n))
    temps = 20 + 8 * rng.random(rows)
    cfg = est.EstimateConfig(n_boot=1_000, hmc=est.HmcConfig(total_iters=200, burn_in=50))
    model, results = est.estimate_model(bus, line, temps, cfg)
    assert len(results) == 2 * n - 1
    assert [(r.kind, r.component) for r in results] == [("bus", 0), ("bus", 1), ("bus", 2), ("line", 1), ("line", 2)]
    for r in results:
        lam = model.lam_b[r.component] if r.kind == "bus" else model.lam_l[r.component]
        assert lam == pytest.approx(math.exp(-r.beta_post[0]))
    again, _ = est.estimate_model(bus, line, temps, cfg)
    np.testing.assert_array_equal(model.lam_b, again.lam_b)
    with pytest.raises(InputError):
        est.estimate_model(bus, line[:-1], temps, cfg)
