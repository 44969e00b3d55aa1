"""Estimating the logistic failure coefficients of each component.

Pipeline per bus or line: per-step baseline failure rate from the component's
mean time to failure, synthetic failure labels on historical covariates,
importance weights that restore the baseline prevalence, a weighted bootstrap
expansion, a maximum-likelihood fit that centres the prior, and Hamiltonian
Monte Carlo on the weighted log posterior.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, log_expit

from . import kernels
from .errors import (
    AllOneClass,
    DegenerateCovariate,
    DivergentTrajectories,
    InputError,
    NoConvergence,
    Separation,
)

K1 = 6328.80
K2 = -11.269
BUS_TEMP_TOTAL = 22.0 + 65.0 + 15.0  # ambient + rise + hot-spot allowance, degC
LINE_YEARLY_RATE = 0.05


def tsfr(kind: str, step_hours: float = 2.0, temp_total: float = BUS_TEMP_TOTAL,
         yearly_rate: float = LINE_YEARLY_RATE, steps_per_day: int = 12) -> float:
    """Per-step failure rate.

    Buses use an Arrhenius-type life ``10**(K1/(273+T) + K2)`` hours, giving
    ``step_hours / life``; lines spread a yearly rate over the steps of a year.
    """
    if kind == "bus":
        return step_hours / 10.0 ** (K1 / (273.0 + temp_total) + K2)
    if kind == "line":
        return yearly_rate / (365.0 * steps_per_day)
    raise InputError(f"kind must be 'bus' or 'line', got {kind!r}")


def step_failure_probability(rate: float) -> float:
    return -math.expm1(-rate)


@dataclass
class LabeledDataset:
    x: np.ndarray  # (n, 2): component covariate, ambient temperature
    y: np.ndarray  # (n,) in {0, 1}
    component: int = 0
    kind: str = "bus"
    thresholds: tuple[float, float] = (math.nan, math.nan)
    n_above: int = 0

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def n_fail(self) -> int:
        return int(self.y.sum())

    def design(self) -> np.ndarray:
        return np.column_stack([np.ones(self.n), self.x])


def label_failures(covariates, seed=None, component=0, kind="bus",
                   fail_frac=0.8, above_share=0.9, order="scan") -> LabeledDataset:
    """Mark synthetic failures on (covariate, temperature) rows.

    Thresholds are mean plus one sample standard deviation. With ``s`` rows
    above both thresholds, ``floor(s*fail_frac*above_share)`` of them and
    ``floor(s*fail_frac*(1-above_share))`` rows below both thresholds are
    labelled failures, taking rows in file order (``order="scan"``) or in a
    seeded random order (``order="random"``).
    """
    x = np.asarray(covariates, dtype=float)
    if x.ndim != 2 or x.shape[1] != 2:
        raise InputError(f"covariates must be (n, 2), got {x.shape}")
    if x.shape[0] < 2:
        raise InputError("need at least two rows")
    mu = x.mean(axis=0)
    sd = x.std(axis=0, ddof=1)
    if not (sd > 0).all():
        raise DegenerateCovariate(f"component {component}: covariate has zero variance")
    tau = mu + sd
    above = (x > tau).all(axis=1)
    below = (x < tau).all(axis=1)
    s = int(above.sum())
    n_up = int(math.floor(s * fail_frac * above_share + 1e-9))
    n_down = int(math.floor(s * fail_frac * (1.0 - above_share) + 1e-9))
    rows = np.arange(x.shape[0])
    if order == "random":
        rows = np.random.default_rng(seed).permutation(rows)
    elif order != "scan":
        raise InputError(f"unknown order {order!r}")
    y = np.zeros(x.shape[0])
    y[rows[above[rows]][:n_up]] = 1.0
    y[rows[below[rows]][:n_down]] = 1.0
    return LabeledDataset(x, y, component, kind, (float(tau[0]), float(tau[1])), s)


def bootstrap_weights(dataset: LabeledDataset, target_pr: float) -> np.ndarray:
    """Importance weights giving failure rows total mass ``target_pr``.

    Failure rows get ``target_pr / (s/n)`` and the rest ``(1-target_pr) /
    ((n-s)/n)``; the weights sum to ``n``, so ``w / n`` is the resampling
    distribution.
    """
    n, s = dataset.n, dataset.n_fail
    if s == 0 or s == n:
        raise AllOneClass(f"component {dataset.component}: need both classes, have {s} failures of {n}")
    if not 0 < target_pr < 1:
        raise InputError("target_pr must be in (0, 1)")
    wf = target_pr / (s / n)
    wn = (1.0 - target_pr) / ((n - s) / n)
    return np.where(dataset.y > 0, wf, wn)


def resample_counts(weights, size: int, rng) -> np.ndarray:
    """Multiplicity of each row in a weighted bootstrap of ``size`` rows."""
    p = np.asarray(weights, dtype=float)
    return rng.multinomial(int(size), p / p.sum()).astype(float)


@dataclass
class MleResult:
    beta: np.ndarray
    se: np.ndarray
    iterations: int
    grad_norm: float
    loglik: float
    cov: np.ndarray  # inverse information matrix

    @property
    def information(self) -> np.ndarray:
        return np.linalg.inv(self.cov)


def fit_mle(X, y, counts=None, tol=1e-8, max_iter=200) -> MleResult:
    """Logistic regression by Newton's method (IRLS) with step halving.

    ``X`` includes the intercept column; ``counts`` are row multiplicities,
    so an expanded bootstrap sample never has to be materialized.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(y.size) if counts is None else np.asarray(counts, dtype=float)
    keep = w > 0
    X, y, w = X[keep], y[keep], w[keep]
    pos = float(w @ y)
    if pos == 0 or pos == w.sum():
        raise Separation("all labels belong to one class")
    d = X.shape[1]
    beta = np.zeros(d)
    beta[0] = math.log(pos / (w.sum() - pos))

    def loglik(b):
        eta = X @ b
        return float(w @ (y * eta + log_expit(-eta)))

    ll = loglik(beta)
    for it in range(1, max_iter + 1):
        eta = X @ beta
        p = expit(eta)
        g = X.T @ (w * (y - p))
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            break
        H = (X * (w * p * (1 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise Separation("information matrix is singular") from exc
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c = loglik(cand)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, ll_c
        if np.abs(beta).max() > 1e8 or (ll > -1e-8 and np.abs(X @ beta).min() > 30):
            raise Separation("coefficients diverge: the classes are separable")
    else:
        raise NoConvergence(f"gradient norm {gn:.3e} after {max_iter} iterations")
    eta = X @ beta
    if np.all((2.0 * y - 1.0) * eta > 0):
        # beta itself separates the classes, so the likelihood has no maximum
        raise Separation("the classes are completely separable")
    p = expit(eta)
    H = (X * (w * p * (1 - p))[:, None]).T @ X
    cov = np.linalg.inv(H)
    return MleResult(beta, np.sqrt(np.diag(cov)), it, gn, ll, cov)


@dataclass
class HmcConfig:
    total_iters: int = 100_000
    burn_in: int = 20_000
    target_accept: float = 0.65
    leapfrog_steps: int = 20
    prior_sd: float = 10.0
    mass: object = None  # None: identity; a vector (diagonal) or a (d, d) matrix
    seed: int = 0
    init_step: float | None = None
    step_jitter: float = 0.1  # each transition uses eps * U(1-j, 1+j)
    max_divergent_frac: float = 0.1
    keep_samples: bool = True

    def __post_init__(self):
        if not 0 <= self.burn_in < self.total_iters:
            raise InputError("burn_in must be below total_iters")
        if not 0 < self.target_accept < 1:
            raise InputError("target_accept must be in (0, 1)")
        if not 0 <= self.step_jitter < 1:
            raise InputError("step_jitter must be in [0, 1)")
        if self.leapfrog_steps < 1:
            raise InputError("leapfrog_steps must be positive")


@dataclass
class HmcResult:
    mean: np.ndarray
    sd: np.ndarray
    accept_rate: float
    step_size: float
    divergent: int
    samples: np.ndarray | None = None
    mcse: np.ndarray | None = None

    @property
    def lam_hat(self) -> float:
        return math.exp(-self.mean[0])


def _batch_mcse(s: np.ndarray) -> np.ndarray:
    n = s.shape[0]
    b = max(int(math.sqrt(n)), 1)
    k = n // b
    if k < 2:
        return s.std(axis=0, ddof=1) / math.sqrt(max(n, 1))
    means = s[: k * b].reshape(k, b, -1).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(k)


def _whitening(mass, d: int) -> np.ndarray:
    if mass is None:
        return np.eye(d)
    m = np.asarray(mass, dtype=float)
    if m.ndim == 1:
        m = np.diag(m)
    if m.shape != (d, d):
        raise InputError(f"mass must be ({d},) or ({d}, {d}), got {m.shape}")
    try:
        return np.linalg.cholesky(np.linalg.inv(m))
    except np.linalg.LinAlgError as exc:
        raise InputError("mass matrix must be symmetric positive definite") from exc


def hmc_posterior(X, y, weights, prior_mean, config: HmcConfig | None = None, impl=None) -> HmcResult:
    """Sample the weighted logistic posterior with a Gaussian prior.

    Step size is tuned by dual averaging toward ``target_accept`` during
    burn-in and then frozen at its averaged value; each transition jitters the
    step by ``step_jitter`` to break periodic trajectories. A diagonal mass matrix is
    handled by rescaling coordinates so the compiled leapfrog stays
    identity-mass. ``mass`` may be a diagonal vector or a dense SPD matrix; a
    good dense choice is the inverse of the information matrix at the MLE.
    """
    cfg = config or HmcConfig()
    rng = np.random.default_rng(cfg.seed)
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    w = np.ascontiguousarray(weights, dtype=float)
    mu = np.asarray(prior_mean, dtype=float)
    d = mu.size
    if not np.all(np.isfinite(mu)):
        raise InputError("prior mean must be finite")
    chol = _whitening(cfg.mass, d)
    # beta = chol @ z with chol chol^T = M^-1, so z has identity mass
    Xs = np.ascontiguousarray(X @ chol)
    mu_z = np.linalg.solve(chol, mu)
    prec = chol.T @ chol / cfg.prior_sd**2

    def lp_grad(z):
        return kernels.logpost(z, Xs, y, w, mu_z, prec, impl=impl)

    z = mu_z.copy()
    lp, g = lp_grad(z)
    L = cfg.leapfrog_steps

    def energy_step(z, lp, g, eps):
        p = rng.standard_normal(d)
        z1, p1, lp1, g1 = kernels.leapfrog(z, p, g, eps, L, Xs, y, w, mu_z, prec, impl=impl)
        h0 = -lp + 0.5 * p @ p
        h1 = -lp1 + 0.5 * p1 @ p1
        return z1, lp1, g1, h1 - h0

    eps = cfg.init_step
    if eps is None:
        # initial step: double or halve until one-step acceptance crosses 1/2
        eps = 0.1
        p = rng.standard_normal(d)
        z1, p1, lp1, _ = kernels.leapfrog(z, p, g, eps, 1, Xs, y, w, mu_z, prec, impl=impl)
        dh = (-lp1 + 0.5 * p1 @ p1) - (-lp + 0.5 * p @ p)
        direction = 1.0 if (np.isfinite(dh) and -dh > math.log(0.5)) else -1.0
        for _ in range(100):
            p = rng.standard_normal(d)
            z1, p1, lp1, _ = kernels.leapfrog(z, p, g, eps, 1, Xs, y, w, mu_z, prec, impl=impl)
            dh = (-lp1 + 0.5 * p1 @ p1) - (-lp + 0.5 * p @ p)
            ok = np.isfinite(dh) and -dh > math.log(0.5)
            if (direction > 0) != ok:
                break
            eps *= 2.0 ** direction
    log_eps_target = math.log(10.0 * eps)
    gamma, t0, kappa = 0.05, 10.0, 0.75
    h_bar = 0.0
    log_eps_bar = 0.0
    n_keep = cfg.total_iters - cfg.burn_in
    samples = np.empty((n_keep, d))
    acc_sum = 0.0
    divergent = 0
    for m in range(1, cfg.total_iters + 1):
        e = eps * (1.0 + cfg.step_jitter * (2.0 * rng.random() - 1.0)) if cfg.step_jitter else eps
        z1, lp1, g1, dh = energy_step(z, lp, g, e)
        if not np.isfinite(dh):
            alpha = 0.0
        else:
            alpha = math.exp(min(0.0, -dh))
        if m > cfg.burn_in and (not np.isfinite(dh) or dh > 1000.0):
            divergent += 1
        if rng.random() < alpha:
            z, lp, g = z1, lp1, g1
        if m <= cfg.burn_in:
            eta = 1.0 / (m + t0)
            h_bar = (1.0 - eta) * h_bar + eta * (cfg.target_accept - alpha)
            log_eps = log_eps_target - math.sqrt(m) / gamma * h_bar
            wgt = m ** (-kappa)
            log_eps_bar = wgt * log_eps + (1.0 - wgt) * log_eps_bar
            eps = math.exp(log_eps)
            if m == cfg.burn_in:
                eps = math.exp(log_eps_bar)
        else:
            samples[m - cfg.burn_in - 1] = chol @ z
            acc_sum += alpha
    acc_rate = acc_sum / n_keep
    if divergent > cfg.max_divergent_frac * n_keep:
        raise DivergentTrajectories(
            f"{divergent} of {n_keep} transitions diverged",
            {"step_size": eps, "accept_rate": acc_rate, "divergent": divergent},
        )
    return HmcResult(
        samples.mean(axis=0),
        samples.std(axis=0, ddof=1),
        acc_rate,
        eps,
        divergent,
        samples if cfg.keep_samples else None,
        _batch_mcse(samples),
    )


# -- full pipeline -----------------------------------------------------------


@dataclass
class EstimateConfig:
    n_boot: int = 10_000_000
    hmc: HmcConfig = field(default_factory=HmcConfig)
    likelihood: str = "expanded"  # or "sampling": importance weights on the labelled rows
    mass: str = "mle"  # or "identity"
    fallback: bool = True  # baseline coefficients where labels or resample have one class
    step_hours: float = 2.0
    seed: int = 0


@dataclass
class ComponentEstimate:
    component: int
    kind: str
    target_pr: float
    n_rows: int
    n_fail: int
    n_boot_fail: int
    beta_mle: list
    se_mle: list
    beta_post: list
    sd_post: list
    lam: float
    accept_rate: float
    step_size: float
    error: str | None = None  # set when the component fell back to the baseline


def baseline_estimate(kind, component, config: EstimateConfig, exc: Exception, n_rows=0) -> ComponentEstimate:
    """Intercept-only coefficients reproducing the baseline rate, for components the data cannot inform."""
    target = step_failure_probability(tsfr(kind, config.step_hours))
    b0 = math.log(target / (1.0 - target))
    nan = [math.nan] * 3
    return ComponentEstimate(component, kind, target, n_rows, 0, 0, nan, nan, [b0, 0.0, 0.0], [0.0, 0.0, 0.0],
                             math.exp(-b0), math.nan, math.nan, f"{type(exc).__name__}: {exc}")


def estimate_component(cov, temps, kind, component, config: EstimateConfig, seed) -> ComponentEstimate:
    rng = np.random.default_rng(seed)
    data = label_failures(np.column_stack([cov, temps]), component=component, kind=kind)
    target = tsfr(kind, config.step_hours)
    w = bootstrap_weights(data, target)
    counts = resample_counts(w, config.n_boot, rng)
    X = data.design()
    try:
        mle = fit_mle(X, data.y, counts)
    except (Separation, NoConvergence) as exc:
        raise type(exc)(f"{kind} {component}: {exc} (bootstrap drew {int(counts @ data.y)} failures)") from exc
    if config.likelihood == "expanded":
        lik_w = counts
    elif config.likelihood == "sampling":
        lik_w = w
    else:
        raise InputError(f"unknown likelihood weighting {config.likelihood!r}")
    if config.mass == "mle":
        mass = mle.information
    elif config.mass == "identity":
        mass = None
    else:
        raise InputError(f"unknown mass choice {config.mass!r}")
    hcfg = HmcConfig(**{**asdict(config.hmc), "mass": mass, "seed": int(rng.integers(2**31)), "keep_samples": False})
    post = hmc_posterior(X, data.y, lik_w, mle.beta, hcfg)
    if not -700.0 < post.mean[0] < 700.0:
        raise Separation(f"{kind} {component}: posterior intercept {post.mean[0]:.4g} puts lambda outside double range")
    return ComponentEstimate(
        component, kind, target, data.n, data.n_fail, int(counts @ data.y),
        mle.beta.tolist(), mle.se.tolist(), post.mean.tolist(), post.sd.tolist(),
        post.lam_hat, post.accept_rate, post.step_size,
    )


def _job(args):
    cov, temps, kind, component, config, seed = args
    try:
        return estimate_component(*args)
    except (AllOneClass, Separation, NoConvergence) as exc:
        if not config.fallback:
            raise
        return baseline_estimate(kind, component, config, exc, len(temps))


def estimate_model(bus_cov, line_cov, temps, config: EstimateConfig, workers: int | None = None):
    """Estimate every bus (columns of ``bus_cov``) and line (columns 1.. of ``line_cov``).

    Returns ``(FailureModel, [ComponentEstimate])``; components whose
    labelled or resampled data hold a single class get intercept-only
    baseline coefficients and a non-empty ``error``. Components run in a
    process pool capped by ``workers`` (default: ``RELGRID_THREADS`` or 1).
    """
    from .reliability import FailureModel

    bus_cov = np.asarray(bus_cov, dtype=float)
    line_cov = np.asarray(line_cov, dtype=float)
    temps = np.asarray(temps, dtype=float)
    n = bus_cov.shape[1]
    if bus_cov.shape[0] != temps.size or line_cov.shape != bus_cov.shape:
        raise InputError("covariate tables and temperature series must share rows")
    seeds = np.random.SeedSequence(config.seed).spawn(2 * n - 1)
    jobs = [(bus_cov[:, i], temps, "bus", i, config, seeds[i]) for i in range(n)]
    jobs += [(line_cov[:, i], temps, "line", i, config, seeds[n + i - 1]) for i in range(1, n)]
    if workers is None:
        workers = int(os.environ.get("RELGRID_THREADS", "1") or 1)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    lam_b, b1_b, b2_b = np.ones(n), np.zeros(n), np.zeros(n)
    lam_l, b1_l, b2_l = np.ones(n), np.zeros(n), np.zeros(n)
    for r in results:
        b0, b1, b2 = r.beta_post
        if r.kind == "bus":
            lam_b[r.component], b1_b[r.component], b2_b[r.component] = math.exp(-b0), b1, b2
        else:
            lam_l[r.component], b1_l[r.component], b2_l[r.component] = math.exp(-b0), b1, b2
    return FailureModel(lam_b, b1_b, b2_b, lam_l, b1_l, b2_l), results
