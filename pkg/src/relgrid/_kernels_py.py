"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_kernels.pyx`` mirrors the same
signatures with explicit loops. Arrays are float64 and C-contiguous.
"""

import numpy as np
from scipy.special import expit, log_expit

NAME = "python"


def _logistic(x, at, lam, b1, b2):
    """Pr and log(1 - Pr) for Pr = 1 / (1 + lam * exp(-(b1 x + b2 at)))."""
    a = b1[:, None] * x + b2[:, None] * at[None, :] - np.log(lam)[:, None]
    return expit(a), log_expit(-a)


def eens_terms(pt, ll, omega, at, lam_b, b1_b, b2_b, lam_l, b1_l, b2_l, parent, order):
    """Expected failure cost and its partials for every step.

    ``pt``, ``ll``, ``omega`` are (n_bus, T); row 0 of ``pt``/``omega`` is the
    substation, row 0 of ``ll`` is ignored. Returns ``(cost[T], unrel,
    d_pt, d_l)`` where ``unrel[i, t]`` is the probability that bus ``i`` is
    lost (so the partial with respect to ``omega``).
    """
    n, T = pt.shape
    pr_b, ls_b = _logistic(pt, at, lam_b, b1_b, b2_b)
    pr_l, ls_l = _logistic(ll[1:], at, lam_l[1:], b1_l[1:], b2_l[1:])
    cum = np.zeros((n, T))
    for i in order[1:]:
        cum[i] = cum[parent[i]] + ls_l[i - 1]
    log_surv = ls_b + cum
    surv = np.exp(log_surv)
    unrel = -np.expm1(log_surv)
    cost = (omega * unrel).sum(axis=0)
    d_pt = omega * surv * pr_b * b1_b[:, None]
    down = omega * surv
    for i in order[:0:-1]:
        down[parent[i]] += down[i]
    d_l = np.zeros((n, T))
    d_l[1:] = pr_l * b1_l[1:, None] * down[1:]
    return cost, unrel, d_pt, d_l


def logpost(beta, X, y, w, mu, prec):
    """Weighted logistic log-likelihood plus a Gaussian prior with precision matrix ``prec``."""
    eta = X @ beta
    ll = np.dot(w, y * eta + log_expit(-eta))
    r = beta - mu
    pr = prec @ r
    lp = ll - 0.5 * np.dot(pr, r)
    g = X.T @ (w * (y - expit(eta))) - pr
    return lp, g


def leapfrog(beta, mom, grad, eps, n_steps, X, y, w, mu, prec):
    """``n_steps`` leapfrog steps with identity mass; returns the end state."""
    b = beta.copy()
    p = mom + 0.5 * eps * grad
    lp = 0.0
    for k in range(n_steps):
        b = b + eps * p
        lp, grad = logpost(b, X, y, w, mu, prec)
        if k < n_steps - 1:
            p = p + eps * grad
    p = p + 0.5 * eps * grad
    return b, p, lp, grad
