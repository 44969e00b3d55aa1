# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same signatures and results as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, expm1, fabs

cnp.import_array()

NAME = "cython"


cdef inline double _log_expit(double a) nogil:
    # log(1 / (1 + exp(-a)))
    if a >= 0:
        return -log1p(exp(-a))
    return a - log1p(exp(a))


cdef inline double _expit(double a) nogil:
    cdef double e
    if a >= 0:
        return 1.0 / (1.0 + exp(-a))
    e = exp(a)
    return e / (1.0 + e)


def eens_terms(double[:, ::1] pt, double[:, ::1] ll, double[:, ::1] omega, double[::1] at,
               double[::1] lam_b, double[::1] b1_b, double[::1] b2_b,
               double[::1] lam_l, double[::1] b1_l, double[::1] b2_l,
               long[::1] parent, long[::1] order):
    cdef Py_ssize_t n = pt.shape[0], T = pt.shape[1], i, k, t, a
    cost_a = np.zeros(T)
    unrel_a = np.zeros((n, T))
    dpt_a = np.zeros((n, T))
    dl_a = np.zeros((n, T))
    cdef double[::1] cost = cost_a
    cdef double[:, ::1] unrel = unrel_a, dpt = dpt_a, dl = dl_a
    cdef double[::1] cum = np.zeros(n), down = np.zeros(n), prl = np.zeros(n), lslb = np.zeros(n)
    cdef double[::1] loglam_b = np.log(np.asarray(lam_b))
    cdef double[::1] loglam_l = np.ones(n)
    cdef double z, pr, s, ls, total
    for i in range(1, n):
        loglam_l[i] = log(lam_l[i])
    with nogil:
        for t in range(T):
            cum[0] = 0.0
            for k in range(1, n):
                i = order[k]
                z = b1_l[i] * ll[i, t] + b2_l[i] * at[t] - loglam_l[i]
                prl[i] = _expit(z)
                cum[i] = cum[parent[i]] + _log_expit(-z)
            total = 0.0
            for i in range(n):
                z = b1_b[i] * pt[i, t] + b2_b[i] * at[t] - loglam_b[i]
                pr = _expit(z)
                ls = _log_expit(-z) + cum[i]
                s = exp(ls)
                unrel[i, t] = -expm1(ls)
                total += omega[i, t] * unrel[i, t]
                dpt[i, t] = omega[i, t] * s * pr * b1_b[i]
                down[i] = omega[i, t] * s
            cost[t] = total
            for k in range(n - 1, 0, -1):
                i = order[k]
                down[parent[i]] += down[i]
            for i in range(1, n):
                dl[i, t] = prl[i] * b1_l[i] * down[i]
    return cost_a, unrel_a, dpt_a, dl_a


cdef double _logpost(double[::1] beta, double[:, ::1] X, double[::1] y, double[::1] w,
                     double[::1] mu, double[:, ::1] prec, double[::1] grad) nogil:
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j, k
    cdef double eta, lp = 0.0, r, c, e
    for j in range(d):
        r = 0.0
        for k in range(d):
            r += prec[j, k] * (beta[k] - mu[k])
        lp -= 0.5 * r * (beta[j] - mu[j])
        grad[j] = -r
    for i in range(n):
        if w[i] == 0.0:
            continue
        eta = 0.0
        for j in range(d):
            eta += X[i, j] * beta[j]
        # one exp serves both log(1 - expit(eta)) and expit(eta)
        e = exp(-fabs(eta))
        if eta >= 0:
            lp += w[i] * (y[i] * eta - eta - log1p(e))
            c = w[i] * (y[i] - 1.0 / (1.0 + e))
        else:
            lp += w[i] * (y[i] * eta - log1p(e))
            c = w[i] * (y[i] - e / (1.0 + e))
        for j in range(d):
            grad[j] += c * X[i, j]
    return lp


def logpost(double[::1] beta, double[:, ::1] X, double[::1] y, double[::1] w,
            double[::1] mu, double[:, ::1] prec):
    g = np.zeros(beta.shape[0])
    cdef double[::1] gv = g
    cdef double lp
    with nogil:
        lp = _logpost(beta, X, y, w, mu, prec, gv)
    return lp, g


def leapfrog(double[::1] beta, double[::1] mom, double[::1] grad, double eps, int n_steps,
             double[:, ::1] X, double[::1] y, double[::1] w, double[::1] mu, double[:, ::1] prec):
    cdef Py_ssize_t d = beta.shape[0], j
    cdef int k
    b_a = np.array(beta, copy=True)
    p_a = np.array(mom, copy=True)
    g_a = np.array(grad, copy=True)
    cdef double[::1] b = b_a, p = p_a, g = g_a
    cdef double lp = 0.0
    with nogil:
        for j in range(d):
            p[j] += 0.5 * eps * g[j]
        for k in range(n_steps):
            for j in range(d):
                b[j] += eps * p[j]
            lp = _logpost(b, X, y, w, mu, prec, g)
            if k < n_steps - 1:
                for j in range(d):
                    p[j] += eps * g[j]
        for j in range(d):
            p[j] += 0.5 * eps * g[j]
    return b_a, p_a, lp, g_a
