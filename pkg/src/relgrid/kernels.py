"""Kernel dispatch: the compiled extension when importable, numpy otherwise.

Set ``RELGRID_KERNELS=python`` to force the fallback or ``=cython`` to make a
missing extension an error.
"""

import os

import numpy as np

_choice = os.environ.get("RELGRID_KERNELS", "").strip().lower()
if _choice == "python":
    from . import _kernels_py as _impl
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        if _choice == "cython":
            raise
        from . import _kernels_py as _impl

BACKEND = _impl.NAME


def _f(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def eens_terms(pt, ll, omega, at, model, parent, order, impl=None):
    m = impl or _impl
    return m.eens_terms(
        _f(pt), _f(ll), _f(omega), _f(at),
        _f(model.lam_b), _f(model.b1_b), _f(model.b2_b),
        _f(model.lam_l), _f(model.b1_l), _f(model.b2_l),
        _i(parent), _i(order),
    )


def _prec(prec, d):
    p = np.asarray(prec, dtype=float)
    if p.ndim == 1:
        p = np.diag(p)
    if p.shape != (d, d):
        raise ValueError(f"prior precision must be ({d},) or ({d}, {d}), got {p.shape}")
    return _f(p)


def logpost(beta, X, y, w, mu, prec, impl=None):
    """Weighted logistic log posterior and gradient; ``prec`` is a vector (diagonal) or matrix."""
    m = impl or _impl
    beta = _f(beta)
    return m.logpost(beta, _f(X), _f(y), _f(w), _f(mu), _prec(prec, beta.size))


def leapfrog(beta, mom, grad, eps, n_steps, X, y, w, mu, prec, impl=None):
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    m = impl or _impl
    beta = _f(beta)
    return m.leapfrog(beta, _f(mom), _f(grad), float(eps), int(n_steps), _f(X), _f(y), _f(w), _f(mu), _prec(prec, beta.size))


def implementations():
    """Every importable kernel module, keyed by name."""
    from . import _kernels_py

    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
