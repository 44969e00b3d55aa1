"""Decision-dependent failure probabilities and the expected failure cost.

Each bus and line fails within a step with logistic probability
``1 / (1 + lam * exp(-(b1 * X + b2 * AT)))``, where ``X`` is the absolute net
injection for a bus and the squared current for a line. A bus is lost when it
or any line on its path to the substation fails, and losing it costs the
weighted power it was serving.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import kernels
from .errors import DimensionMismatch, InputError, UnknownComponent
from .grid import Network


@dataclass(frozen=True)
class FailureModel:
    lam_b: np.ndarray
    b1_b: np.ndarray
    b2_b: np.ndarray
    lam_l: np.ndarray  # index 0 unused (set to 1)
    b1_l: np.ndarray
    b2_l: np.ndarray

    @property
    def n_bus(self) -> int:
        return self.lam_b.size

    def check(self, network: Network) -> None:
        if self.n_bus != network.n_bus:
            raise DimensionMismatch(f"coefficients cover {self.n_bus} buses, network has {network.n_bus}")
        if not (self.lam_b > 0).all() or not (self.lam_l[1:] > 0).all():
            raise InputError("every lambda must be positive")

    @classmethod
    def uniform(cls, n_bus, lam=1.0, b1=0.0, b2=0.0) -> "FailureModel":
        one = np.ones(n_bus)
        lam_l = lam * one
        lam_l[0] = 1.0
        return cls(lam * one, b1 * one, b2 * one, lam_l, b1 * one, b2 * one)


def load_coeffs(path, network: Network | None = None) -> FailureModel:
    """Read a coefficient CSV (component_id, lambda_b, beta1_b, beta2_b, lambda_l, beta1_l, beta2_l)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise InputError(f"{path} is empty")
    n = max(int(r["component_id"]) for r in rows) + 1
    if network is not None and n != network.n_bus:
        raise DimensionMismatch(f"{path} covers {n} components, network has {network.n_bus} buses")
    arr = {k: np.full(n, np.nan) for k in ("lambda_b", "beta1_b", "beta2_b", "lambda_l", "beta1_l", "beta2_l")}
    for r in rows:
        i = int(r["component_id"])
        for k in arr:
            v = (r.get(k) or "").strip()
            if v not in ("", "-"):
                arr[k][i] = float(v)
    for k in ("lambda_b", "beta1_b", "beta2_b"):
        if np.isnan(arr[k]).any():
            raise InputError(f"{path}: column {k} missing for bus {int(np.flatnonzero(np.isnan(arr[k]))[0])}")
    for k in ("lambda_l", "beta1_l", "beta2_l"):
        if np.isnan(arr[k][1:]).any():
            raise InputError(f"{path}: column {k} missing for line {int(np.flatnonzero(np.isnan(arr[k][1:]))[0]) + 1}")
    arr["lambda_l"][0], arr["beta1_l"][0], arr["beta2_l"][0] = 1.0, 0.0, 0.0
    model = FailureModel(
        arr["lambda_b"], arr["beta1_b"], arr["beta2_b"], arr["lambda_l"], arr["beta1_l"], arr["beta2_l"]
    )
    if network is not None:
        model.check(network)
    elif not (model.lam_b > 0).all() or not (model.lam_l > 0).all():
        raise InputError("every lambda must be positive")
    return model


def write_coeffs(path, model: FailureModel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["component_id", "lambda_b", "beta1_b", "beta2_b", "lambda_l", "beta1_l", "beta2_l"])
        for i in range(model.n_bus):
            row = [i, repr(float(model.lam_b[i])), repr(float(model.b1_b[i])), repr(float(model.b2_b[i]))]
            if i == 0:
                row += ["", "", ""]
            else:
                row += [repr(float(model.lam_l[i])), repr(float(model.b1_l[i])), repr(float(model.b2_l[i]))]
            w.writerow(row)


@dataclass(frozen=True)
class EensWeights:
    w_b0: float
    w_c: np.ndarray
    w_dg: np.ndarray
    w_bc: np.ndarray
    w_bd: np.ndarray
    w_dr: np.ndarray

    def __post_init__(self):
        vals = [self.w_b0] + [float(np.min(a, initial=0.0)) for a in (self.w_c, self.w_dg, self.w_bc, self.w_bd, self.w_dr)]
        if min(vals) < 0:
            raise InputError("EENS weights must be non-negative")

    @classmethod
    def uniform(cls, n_bus, substation=0.0, load=0.0, dg=0.0, bess_charge=0.0, bess_discharge=0.0, dr=0.0):
        one = np.ones(n_bus)
        return cls(float(substation), load * one, dg * one, bess_charge * one, bess_discharge * one, dr * one)

    @classmethod
    def from_mapping(cls, n_bus, m) -> "EensWeights":
        return cls.uniform(
            n_bus,
            m.get("substation", 0.0),
            m.get("load", 0.0),
            m.get("dg", 0.0),
            m.get("bess_charge", 0.0),
            m.get("bess_discharge", 0.0),
            m.get("dr", 0.0),
        )

    def scaled(self, s: float) -> "EensWeights":
        return EensWeights(self.w_b0 * s, self.w_c * s, self.w_dg * s, self.w_bc * s, self.w_bd * s, self.w_dr * s)

    @property
    def is_zero(self) -> bool:
        return self.w_b0 == 0 and not any(np.any(a) for a in (self.w_c, self.w_dg, self.w_bc, self.w_bd, self.w_dr))


@dataclass
class EensPoint:
    """The quantities the failure cost depends on, each (n_bus, T).

    ``p_tilde`` row 0 is the substation's absolute import; ``l`` row 0 is unused.
    """

    p0: np.ndarray
    p_tilde: np.ndarray
    l: np.ndarray
    load_p: np.ndarray
    p_dg: np.ndarray
    p_bc: np.ndarray
    p_bd: np.ndarray
    p_dr: np.ndarray
    extra: dict = field(default_factory=dict)

    def net_injection(self) -> np.ndarray:
        inj = -self.load_p + self.p_dg - self.p_bc + self.p_bd + self.p_dr
        inj = np.array(inj, dtype=float)
        inj[0] = self.p0
        return inj

    def composed(self) -> "EensPoint":
        """Same point with ``p_tilde`` replaced by the absolute net injection."""
        return EensPoint(
            self.p0, np.abs(self.net_injection()), self.l, self.load_p,
            self.p_dg, self.p_bc, self.p_bd, self.p_dr,
        )


def point_from_solution(sol, load_p, use_tilde=False) -> EensPoint:
    pt = sol.arrays.get("p_tilde") if use_tilde else None
    pt_abs = np.abs(sol.net_injection(load_p))
    return EensPoint(
        np.asarray(sol.p0, dtype=float),
        pt_abs if pt is None else np.asarray(pt, dtype=float),
        np.asarray(sol.l, dtype=float),
        np.asarray(load_p, dtype=float),
        sol.p_dg, sol.p_bc, sol.p_bd, sol.p_dr,
    )


def omega(point: EensPoint, weights: EensWeights) -> np.ndarray:
    """Cost of losing each bus per step; row 0 is the substation."""
    om = (
        weights.w_c[:, None] * point.load_p
        + weights.w_dg[:, None] * point.p_dg
        + weights.w_bc[:, None] * point.p_bc
        + weights.w_bd[:, None] * point.p_bd
        + weights.w_dr[:, None] * point.p_dr
    )
    om = np.array(om, dtype=float)
    om[0] = weights.w_b0 * point.p0
    return om


def _check(point: EensPoint, model: FailureModel, network: Network, at):
    n = network.n_bus
    at = np.atleast_1d(np.asarray(at, dtype=float))
    T = at.size
    for name in ("p_tilde", "l", "load_p", "p_dg", "p_bc", "p_bd", "p_dr"):
        if np.shape(getattr(point, name)) != (n, T):
            raise DimensionMismatch(f"{name} has shape {np.shape(getattr(point, name))}, expected ({n}, {T})")
    if np.shape(point.p0) != (T,):
        raise DimensionMismatch(f"p0 has shape {np.shape(point.p0)}, expected ({T},)")
    if model.n_bus != n:
        raise DimensionMismatch(f"model covers {model.n_bus} buses, network has {n}")
    return at


def _logistic(lam, b1, b2, x, at):
    return expit(b1 * x + b2 * at - np.log(lam))


def interval_unreliability_bus(model: FailureModel, i: int, p_abs, at):
    if not 0 <= i < model.n_bus:
        raise UnknownComponent(f"bus {i} has no coefficients")
    if np.any(np.asarray(p_abs) < 0):
        raise InputError("absolute injection must be non-negative")
    return _logistic(model.lam_b[i], model.b1_b[i], model.b2_b[i], np.asarray(p_abs, dtype=float), at)


def interval_unreliability_line(model: FailureModel, i: int, l_sq, at):
    if not 1 <= i < model.n_bus:
        raise UnknownComponent(f"line {i} has no coefficients")
    if np.any(np.asarray(l_sq) < 0):
        raise InputError("squared current must be non-negative")
    return _logistic(model.lam_l[i], model.b1_l[i], model.b2_l[i], np.asarray(l_sq, dtype=float), at)


def eens_terms(point: EensPoint, weights: EensWeights, model: FailureModel, network: Network, at, impl=None):
    at = _check(point, model, network, at)
    om = omega(point, weights)
    cost, unrel, d_pt, d_l = kernels.eens_terms(
        point.p_tilde, point.l, om, at, model, network.parent, network.order, impl=impl
    )
    return cost, unrel, d_pt, d_l, om


def eens_cost(point: EensPoint, weights: EensWeights, model: FailureModel, network: Network, at, impl=None) -> np.ndarray:
    """Expected failure cost per step (sum it for the horizon)."""
    return eens_terms(point, weights, model, network, at, impl)[0]


def eens_gradient(point: EensPoint, weights: EensWeights, model: FailureModel, network: Network, at, impl=None) -> dict:
    """Partials of the per-step cost with ``p_tilde`` treated as independent.

    Keys: ``p0`` (T,), and ``p_tilde``, ``l``, ``p_dg``, ``p_bc``, ``p_bd``,
    ``p_dr`` each (n_bus, T). Partials with respect to DER powers flow only
    through the loss weights, since the abs-injection enters via ``p_tilde``.
    """
    cost, unrel, d_pt, d_l, _ = eens_terms(point, weights, model, network, at, impl)
    return {
        "cost": cost,
        "p0": weights.w_b0 * unrel[0],
        "p_tilde": d_pt,
        "l": d_l,
        "p_dg": weights.w_dg[:, None] * unrel,
        "p_bc": weights.w_bc[:, None] * unrel,
        "p_bd": weights.w_bd[:, None] * unrel,
        "p_dr": weights.w_dr[:, None] * unrel,
    }


def failure_probabilities(point: EensPoint, model: FailureModel, at) -> tuple[np.ndarray, np.ndarray]:
    """Per-component interval unreliability: (buses (n, T), lines (n, T) with row 0 zero)."""
    at = np.atleast_1d(np.asarray(at, dtype=float))
    pb = _logistic(model.lam_b[:, None], model.b1_b[:, None], model.b2_b[:, None], point.p_tilde, at[None, :])
    pl = _logistic(model.lam_l[:, None], model.b1_l[:, None], model.b2_l[:, None], point.l, at[None, :])
    pl[0] = 0.0
    return pb, pl


# constants of the two-component cost used by the Hessian probe
HESSIAN_NU = (8043.2197, 2e4, 5.0833e-12, 0.3039, 1.1032e-11, 0.9501)


def hessian_entries(nu, p, l):
    """Second derivatives of ``(nu1 + nu2 p)(1 - (1 - A)(1 - B))`` with
    ``A = 1/(1 + nu3 e^{-nu4 p})`` and ``B = 1/(1 + nu5 e^{-nu6 l})``."""
    n1, n2, n3, n4, n5, n6 = (float(v) for v in nu)
    ea = math.exp(-n4 * p)
    eb = math.exp(-n6 * l)
    da = 1.0 + n3 * ea
    db = 1.0 + n5 * eb
    one_m_a = n3 * ea / da
    one_m_b = n5 * eb / db
    w = n1 + n2 * p
    h_pp = (
        2 * n2 * n3 * n4 * one_m_b * ea / da**2
        + w * one_m_b * (2 * n3**2 * n4**2 * ea**2 / da**3 - n3 * n4**2 * ea / da**2)
    )
    h_pl = n2 * n5 * n6 * one_m_a * eb / db**2 - n3 * n4 * n5 * n6 * w * ea * eb / (da**2 * db**2)
    h_ll = w * one_m_a * (2 * n5**2 * n6**2 * eb**2 / db**3 - n5 * n6**2 * eb / db**2)
    return np.array([[h_pp, h_pl], [h_pl, h_ll]])


def hessian_probe(nu=HESSIAN_NU, p_dg=0.1, l=1.0, x=(0.1, 0.4)) -> float:
    """Quadratic form ``x^T H x`` of the closed-form Hessian."""
    x = np.asarray(x, dtype=float)
    return float(x @ hessian_entries(nu, p_dg, l) @ x)


def hazard_gap(G) -> np.ndarray:
    """``|1/(1+G) - exp(-G)|``: logistic vs discrete proportional-hazards survival."""
    g = np.asarray(G, dtype=float)
    if np.any(g < 0):
        raise InputError("linear predictor G must be non-negative")
    # 1/(1+G) - e^{-G} = (1 - (1+G) e^{-G}) / (1+G), evaluated without cancellation
    inner = -np.expm1(np.log1p(g) - g)
    return np.abs(inner / (1.0 + g))
