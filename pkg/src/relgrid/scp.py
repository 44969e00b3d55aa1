"""Sequential convex programming for the cost-and-reliability dispatch.

The absolute net injections inside the failure cost are replaced by epigraph
variables ``p_tilde >= |expr|``. Each iteration linearizes the failure cost at
the previous iterate, adds a proximal penalty whose weight grows
geometrically, and solves the resulting convex program. The true cost is
recomputed from scratch at every iterate.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import opf, reliability as rl
from .conic import ConicProgram, Expr
from .errors import AlreadyReformulated, InputError, IterationLimit, SubproblemInfeasible
from .grid import DerAssets, Network
from .scenario import Scenario
from .solve import BnbOptions, SolverOptions, solve_continuous, solve_misocp

DER_FIELDS = ("p_dg", "p_bc", "p_bd", "p_dr")
_SIGN = {"p_dg": 1.0, "p_bc": -1.0, "p_bd": 1.0, "p_dr": 1.0}


@dataclass
class ScpOptions:
    eps1: float = 1e-3
    eps2: float = 0.1
    eps3: float = 2e-5
    k_max: int = 100
    reg_scale: float = 1e5
    reg_decay: float = 0.85
    reg_offset: int = 5
    refine_binaries: bool = False

    def __post_init__(self):
        if not (self.eps1 > 0 and self.eps2 > 0 and self.eps3 > 0):
            raise InputError("convergence thresholds must be positive")
        if not 0 < self.reg_decay < 1:
            raise InputError("reg_decay must lie in (0, 1)")
        if self.k_max < 1:
            raise InputError("k_max must be at least 1")


@dataclass
class TraceRow:
    k: int
    obj_crm: float
    obj_crm_appx: float
    obj_cm: float
    metric1: float | None = None
    metric2: float | None = None
    metric3: float | None = None
    seconds: float = 0.0

    @property
    def appx_gap(self) -> float:
        return abs(self.obj_crm - self.obj_crm_appx)


@dataclass
class ScpTrace:
    rows: list[TraceRow] = field(default_factory=list)
    reason: str | None = None  # "criterion1" | "criterion2" | "criterion3" | "iteration_limit"

    def write_csv(self, path) -> None:
        def fmt(v):
            return "" if v is None else repr(float(v))

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "CRM", "CRM-APPX", "eps1", "eps2", "eps3", "seconds", "CM"])
            for r in self.rows:
                w.writerow([r.k, fmt(r.obj_crm), fmt(r.obj_crm_appx), fmt(r.metric1), fmt(r.metric2),
                            fmt(r.metric3), fmt(r.seconds), fmt(r.obj_cm)])

    @classmethod
    def read_csv(cls, path) -> "ScpTrace":
        def val(s):
            return None if s == "" else float(s)

        rows = []
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                rows.append(TraceRow(int(r["iteration"]), val(r["CRM"]), val(r["CRM-APPX"]), val(r["CM"]),
                                     val(r["eps1"]), val(r["eps2"]), val(r["eps3"]), val(r["seconds"])))
        return cls(rows)


def epigraph_reformulate(prog: ConicProgram, scenario: Scenario) -> ConicProgram:
    """Add ``p_tilde`` with ``p_tilde >= +-expr`` for the substation and every bus."""
    if prog.meta.get("reformulated"):
        raise AlreadyReformulated("program already carries p_tilde variables")
    idx = prog.meta["idx"]
    n, T = prog.meta["n_bus"], prog.meta["horizon"]
    pt_idx = np.full((n, T), -1, dtype=np.int64)
    for t in range(T):
        for i in range(n):
            z = prog.add_var(f"p_tilde[{i},{t}]", 0.0)
            pt_idx[i, t] = next(iter(z.terms))
            if i == 0:
                expr = Expr({int(idx["p0"][t]): 1.0})
            else:
                expr = Expr(None, -scenario.load_p[i, t])
                for f in DER_FIELDS:
                    j = idx[f][i, t]
                    if j >= 0:
                        expr = expr + _SIGN[f] * Expr({int(j): 1.0})
            prog.add_ge(z - expr, 0.0, f"epi_pos[{i},{t}]")
            prog.add_ge(z + expr, 0.0, f"epi_neg[{i},{t}]")
    prog.meta["idx"] = dict(idx, p_tilde=pt_idx)
    prog.meta["reformulated"] = True
    return prog


@dataclass
class LinearEens:
    """Affine model of the per-step failure cost around an expansion point."""

    const: np.ndarray  # (T,)
    grad: dict  # field -> (n, T) (p0 -> (T,))
    value_at_star: np.ndarray

    def evaluate(self, point: rl.EensPoint) -> np.ndarray:
        tot = self.const.copy()
        tot += self.grad["p0"] * point.p0
        tot += (self.grad["p_tilde"] * point.p_tilde).sum(axis=0)
        tot += (self.grad["l"] * point.l).sum(axis=0)
        for f in DER_FIELDS:
            tot += (self.grad[f] * getattr(point, f)).sum(axis=0)
        return tot

    def objective(self, prog: ConicProgram) -> Expr:
        idx = prog.meta["idx"]
        terms: dict[int, float] = {}

        def put(ix, g):
            mask = ix >= 0
            for j, c in zip(ix[mask].ravel(), g[mask].ravel()):
                if c != 0.0:
                    terms[int(j)] = terms.get(int(j), 0.0) + float(c)

        put(idx["p0"], self.grad["p0"])
        put(idx["p_tilde"], self.grad["p_tilde"])
        l_g = self.grad["l"].copy()
        l_g[0] = 0.0
        put(idx["l"], l_g)
        for f in DER_FIELDS:
            put(idx[f], self.grad[f])
        return Expr(terms, float(self.const.sum()))


def linearize_eens(point: rl.EensPoint, weights, model, network, at) -> LinearEens:
    g = rl.eens_gradient(point, weights, model, network, at)
    cost = g.pop("cost")
    g["l"] = g["l"].copy()
    g["l"][0] = 0.0
    lin = LinearEens(np.zeros_like(cost), g, cost)
    lin.const = cost - (lin.evaluate(point) - lin.const)
    return lin


def regularization_weight(k: int, options: ScpOptions | None = None) -> float:
    o = options or ScpOptions()
    if k < 1:
        raise InputError("iteration index starts at 1")
    return o.reg_scale / o.reg_decay ** (k + o.reg_offset)


def regularization_term(k, v, v_star, options: ScpOptions | None = None) -> float:
    d = np.asarray(v, dtype=float) - np.asarray(v_star, dtype=float)
    return regularization_weight(k, options) * float(d @ d)


@dataclass
class CrmResult:
    solution: opf.DispatchSolution
    trace: ScpTrace
    cm_solution: opf.DispatchSolution
    obj_cm: float
    info: dict = field(default_factory=dict)


def true_objective(sol: opf.DispatchSolution, scenario: Scenario, weights, model, network) -> tuple[float, float, float]:
    """(operational cost, failure cost, total) with ``|expr|`` recomputed from raw variables."""
    op = opf.operational_cost(sol, scenario)
    pt = rl.point_from_solution(sol, scenario.load_p)
    ee = float(rl.eens_cost(pt, weights, model, network, scenario.ambient_temp).sum())
    return op, ee, op + ee


def solve_crm(
    network: Network,
    scenario: Scenario,
    ders: DerAssets,
    model,
    weights,
    options: ScpOptions | None = None,
    solver_options: SolverOptions | None = None,
    bnb_options: BnbOptions | None = None,
    cm: tuple | None = None,
    on_iteration=None,
) -> CrmResult:
    """Run the iterative linearization from the cost-only optimum.

    ``cm`` may pass a precomputed ``(program, SolveResult)`` for the cost-only
    model. ``on_iteration(row)`` is called after each trace row is recorded.
    """
    opts = options or ScpOptions()
    at = scenario.ambient_temp
    t_start = time.perf_counter()
    if cm is None:
        cm_prog = opf.build_cm(network, scenario, ders)
        cm_res = solve_misocp(cm_prog, bnb_options, solver_options)
    else:
        cm_prog, cm_res = cm
    cm_sol = opf.extract_solution(cm_prog, cm_res.x)
    obj_cm = opf.operational_cost(cm_sol, scenario)

    base = epigraph_reformulate(cm_prog.copy(), scenario)
    lb = np.asarray(base.lb, dtype=float)
    ub = np.asarray(base.ub, dtype=float)
    bins = np.asarray(base.binary, dtype=np.int64)
    if not opts.refine_binaries and bins.size:
        vals = np.round(cm_res.x[bins])
        lb[bins] = vals
        ub[bins] = vals
    pt_idx = base.meta["idx"]["p_tilde"]
    v_prev = np.zeros(base.n)
    v_prev[: cm_prog.n] = cm_res.x
    inj = np.abs(cm_sol.net_injection(scenario.load_p))
    v_prev[pt_idx.ravel()] = inj.ravel()
    is_bin = np.zeros(base.n, dtype=bool)
    is_bin[bins] = True
    cont = np.flatnonzero(~is_bin & ~(np.isfinite(lb) & (lb == ub)))

    trace = ScpTrace([TraceRow(0, obj_cm, obj_cm, obj_cm, seconds=time.perf_counter() - t_start)])
    if on_iteration:
        on_iteration(trace.rows[0])
    prev_sol = cm_sol.copy()
    prev_sol.arrays["p_tilde"] = inj
    best = None
    for k in range(1, opts.k_max + 1):
        t0 = time.perf_counter()
        star = rl.point_from_solution(prev_sol, scenario.load_p, use_tilde=True)
        lin = linearize_eens(star, weights, model, network, at)
        prog = base.copy()
        prog.add_objective(lin.objective(prog))
        phi = regularization_weight(k, opts)
        prog.add_proximal(cont, v_prev[cont], phi)
        if opts.refine_binaries and bins.size:
            res = solve_misocp(prog, bnb_options, solver_options, lb=lb, ub=ub)
        else:
            res = solve_continuous(prog, lb, ub, solver_options, x0=v_prev)
        if not res.ok:
            trace.reason = "subproblem_failure"
            msg = f"iteration {k}: subproblem {res.status} ({res.info.get('raw_status', res.info.get('reason'))})"
            raise SubproblemInfeasible(msg, iterate=prev_sol)
        sol = opf.extract_solution(prog, res.x)
        # the proximal pull can leave p_tilde above |expr|; the epigraph only
        # represents the absolute value when tight, so project back
        tight = np.abs(sol.net_injection(scenario.load_p))
        sol.arrays["p_tilde"] = tight
        x_new = res.x.copy()
        x_new[pt_idx.ravel()] = tight.ravel()
        op, ee, crm = true_objective(sol, scenario, weights, model, network)
        appx = op + float(lin.evaluate(rl.point_from_solution(sol, scenario.load_p, use_tilde=True)).sum())
        dv = x_new[cont] - v_prev[cont]
        prev = trace.rows[-1]
        row = TraceRow(k, crm, appx, op, seconds=time.perf_counter() - t0)
        # the first iterate has no predecessor subproblem, so only the
        # deviation criterion is defined there
        if k >= 2:
            row.metric1 = float(dv @ dv)
            row.metric3 = abs(appx - prev.obj_crm_appx) / abs(appx)
        row.metric2 = abs((appx - op) - (prev.obj_crm - prev.obj_cm))
        trace.rows.append(row)
        if on_iteration:
            on_iteration(row)
        if best is None or crm < best[0]:
            best = (crm, sol)
        v_prev = x_new
        prev_sol = sol
        if row.metric1 is not None and row.metric1 <= opts.eps1:
            trace.reason = "criterion1"
        elif row.metric2 <= opts.eps2:
            trace.reason = "criterion2"
        elif row.metric3 is not None and row.metric3 <= opts.eps3:
            trace.reason = "criterion3"
        if trace.reason:
            break
    info = {"wall_time": time.perf_counter() - t_start, "cm_info": cm_res.info}
    if trace.reason is None:
        trace.reason = "iteration_limit"
        raise IterationLimit(f"no criterion met in {opts.k_max} iterations", solution=best[1], trace=trace)
    return CrmResult(prev_sol, trace, cm_sol, obj_cm, info)


# -- linearization equivalence check ----------------------------------------


def _raw_gradient_via_tilde(point: rl.EensPoint, weights, model, network, at):
    """Gradient in raw variables obtained by chaining the p_tilde-space partials
    through ``p_tilde = sign(expr*) * expr``."""
    g = rl.eens_gradient(point, weights, model, network, at)
    s = np.sign(point.net_injection())
    s[s == 0] = 1.0  # right derivative at a zero injection
    out = {"p0": g["p0"] + g["p_tilde"][0] * s[0], "l": g["l"].copy()}
    out["l"][0] = 0.0
    for f in DER_FIELDS:
        gf = g[f] + _SIGN[f] * g["p_tilde"] * s
        gf[0] = 0.0
        out[f] = gf
    return g["cost"], out


def _raw_gradient_complex_step(point: rl.EensPoint, weights, model, network, at, h=1e-30):
    """Gradient of the composed (absolute-value) cost by complex-step
    differentiation of the reference implementation."""
    n, T = point.l.shape
    M = network.path_matrix()
    out = {"p0": np.zeros(T), "l": np.zeros((n, T))}
    for f in DER_FIELDS:
        out[f] = np.zeros((n, T))
    cost = np.zeros(T)
    for t in range(T):
        base = {
            "p0": np.array([point.p0[t]], dtype=complex),
            "l": point.l[:, t].astype(complex),
            "load": point.load_p[:, t].astype(complex),
        }
        for f in DER_FIELDS:
            base[f] = getattr(point, f)[:, t].astype(complex)
        # batch of perturbed copies: one per raw variable
        names = [("p0", 0)] + [("l", i) for i in range(1, n)] + [(f, i) for f in DER_FIELDS for i in range(1, n)]
        B = len(names)
        arrs = {k: np.repeat(v[None, :], B, axis=0) for k, v in base.items()}
        for b, (k, i) in enumerate(names):
            arrs[k][b, i] += 1j * h
        vals = reference_eens(arrs, weights, model, M, at[t])
        cost[t] = reference_eens({k: v[None, :] for k, v in base.items()}, weights, model, M, at[t]).real[0]
        for b, (k, i) in enumerate(names):
            g = vals[b].imag / h
            if k == "p0":
                out["p0"][t] = g
            else:
                out[k][i, t] = g
    return cost, out


def _clog1p(z):
    """``log1p`` for complex-step arguments (imaginary part infinitesimal).

    numpy's complex ``log1p`` evaluates ``log(1 + z)`` and loses the real
    part's digits when ``|z|`` is tiny; this keeps them and is exact to first
    order in the imaginary part.
    """
    z = np.asarray(z, dtype=complex)
    return np.log1p(z.real) + 1j * z.imag / (1.0 + z.real)


def reference_eens(arrs, weights, model, M, at):
    """Path-by-path evaluation of the composed cost for a batch of single-step
    states; complex inputs are supported (for complex-step derivatives)."""
    p0 = arrs["p0"][:, 0]
    inj = -arrs["load"] + arrs["p_dg"] - arrs["p_bc"] + arrs["p_bd"] + arrs["p_dr"]
    inj[:, 0] = p0

    def cabs(z):
        return z * np.sign(z.real)

    xb = cabs(inj)
    pr_b = 1.0 / (1.0 + model.lam_b[None, :] * np.exp(-(model.b1_b[None, :] * xb + model.b2_b[None, :] * at)))
    pr_l = 1.0 / (1.0 + model.lam_l[None, :] * np.exp(-(model.b1_l[None, :] * arrs["l"] + model.b2_l[None, :] * at)))
    log_keep = _clog1p(-pr_l)
    log_keep[:, 0] = 0.0
    # survival of each path: sum of log survival over the lines flagged in M
    log_surv = _clog1p(-pr_b) + np.sum(np.where(M[None, :, :] > 0, log_keep[:, None, :], 0.0), axis=2)
    unrel = -(np.expm1(log_surv.real) + 1j * log_surv.imag * np.exp(log_surv.real))
    om = (
        weights.w_c[None, :] * arrs["load"]
        + weights.w_dg[None, :] * arrs["p_dg"]
        + weights.w_bc[None, :] * arrs["p_bc"]
        + weights.w_bd[None, :] * arrs["p_bd"]
        + weights.w_dr[None, :] * arrs["p_dr"]
    )
    om[:, 0] = weights.w_b0 * p0
    return (om * unrel).sum(axis=1)


def random_point(network: Network, ders: DerAssets, scenario: Scenario, rng, min_injection=1e-3) -> rl.EensPoint:
    """A random state with every net injection bounded away from zero."""
    n, T = network.n_bus, scenario.horizon
    z = np.zeros((n, T))
    p = {f: z.copy() for f in DER_FIELDS}
    for bus, u in ders.dg.items():
        p["p_dg"][bus] = rng.uniform(u.p_min, u.p_max, T)
    for bus, u in ders.bess.items():
        on = rng.random(T) < 0.5
        p["p_bc"][bus] = np.where(on, rng.uniform(0, u.p_max, T), 0.0)
        p["p_bd"][bus] = np.where(on, 0.0, rng.uniform(0, u.p_max, T))
    for bus, u in ders.dr.items():
        p["p_dr"][bus] = rng.uniform(u.p_min, u.p_max, T) * (rng.random(T) < 0.5)
    load = scenario.load_p * rng.uniform(0.5, 1.5)
    l = rng.uniform(0.0, 0.5, (n, T))
    l[0] = 0.0
    p0 = rng.uniform(0.2, 3.0, T) * rng.choice([-1.0, 1.0], T)
    pt = rl.EensPoint(p0, z, l, load, p["p_dg"], p["p_bc"], p["p_bd"], p["p_dr"])
    inj = pt.net_injection()
    small = np.abs(inj) < min_injection
    if small.any():
        # nudge the load away from a kink
        pt.load_p = np.where(small, pt.load_p + 2 * min_injection, pt.load_p)
        pt.load_p[0] = 0.0
    return pt.composed()


def _affine(cost, grad, d):
    out = cost.copy()
    for k, g in grad.items():
        out = out + (g * d[k] if k == "p0" else (g * d[k]).sum(axis=0))
    return out


def linearization_probe(network, ders, scenario, model, weights, n_points=100, seed=0, n_displacements=5):
    """Compare the p_tilde-route linearization with the composed one.

    Returns ``(max_rel_linearization_gap, max_rel_zeroth_order_gap)``.
    """
    rng = np.random.default_rng(seed)
    at = scenario.ambient_temp
    worst_lin = 0.0
    worst_zero = 0.0
    for _ in range(n_points):
        pt = random_point(network, ders, scenario, rng)
        cost_a, ga = _raw_gradient_via_tilde(pt, weights, model, network, at)
        cost_b, gb = _raw_gradient_complex_step(pt, weights, model, network, at)
        lin = linearize_eens(pt, weights, model, network, at)
        exact = rl.eens_cost(pt, weights, model, network, at)
        gap0 = np.abs(lin.evaluate(pt) - exact) / np.maximum(np.abs(exact), 1e-300)
        worst_zero = max(worst_zero, float(gap0.max()))
        for _ in range(n_displacements):
            d = {k: rng.normal(scale=1e-2, size=np.shape(v)) for k, v in ga.items()}
            la = _affine(cost_a, ga, d)
            lb = _affine(cost_b, gb, d)
            rel = np.abs(la - lb) / np.maximum(np.abs(lb), 1e-300)
            worst_lin = max(worst_lin, float(rel.max()))
        for k in ga:
            den = np.abs(gb[k]).max()
            if den > 0:
                worst_lin = max(worst_lin, float(np.abs(ga[k] - gb[k]).max() / den))
    return worst_lin, worst_zero
