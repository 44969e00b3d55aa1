"""DistFlow dispatch program over a radial feeder with DG, BESS and DR.

Flows are receiving-end quantities: ``fp[i]`` is the real power arriving at
bus ``i`` over line ``i`` and the sending end carries ``fp[i] + R_i l[i]``.
The current equality is relaxed to the rotated cone ``fp^2 + fq^2 <= l v``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, Expr
from .errors import DimensionMismatch, UnknownDerBus
from .grid import DerAssets, Network
from .scenario import Scenario

FIELDS_BUS = ("fp", "fq", "l", "v", "p_dg", "q_dg", "p_bc", "p_bd", "soc", "u_bess", "p_dr", "q_dr", "u_dr")
BINARY_FIELDS = ("u_bess", "u_dr")


@dataclass
class CmOptions:
    terminal_soc: bool = False  # pin SOC at the end of the horizon to soc_init


def build_cm(network: Network, scenario: Scenario, ders: DerAssets, options: CmOptions | None = None) -> ConicProgram:
    """Assemble the cost-only dispatch program."""
    opts = options or CmOptions()
    n, T = network.n_bus, scenario.horizon
    if scenario.load_p.shape != (n, T):
        raise DimensionMismatch(f"load array {scenario.load_p.shape} does not match ({n}, {T})")
    for kind in ("dg", "bess", "dr"):
        for bus in getattr(ders, kind):
            if not 0 < bus < n:
                raise UnknownDerBus(f"{kind} bus {bus} not in network")
    der = scenario.derating
    prog = ConicProgram()
    idx = {f: np.full((n, T), -1, dtype=np.int64) for f in FIELDS_BUS}
    idx["p0"] = np.zeros(T, dtype=np.int64)
    idx["q0"] = np.zeros(T, dtype=np.int64)
    prio = {}
    R, X, S = network.r, network.x, network.s_max
    sub = network.buses[0]

    def new(field_, i, t, lb=-math.inf, ub=math.inf, binary=False):
        e = prog.add_var(f"{field_}[{i},{t}]", lb, ub, binary)
        idx[field_][i, t] = next(iter(e.terms))
        return e

    for t in range(T):
        v = {0: new("v", 0, t, sub.substation_vsq, sub.substation_vsq)}
        fp, fq, ll = {}, {}, {}
        for i in range(1, n):
            b = network.buses[i]
            v[i] = new("v", i, t, b.vsq_min, b.vsq_max)
            fp[i] = new("fp", i, t)
            fq[i] = new("fq", i, t)
            ll[i] = new("l", i, t, 0.0)
        pmax, qmax = sub.substation_p_max, sub.substation_q_max
        p0 = prog.add_var(f"p0[{t}]", -pmax, pmax)
        q0 = prog.add_var(f"q0[{t}]", -qmax, qmax)
        idx["p0"][t] = prog.index[f"p0[{t}]"]
        idx["q0"][t] = prog.index[f"q0[{t}]"]

        inj_p = {i: Expr() for i in range(n)}  # DER injections per bus
        inj_q = {i: Expr() for i in range(n)}
        cost = scenario.price_substation[t] * p0
        for bus, u in ders.dg.items():
            p = new("p_dg", bus, t, u.p_min, u.p_max * der.dg_factor[t])
            q = new("q_dg", bus, t, u.q_min, u.q_max)
            inj_p[bus] = inj_p[bus] + p
            inj_q[bus] = inj_q[bus] + q
            cost = cost + scenario.der_prices["dg"][t] * p
        for bus, u in ders.dr.items():
            z = new("u_dr", bus, t, binary=True)
            prio[next(iter(z.terms))] = 1
            p = new("p_dr", bus, t, min(u.p_min, 0.0), max(u.p_max, 0.0))
            q = new("q_dr", bus, t, min(u.q_min, 0.0), max(u.q_max, 0.0))
            prog.add_le(u.p_min * z - p, 0.0, f"dr_pmin[{bus},{t}]")
            prog.add_le(p - u.p_max * z, 0.0, f"dr_pmax[{bus},{t}]")
            prog.add_le(u.q_min * z - q, 0.0, f"dr_qmin[{bus},{t}]")
            prog.add_le(q - u.q_max * z, 0.0, f"dr_qmax[{bus},{t}]")
            inj_p[bus] = inj_p[bus] + p
            inj_q[bus] = inj_q[bus] + q
            cost = cost + scenario.der_prices["dr"][t] * p
        for bus, u in ders.bess.items():
            z = new("u_bess", bus, t, binary=True)
            prio[next(iter(z.terms))] = 0
            pc = new("p_bc", bus, t, min(u.p_min, 0.0), u.p_max)
            pd = new("p_bd", bus, t, min(u.p_min, 0.0), u.p_max)
            soc = new("soc", bus, t, u.soc_min, u.soc_max)
            prog.add_le(u.p_min * z - pc, 0.0, f"bc_min[{bus},{t}]")
            prog.add_le(pc - u.p_max * z, 0.0, f"bc_max[{bus},{t}]")
            prog.add_le(u.p_min * (1.0 - z) - pd, 0.0, f"bd_min[{bus},{t}]")
            prog.add_le(pd - u.p_max * (1.0 - z), 0.0, f"bd_max[{bus},{t}]")
            scale = u.p_max * der.bess_factor[t]
            prev = Expr(None, u.soc_init) if t == 0 else prog.var(f"soc[{bus},{t - 1}]")
            prog.add_eq(
                soc - (1.0 - u.delta) * prev - (u.eta_c / scale) * pc + (1.0 / (u.eta_d * scale)) * pd,
                0.0,
                f"soc[{bus},{t}]",
            )
            if opts.terminal_soc and t == T - 1:
                prog.add_eq(soc, u.soc_init, f"soc_terminal[{bus}]")
            inj_p[bus] = inj_p[bus] - pc + pd
            cost = cost + scenario.der_prices["bess_charge"][t] * pc + scenario.der_prices["bess_discharge"][t] * pd
        prog.add_objective(cost)

        lf = der.line_factor[t]
        for i in range(1, n):
            a = network.ancestor[i]
            if math.isfinite(S[i]):
                cap = math.sqrt(lf) * S[i]
                prog.add_soc(cap, [fp[i], fq[i]], f"flow_recv[{i},{t}]")
                prog.add_soc(cap, [fp[i] + R[i] * ll[i], fq[i] + X[i] * ll[i]], f"flow_send[{i},{t}]")
            prog.add_eq(
                v[i] + 2.0 * (R[i] * fp[i] + X[i] * fq[i]) + (R[i] ** 2 + X[i] ** 2) * ll[i] - v[a],
                0.0,
                f"vdrop[{i},{t}]",
            )
            prog.add_rsoc(ll[i], v[i], [fp[i], fq[i]], f"current[{i},{t}]")
        for i in range(n):
            b = network.buses[i]
            out_p = Expr()
            out_q = Expr()
            for j in network.children[i]:
                out_p = out_p + fp[j] + R[j] * ll[j]
                out_q = out_q + fq[j] + X[j] * ll[j]
            if i == 0:
                prog.add_eq(p0 - out_p - b.g * v[0], 0.0, f"pbal[0,{t}]")
                prog.add_eq(q0 - out_q - b.b * v[0], 0.0, f"qbal[0,{t}]")
            else:
                prog.add_eq(
                    fp[i] - out_p - scenario.load_p[i, t] + inj_p[i] - b.g * v[i], 0.0, f"pbal[{i},{t}]"
                )
                prog.add_eq(
                    fq[i] - out_q - scenario.load_q[i, t] + inj_q[i] - b.b * v[i], 0.0, f"qbal[{i},{t}]"
                )
    prog.meta.update(idx=idx, branch_priority=prio, n_bus=n, horizon=T, kind="cm")
    return prog


@dataclass
class DispatchSolution:
    n_bus: int
    horizon: int
    arrays: dict = field(default_factory=dict)

    def __getattr__(self, name):
        arrays = self.__dict__.get("arrays", {})
        if name in arrays:
            return arrays[name]
        raise AttributeError(name)

    @property
    def p_tilde(self):
        return self.arrays.get("p_tilde")

    def copy(self) -> "DispatchSolution":
        return DispatchSolution(self.n_bus, self.horizon, {k: v.copy() for k, v in self.arrays.items()})

    def net_injection(self, load_p: np.ndarray) -> np.ndarray:
        """Per-bus net real injection; row 0 is the substation import ``p0``."""
        inj = -load_p + self.p_dg - self.p_bc + self.p_bd + self.p_dr
        inj = inj.copy()
        inj[0] = self.p0
        return inj

    def to_json(self) -> dict:
        return {
            "n_bus": self.n_bus,
            "horizon": self.horizon,
            "arrays": {k: np.asarray(v).tolist() for k, v in self.arrays.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DispatchSolution":
        return cls(doc["n_bus"], doc["horizon"], {k: np.asarray(v, dtype=float) for k, v in doc["arrays"].items()})

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def read_json(cls, path) -> "DispatchSolution":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def extract_solution(prog: ConicProgram, x: np.ndarray) -> DispatchSolution:
    idx = prog.meta["idx"]
    n, T = prog.meta["n_bus"], prog.meta["horizon"]
    arrays = {}
    for name, ix in idx.items():
        vals = np.zeros(ix.shape)
        mask = ix >= 0
        vals[mask] = x[ix[mask]]
        arrays[name] = vals
    for b in BINARY_FIELDS:
        arrays[b] = np.round(arrays[b])
    return DispatchSolution(n, T, arrays)


def solution_vector(prog: ConicProgram, sol: DispatchSolution) -> np.ndarray:
    """Inverse of :func:`extract_solution` on the variables the program declares."""
    x = np.zeros(prog.n)
    for name, ix in prog.meta["idx"].items():
        mask = ix >= 0
        x[ix[mask]] = np.asarray(sol.arrays[name])[mask]
    return x


def operational_cost(sol: DispatchSolution, scenario: Scenario) -> float:
    """Energy purchase plus DER operating cost over the horizon."""
    if sol.horizon != scenario.horizon:
        raise DimensionMismatch(f"solution horizon {sol.horizon} vs scenario {scenario.horizon}")
    pr = scenario.der_prices
    per_t = (
        scenario.price_substation * sol.p0
        + pr["dg"] * sol.p_dg.sum(axis=0)
        + pr["bess_charge"] * sol.p_bc.sum(axis=0)
        + pr["bess_discharge"] * sol.p_bd.sum(axis=0)
        + pr["dr"] * sol.p_dr.sum(axis=0)
    )
    return float(per_t.sum())


@dataclass(frozen=True)
class Violation:
    constraint: str
    bus: int
    t: int
    residual: float


def relaxation_gap(sol: DispatchSolution) -> np.ndarray:
    """``l v - (fp^2 + fq^2)`` per line and step (zero when the cone is tight)."""
    gap = sol.l * sol.v - (sol.fp**2 + sol.fq**2)
    gap[0] = 0.0
    return gap


def feasibility_report(
    sol: DispatchSolution,
    network: Network,
    scenario: Scenario,
    ders: DerAssets,
    tol: float = 1e-6,
) -> list[Violation]:
    """Every constraint whose residual exceeds ``tol``, worst first."""
    n, T = network.n_bus, scenario.horizon
    if sol.n_bus != n or sol.horizon != T:
        raise DimensionMismatch("solution does not match network/scenario")
    out: list[Violation] = []
    R, X, S = network.r, network.x, network.s_max
    der = scenario.derating

    def check(name, i, t, r):
        if r > tol:
            out.append(Violation(name, int(i), int(t), float(r)))

    inj_p = sol.p_dg - sol.p_bc + sol.p_bd + sol.p_dr
    inj_q = sol.q_dg + sol.q_dr
    for t in range(T):
        for i in range(n):
            b = network.buses[i]
            ch = list(network.children[i])
            out_p = sum(sol.fp[j, t] + R[j] * sol.l[j, t] for j in ch)
            out_q = sum(sol.fq[j, t] + X[j] * sol.l[j, t] for j in ch)
            if i == 0:
                check("pbal", 0, t, abs(sol.p0[t] - out_p - b.g * sol.v[0, t]))
                check("qbal", 0, t, abs(sol.q0[t] - out_q - b.b * sol.v[0, t]))
                check("v0", 0, t, abs(sol.v[0, t] - b.substation_vsq))
                check("p0_max", 0, t, abs(sol.p0[t]) - b.substation_p_max)
                check("q0_max", 0, t, abs(sol.q0[t]) - b.substation_q_max)
                continue
            a = network.ancestor[i]
            check(
                "pbal", i, t,
                abs(sol.fp[i, t] - out_p - scenario.load_p[i, t] + inj_p[i, t] - b.g * sol.v[i, t]),
            )
            check(
                "qbal", i, t,
                abs(sol.fq[i, t] - out_q - scenario.load_q[i, t] + inj_q[i, t] - b.b * sol.v[i, t]),
            )
            check(
                "vdrop", i, t,
                abs(
                    sol.v[i, t]
                    + 2 * (R[i] * sol.fp[i, t] + X[i] * sol.fq[i, t])
                    + (R[i] ** 2 + X[i] ** 2) * sol.l[i, t]
                    - sol.v[a, t]
                ),
            )
            check("current", i, t, sol.fp[i, t] ** 2 + sol.fq[i, t] ** 2 - sol.l[i, t] * sol.v[i, t])
            check("l_nonneg", i, t, -sol.l[i, t])
            check("vmin", i, t, b.vsq_min - sol.v[i, t])
            check("vmax", i, t, sol.v[i, t] - b.vsq_max)
            if math.isfinite(S[i]):
                cap2 = der.line_factor[t] * S[i] ** 2
                check("flow_recv", i, t, sol.fp[i, t] ** 2 + sol.fq[i, t] ** 2 - cap2)
                check(
                    "flow_send", i, t,
                    (sol.fp[i, t] + R[i] * sol.l[i, t]) ** 2 + (sol.fq[i, t] + X[i] * sol.l[i, t]) ** 2 - cap2,
                )
        for bus, u in ders.dg.items():
            check("dg_pmin", bus, t, u.p_min - sol.p_dg[bus, t])
            check("dg_pmax", bus, t, sol.p_dg[bus, t] - u.p_max * der.dg_factor[t])
            check("dg_qmin", bus, t, u.q_min - sol.q_dg[bus, t])
            check("dg_qmax", bus, t, sol.q_dg[bus, t] - u.q_max)
        for bus, u in ders.dr.items():
            z = sol.u_dr[bus, t]
            check("dr_binary", bus, t, abs(z - round(z)))
            check("dr_pmin", bus, t, u.p_min * z - sol.p_dr[bus, t])
            check("dr_pmax", bus, t, sol.p_dr[bus, t] - u.p_max * z)
            check("dr_qmin", bus, t, u.q_min * z - sol.q_dr[bus, t])
            check("dr_qmax", bus, t, sol.q_dr[bus, t] - u.q_max * z)
        for bus, u in ders.bess.items():
            z = sol.u_bess[bus, t]
            check("bess_binary", bus, t, abs(z - round(z)))
            check("bc_min", bus, t, u.p_min * z - sol.p_bc[bus, t])
            check("bc_max", bus, t, sol.p_bc[bus, t] - u.p_max * z)
            check("bd_min", bus, t, u.p_min * (1 - z) - sol.p_bd[bus, t])
            check("bd_max", bus, t, sol.p_bd[bus, t] - u.p_max * (1 - z))
            check("soc_min", bus, t, u.soc_min - sol.soc[bus, t])
            check("soc_max", bus, t, sol.soc[bus, t] - u.soc_max)
            scale = u.p_max * der.bess_factor[t]
            prev = u.soc_init if t == 0 else sol.soc[bus, t - 1]
            check(
                "soc", bus, t,
                abs(
                    sol.soc[bus, t]
                    - (1 - u.delta) * prev
                    - u.eta_c * sol.p_bc[bus, t] / scale
                    + sol.p_bd[bus, t] / (u.eta_d * scale)
                ),
            )
    out.sort(key=lambda v: -v.residual)
    return out


def write_matrix_csv(path, mat: np.ndarray, row_label: str = "component", rows=None) -> None:
    """Component x time matrix with a header of step indices."""
    mat = np.atleast_2d(mat)
    rows = range(mat.shape[0]) if rows is None else rows
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([row_label] + [f"t{t}" for t in range(mat.shape[1])])
        for r, vals in zip(rows, mat):
            w.writerow([r] + [repr(float(v)) for v in vals])


def read_matrix_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    labels = [r[0] for r in rows[1:]]
    return labels, np.array([[float(v) for v in r[1:]] for r in rows[1:]])
