"""Command-line entry point: ``relgrid <command> [options]``.

Exit codes: 0 success, 1 solver failure, 2 invalid input, 3 iteration limit.
Every command that writes a run directory leaves one ``manifest.json`` there
with input digests, seed, options, version, wall time and status.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from importlib import resources

import numpy as np

from . import __version__, kernels, opf, reliability as rl, scp
from .errors import InputError, IterationLimit, RelgridError, SolverError, SubproblemInfeasible
from .grid import load_case
from .scenario import WEIGHT_KINDS, Scenario, load_scenario
from .solve import BnbOptions, solve_misocp

EXIT_OK, EXIT_SOLVER, EXIT_INPUT, EXIT_ITER = 0, 1, 2, 3


def data_path(name: str) -> str:
    return str(resources.files("relgrid") / "data" / name)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, InputError):
        return EXIT_INPUT
    if isinstance(exc, IterationLimit):
        return EXIT_ITER
    return EXIT_SOLVER


@dataclasses.dataclass
class RunManifest:
    command: str
    inputs: dict
    seed: int
    options: dict
    version: str = __version__
    wall_time: float = 0.0
    status: str = "running"
    results: dict = dataclasses.field(default_factory=dict)
    environment: dict = dataclasses.field(default_factory=dict)

    def write(self, outdir) -> None:
        with open(os.path.join(outdir, "manifest.json"), "w") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


# -- input loading -------------------------------------------------------------


def _inputs(args, need_coeffs=True):
    try:
        return _load_inputs(args, need_coeffs)
    except (OSError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise InputError(f"cannot read input: {exc}") from exc


def _load_inputs(args, need_coeffs):
    case = args.case or data_path("case33.json")
    scen = args.scenario or data_path("scenario33.json")
    network, ders = load_case(case)
    ders.check(network)
    scenario = load_scenario(scen, network)
    paths = {"case": case, "scenario": scen}
    with open(scen) as fh:
        sdoc = json.load(fh)
    for key in ("load_csv", "temperature_csv"):
        if key in sdoc:
            p = sdoc[key]
            paths[key] = p if os.path.isabs(p) else os.path.join(os.path.dirname(os.path.abspath(scen)), p)
    model = None
    if need_coeffs:
        coeffs = args.coeffs or data_path("coeffs33.csv")
        model = rl.load_coeffs(coeffs, network)
        paths["coeffs"] = coeffs
    digests = {k: {"path": os.path.abspath(v), "sha256": sha256(v)} for k, v in paths.items()}
    return network, ders, scenario, model, digests


def parse_weights(text: str | None, scenario: Scenario) -> dict:
    """``None`` keeps the scenario's weights; a number scales them; ``kind=value,...`` overrides."""
    base = dict(scenario.shed_weights)
    if text is None:
        return base
    text = text.strip()
    try:
        s = float(text)
    except ValueError:
        pass
    else:
        return {k: v * s for k, v in base.items()}
    out = dict(base)
    for part in text.split(","):
        if "=" not in part:
            raise InputError(f"bad --eens-weights item {part!r}")
        k, v = part.split("=", 1)
        k = k.strip()
        if k not in WEIGHT_KINDS:
            raise InputError(f"unknown weight kind {k!r}; expected one of {WEIGHT_KINDS}")
        out[k] = float(v)
    return out


def _outdir(args) -> str:
    out = args.out or "run"
    os.makedirs(out, exist_ok=True)
    return out


# -- artifacts -----------------------------------------------------------------


def write_dispatch(outdir, tag, sol: opf.DispatchSolution, scenario, model, network):
    """Solution JSON, voltage/current/DER matrices and failure probabilities."""
    sol.write_json(os.path.join(outdir, f"solution_{tag}.json"))
    opf.write_matrix_csv(os.path.join(outdir, f"{tag}_voltage_sq.csv"), sol.v, "bus")
    opf.write_matrix_csv(os.path.join(outdir, f"{tag}_current_sq.csv"), sol.l[1:], "line", range(1, network.n_bus))
    for name in ("p_dg", "q_dg", "p_bc", "p_bd", "soc", "p_dr", "q_dr"):
        opf.write_matrix_csv(os.path.join(outdir, f"{tag}_{name}.csv"), getattr(sol, name), "bus")
    opf.write_matrix_csv(os.path.join(outdir, f"{tag}_substation.csv"), np.vstack([sol.p0, sol.q0]), "quantity", ["p0", "q0"])
    if model is not None:
        pt = rl.point_from_solution(sol, scenario.load_p)
        pb, pl = rl.failure_probabilities(pt, model, scenario.ambient_temp)
        opf.write_matrix_csv(os.path.join(outdir, f"{tag}_bus_failure_prob.csv"), pb, "bus")
        opf.write_matrix_csv(os.path.join(outdir, f"{tag}_line_failure_prob.csv"), pl[1:], "line", range(1, network.n_bus))


def day_variants(scenario: Scenario, days: int, seed: int):
    """The bundled day plus ``days-1`` seeded perturbations of load level and temperature."""
    rng = np.random.default_rng(seed)
    out = [scenario]
    lo, hi = scenario.temp_range
    for _ in range(days - 1):
        f = rng.uniform(0.85, 1.15)
        dt = rng.normal(0.0, 3.0)
        out.append(dataclasses.replace(
            scenario,
            load_p=scenario.load_p * f,
            load_q=scenario.load_q * f,
            ambient_temp=np.clip(scenario.ambient_temp + dt, lo, hi),
        ))
    return out


def write_covariates(outdir, rows_bus, rows_line, temps, n_bus):
    """``covariates_bus.csv`` (|net injection|) and ``covariates_line.csv`` (l), one row per step."""
    for name, rows, first in (("covariates_bus.csv", rows_bus, 0), ("covariates_line.csv", rows_line, 1)):
        with open(os.path.join(outdir, name), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["day", "step", "temp_c"] + [f"c{i}" for i in range(first, n_bus)])
            for ((d, t), vals), at in zip(rows.items(), temps):
                w.writerow([d, t, repr(float(at))] + [repr(float(v)) for v in vals[first:]])


def read_covariates(path):
    """Inverse of :func:`write_covariates`: (component ids, values (rows, k), temps (rows,))."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        body = [r for r in rd if r]
    if not body:
        raise InputError(f"{path} has no rows")
    if header[:3] != ["day", "step", "temp_c"]:
        raise InputError(f"{path}: expected day,step,temp_c,... header")
    ids = [int(h[1:]) for h in header[3:]]
    vals = np.array([[float(v) for v in r[3:]] for r in body])
    temps = np.array([float(r[2]) for r in body])
    return ids, vals, temps


# -- commands ------------------------------------------------------------------


def cmd_validate(args):
    network, ders, scenario, model, digests = _inputs(args, need_coeffs=args.coeffs is not None)
    report = {
        "status": "ok",
        "n_bus": network.n_bus,
        "horizon": scenario.horizon,
        "n_dg": len(ders.dg),
        "n_bess": len(ders.bess),
        "n_dr": len(ders.dr),
        "inputs": digests,
    }
    _emit(args, report, f"ok: {network.n_bus} buses, {scenario.horizon} steps")
    return EXIT_OK


def _solve_cm(network, scenario, ders):
    prog = opf.build_cm(network, scenario, ders)
    res = solve_misocp(prog, BnbOptions())
    if not res.ok:
        raise SolverError(f"cost-only model: {res.status} ({res.info})")
    return prog, res


def cmd_run_cm(args):
    t0 = time.perf_counter()
    network, ders, scenario, model, digests = _inputs(args)
    outdir = _outdir(args)
    man = RunManifest("run-cm", digests, args.seed, {"days": args.days, "dump_covariates": args.dump_covariates},
                      environment=_environment())
    try:
        prog, res = _solve_cm(network, scenario, ders)
        sol = opf.extract_solution(prog, res.x)
        write_dispatch(outdir, "cm", sol, scenario, model, network)
        w = rl.EensWeights.from_mapping(network.n_bus, scenario.shed_weights)
        op, ee, _ = scp.true_objective(sol, scenario, w, model, network)
        viol = opf.feasibility_report(sol, network, scenario, ders)
        man.results = {
            "objective": op,
            "eens_cost": ee,
            "bnb_nodes": res.info.get("nodes"),
            "max_relaxation_gap": float(np.abs(opf.relaxation_gap(sol)).max()),
            "violations": len(viol),
        }
        if args.dump_covariates:
            rows_b, rows_l, temps = {}, {}, []
            for d, sc in enumerate(day_variants(scenario, args.days, args.seed)):
                if d == 0:
                    s = sol
                else:
                    p_d, r_d = _solve_cm(network, sc, ders)
                    s = opf.extract_solution(p_d, r_d.x)
                inj = np.abs(s.net_injection(sc.load_p))
                for t in range(sc.horizon):
                    rows_b[(d, t)] = inj[:, t]
                    rows_l[(d, t)] = s.l[:, t]
                    temps.append(sc.ambient_temp[t])
            write_covariates(outdir, rows_b, rows_l, temps, network.n_bus)
            man.results["covariate_rows"] = len(temps)
        man.status = "ok"
        _emit(args, man.results, f"CM objective {op:.4f}  EENS cost {ee:.4f}")
        return EXIT_OK
    except RelgridError as exc:
        man.status = type(exc).__name__
        raise
    finally:
        man.wall_time = time.perf_counter() - t0
        man.write(outdir)


def cmd_run_crm(args):
    t0 = time.perf_counter()
    network, ders, scenario, model, digests = _inputs(args)
    outdir = _outdir(args)
    weights_map = parse_weights(args.eens_weights, scenario)
    opts = scp.ScpOptions(eps1=args.eps1, eps2=args.eps2, eps3=args.eps3, k_max=args.kmax,
                          refine_binaries=args.refine_binaries)
    man = RunManifest("run-crm", digests, args.seed,
                      {**dataclasses.asdict(opts), "eens_weights": weights_map}, environment=_environment())
    w = rl.EensWeights.from_mapping(network.n_bus, weights_map)
    trace_path = os.path.join(outdir, "trace.csv")
    rows = []

    def flush(row):
        rows.append(row)
        scp.ScpTrace(list(rows)).write_csv(trace_path)
        if not args.json:
            m = [("-" if v is None else f"{v:.3e}") for v in (row.metric1, row.metric2, row.metric3)]
            print(f"k={row.k:3d}  CRM={row.obj_crm:.4f}  CRM-APPX={row.obj_crm_appx:.4f}  "
                  f"eps=({', '.join(m)})  {row.seconds:.2f}s", flush=True)

    try:
        cm = _solve_cm(network, scenario, ders)
        res = scp.solve_crm(network, scenario, ders, model, w, opts, cm=cm, on_iteration=flush)
        res.trace.write_csv(trace_path)
        write_dispatch(outdir, "cm", res.cm_solution, scenario, model, network)
        write_dispatch(outdir, "crm", res.solution, scenario, model, network)
        op_cm, ee_cm, _ = scp.true_objective(res.cm_solution, scenario, w, model, network)
        op, ee, tot = scp.true_objective(res.solution, scenario, w, model, network)
        man.results = {
            "objective_cm": res.obj_cm,
            "objective_crm": tot,
            "operational_cost_cm": op_cm,
            "operational_cost_crm": op,
            "eens_cost_at_cm": ee_cm,
            "eens_cost_at_crm": ee,
            "eens_reduction": (1.0 - ee / ee_cm) if ee_cm > 0 else 0.0,
            "operational_increase": op / op_cm - 1.0,
            "iterations": len(res.trace.rows) - 1,
            "termination": res.trace.reason,
        }
        man.status = "ok"
        _emit(args, man.results, f"CRM objective {tot:.4f} ({res.trace.reason})")
        return EXIT_OK
    except IterationLimit as exc:
        exc.trace.write_csv(trace_path)
        if exc.solution is not None:
            write_dispatch(outdir, "crm", exc.solution, scenario, model, network)
        man.status = "iteration_limit"
        raise
    except SubproblemInfeasible as exc:
        if exc.iterate is not None:
            write_dispatch(outdir, "crm_last", exc.iterate, scenario, model, network)
        man.status = "subproblem_failure"
        raise
    except RelgridError as exc:
        man.status = type(exc).__name__
        raise
    finally:
        man.wall_time = time.perf_counter() - t0
        man.write(outdir)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RELGRID_THREADS", "1")))
    except ValueError as exc:
        raise InputError("RELGRID_THREADS must be an integer") from exc


def cmd_estimate(args):
    from . import estimate as est

    t0 = time.perf_counter()
    outdir = _outdir(args)
    src = args.covariates
    bus_path = os.path.join(src, "covariates_bus.csv")
    line_path = os.path.join(src, "covariates_line.csv")
    ids_b, cov_b, temps = read_covariates(bus_path)
    ids_l, cov_l, temps_l = read_covariates(line_path)
    if not np.array_equal(temps, temps_l) or ids_b[0] != 0 or ids_l != ids_b[1:]:
        raise InputError("bus and line covariate files do not line up")
    line_full = np.column_stack([np.zeros(cov_l.shape[0]), cov_l])
    hcfg = est.HmcConfig(total_iters=args.iters, burn_in=args.burn_in, leapfrog_steps=args.leapfrog,
                         prior_sd=args.prior_sd, seed=args.seed)
    cfg = est.EstimateConfig(n_boot=args.n_boot, hmc=hcfg, likelihood=args.likelihood, mass=args.mass,
                             fallback=not args.strict, seed=args.seed)
    inputs = {k: {"path": os.path.abspath(p), "sha256": sha256(p)} for k, p in (("bus", bus_path), ("line", line_path))}
    man = RunManifest("estimate", inputs, args.seed,
                      {**dataclasses.asdict(cfg), "workers": _threads()}, environment=_environment())
    try:
        model, results = est.estimate_model(cov_b, line_full, temps, cfg, workers=_threads())
        rl.write_coeffs(os.path.join(outdir, "coeffs.csv"), model)
        with open(os.path.join(outdir, "estimates.json"), "w") as fh:
            json.dump([dataclasses.asdict(r) for r in results], fh, indent=1)
        fell_back = [f"{r.kind} {r.component}" for r in results if r.error]
        fitted = [r.accept_rate for r in results if not r.error]
        man.results = {
            "components": len(results),
            "baseline_fallback": fell_back,
            "mean_accept": float(np.mean(fitted)) if fitted else None,
        }
        man.status = "partial" if fell_back else "ok"
        if fell_back and not args.json:
            print(f"warning: baseline coefficients for {len(fell_back)} components: {', '.join(fell_back)}", file=sys.stderr)
        _emit(args, man.results, f"estimated {len(results)} components -> {os.path.join(outdir, 'coeffs.csv')}")
        return EXIT_OK
    except RelgridError as exc:
        man.status = type(exc).__name__
        raise
    finally:
        man.wall_time = time.perf_counter() - t0
        man.write(outdir)


def cmd_probe(args):
    if args.which == "hessian":
        a = rl.hessian_probe(x=(0.1, 0.4))
        b = rl.hessian_probe(x=(0.4, 0.1))
        ok = a < 0 < b
        report = {"xHx[0.1,0.4]": a, "xHx[0.4,0.1]": b, "pass": ok}
        text = f"x=[0.1,0.4]: {a:+.6e}\nx=[0.4,0.1]: {b:+.6e}\n{'PASS' if ok else 'FAIL'}"
    elif args.which == "hazard-gap":
        G = np.array([1e-4, 1e-3, 1e-2, 0.02, 0.05, 0.1])
        gap = rl.hazard_gap(G)
        ok = bool(np.all(gap <= G**2))
        report = {"G": G.tolist(), "gap": gap.tolist(), "pass": ok}
        text = "\n".join(f"G={g:.4g}  gap={v:.6e}  G^2={g * g:.6e}" for g, v in zip(G, gap))
        text += f"\n{'PASS' if ok else 'FAIL'}"
    else:
        network, ders, scenario, model, _ = _inputs(args)
        w = rl.EensWeights.from_mapping(network.n_bus, scenario.shed_weights)
        lin, zero = scp.linearization_probe(network, ders, scenario, model, w, n_points=args.points, seed=args.seed)
        ok = lin <= 1e-9 and zero <= 1e-10
        report = {"max_linearization_gap": lin, "max_zeroth_order_gap": zero, "points": args.points, "pass": ok}
        text = f"linearization gap {lin:.3e}\nzeroth-order gap {zero:.3e}\n{'PASS' if ok else 'FAIL'}"
    _emit(args, report, text)
    return EXIT_OK


# -- plumbing ------------------------------------------------------------------


def _environment():
    return {"kernels": kernels.BACKEND, "python": platform.python_version(), "numpy": np.__version__}


def _emit(args, doc, text):
    if args.json:
        print(json.dumps(doc, default=_jsonable, sort_keys=True))
    else:
        print(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relgrid", description="Reliability-aware distribution-grid dispatch.")
    p.add_argument("--version", action="version", version=f"relgrid {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, coeffs=True):
        sp.add_argument("--case", help="network JSON (default: bundled 33-bus case)")
        sp.add_argument("--scenario", help="scenario JSON (default: bundled)")
        if coeffs:
            sp.add_argument("--coeffs", help="failure-coefficient CSV (default: bundled)")
        sp.add_argument("--out", help="run directory (default: ./run)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--json", action="store_true", help="machine-readable output")

    sp = sub.add_parser("validate", help="check case and scenario files")
    common(sp)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("run-cm", help="solve the cost-only model")
    common(sp)
    sp.add_argument("--dump-covariates", action="store_true", help="write estimation covariates")
    sp.add_argument("--days", type=int, default=1, help="days of covariates (extra days are seeded perturbations)")
    sp.set_defaults(func=cmd_run_cm)

    sp = sub.add_parser("run-crm", help="solve the cost-and-reliability model")
    common(sp)
    d = scp.ScpOptions()
    sp.add_argument("--eps1", type=float, default=d.eps1)
    sp.add_argument("--eps2", type=float, default=d.eps2)
    sp.add_argument("--eps3", type=float, default=d.eps3)
    sp.add_argument("--kmax", type=int, default=d.k_max)
    sp.add_argument("--refine-binaries", action="store_true", help="re-optimize binaries in every subproblem")
    sp.add_argument("--eens-weights", help="scale factor, or kind=value,... overrides")
    sp.set_defaults(func=cmd_run_crm)

    sp = sub.add_parser("estimate", help="estimate failure coefficients from covariates")
    sp.add_argument("--covariates", required=True, help="directory holding covariates_bus.csv and covariates_line.csv")
    sp.add_argument("--out", help="output directory (default: ./run)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--n-boot", type=int, default=10_000_000)
    sp.add_argument("--iters", type=int, default=100_000)
    sp.add_argument("--burn-in", type=int, default=20_000)
    sp.add_argument("--leapfrog", type=int, default=20)
    sp.add_argument("--prior-sd", type=float, default=10.0)
    sp.add_argument("--mass", choices=("mle", "identity"), default="mle")
    sp.add_argument("--likelihood", choices=("expanded", "sampling"), default="expanded")
    sp.add_argument("--strict", action="store_true", help="fail instead of falling back to baseline coefficients")
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("probe", help="numerical checks")
    sp.add_argument("which", choices=("hessian", "hazard-gap", "linearization"))
    common(sp)
    sp.add_argument("--points", type=int, default=100)
    sp.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "days", 1) < 1:
        parser.error("--days must be at least 1")
    try:
        return args.func(args)
    except RelgridError as exc:
        code = exit_code(exc)
        doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
        if args.json:
            print(json.dumps(doc))
        else:
            print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
