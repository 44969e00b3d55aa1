"""Time the compiled kernels against the numpy fallback.

Run ``python benchmarks/bench_kernels.py [--repeat N]``. Inputs come from the
bundled 33-bus case at its cost-only dispatch, and from a 2928-row weighted
logistic design of the size the estimator sees.
"""

import argparse
import timeit

import numpy as np

from relgrid import kernels, opf, reliability as rl
from relgrid.cli import data_path
from relgrid.grid import load_case
from relgrid.scenario import load_scenario
from relgrid.solve import solve_misocp


def eens_inputs():
    net, ders = load_case(data_path("case33.json"))
    sc = load_scenario(data_path("scenario33.json"), net)
    model = rl.load_coeffs(data_path("coeffs33.csv"), net)
    prog = opf.build_cm(net, sc, ders)
    sol = opf.extract_solution(prog, solve_misocp(prog).x)
    pt = rl.point_from_solution(sol, sc.load_p)
    w = rl.EensWeights.from_mapping(net.n_bus, sc.shed_weights)
    om = rl.omega(pt, w)
    return (pt.p_tilde, pt.l, om, sc.ambient_temp, model, net.parent, np.asarray(net.order))


def logistic_inputs(n=2928, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.uniform(0, 1, n), rng.uniform(10, 35, n)])
    y = (rng.random(n) < 0.1).astype(float)
    w = rng.integers(0, 500, n).astype(float)
    mu = np.array([-12.0, 0.3, 0.3])
    prec = np.full(3, 0.01)
    return X, y, w, mu, prec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    impls = kernels.implementations()
    e_args = eens_inputs()
    X, y, w, mu, prec = logistic_inputs()
    beta = mu + 0.01
    _, g = kernels.logpost(beta, X, y, w, mu, prec)
    mom = np.ones(3)
    cases = {
        "eens_terms (33 bus x 12)": (lambda m: kernels.eens_terms(*e_args, impl=m), 200),
        "logpost (2928 rows)": (lambda m: kernels.logpost(beta, X, y, w, mu, prec, impl=m), 200),
        "leapfrog (20 steps)": (lambda m: kernels.leapfrog(beta, mom, g, 1e-3, 20, X, y, w, mu, prec, impl=m), 20),
    }
    names = list(impls)
    print(f"{'kernel':28s}" + "".join(f"{n + ' us/call':>18s}" for n in names) + ("    speedup" if len(names) > 1 else ""))
    for label, (fn, number) in cases.items():
        times = {}
        for name, m in impls.items():
            t = min(timeit.repeat(lambda: fn(m), number=number, repeat=args.repeat)) / number
            times[name] = t * 1e6
        line = f"{label:28s}" + "".join(f"{times[n]:18.1f}" for n in names)
        if "python" in times and "cython" in times:
            line += f"   {times['python'] / times['cython']:8.1f}x"
        print(line)
    if "cython" not in impls:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
