"""Solving conic programs: an interior-point backend and branch-and-bound.

Two primal-dual interior-point backends sit behind one contract: Clarabel
(default, sparse KKT factorization) and cvxopt's cone solvers. Variables whose
bounds coincide are substituted out before the solve, which is how
branch-and-bound fixes binaries.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .conic import ConicProgram
from .errors import Infeasible, NodeLimitNoIncumbent, NumericalFailure

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
ITERATION_LIMIT = "IterationLimit"
NUMERICAL_FAILURE = "NumericalFailure"


@dataclass
class SolveResult:
    status: str
    x: np.ndarray | None
    objective: float
    residuals: dict = field(default_factory=dict)
    wall_time: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL

    @property
    def primal_residual(self) -> float:
        return max(self.residuals.values(), default=0.0)


@dataclass
class BnbOptions:
    abs_gap: float = 1e-6
    rel_gap: float = 1e-6
    node_limit: int = 10_000
    int_tol: float = 1e-6
    branching: str = "most-fractional"

    def __post_init__(self):
        if not (self.abs_gap > 0 and self.rel_gap > 0):
            raise ValueError("gaps must be positive")


@dataclass
class SolverOptions:
    feastol: float = 1e-9
    abstol: float = 1e-9
    reltol: float = 1e-10
    maxiters: int = 200
    accept_tol: float = 1e-6  # residual bound for accepting an inexact finish
    backend: str = "clarabel"


def _presolve(prog: ConicProgram, lb, ub, accept_tol):
    """Substitute fixed variables and stack constraints as ``A x = b``,
    ``G x + s = h`` with ``s`` in (orthant, cones...)."""
    m = prog.compile()
    if (lb > ub + 1e-12).any():
        return None, "crossed bounds"
    fixed = np.isfinite(lb) & np.isfinite(ub) & (ub - lb <= 0)
    free = np.flatnonzero(~fixed)
    # fixed variables take their value; free ones are shifted by their
    # proximal center so the backend works with x = xf + y around y = 0
    xf = np.where(fixed, lb, m.r)
    nf = free.size

    A = m.A.tocsc()
    b = m.b - A @ xf
    A = A[:, free].tocsr()
    keep = np.diff(A.indptr) > 0
    if np.abs(b[~keep]).max(initial=0.0) > accept_tol:
        return None, "fixed values violate an equality"
    A, b = A[keep], b[keep]

    G = m.G.tocsc()
    h = m.h - G @ xf
    G = G[:, free].tocsr()
    keep = np.diff(G.indptr) > 0
    if (h[~keep] < -accept_tol).any():
        return None, "fixed values violate an inequality"
    G, h = G[keep], h[keep]

    lbf, ubf = lb[free] - xf[free], ub[free] - xf[free]
    lo = np.flatnonzero(np.isfinite(lbf))
    hi = np.flatnonzero(np.isfinite(ubf))
    Bl = sp.csr_matrix((-np.ones(lo.size), (np.arange(lo.size), lo)), shape=(lo.size, nf))
    Bu = sp.csr_matrix((np.ones(hi.size), (np.arange(hi.size), hi)), shape=(hi.size, nf))
    lin_G = sp.vstack([G, Bl, Bu]).tocsr()
    lin_h = np.concatenate([h, -lbf[lo], ubf[hi]])

    C = m.C.tocsc()
    d = m.d + C @ xf
    C = C[:, free].tocsr()
    blocks, hs, sizes = [], [], []
    pos = 0
    for size in m.cone_sizes:
        blk = C[pos : pos + size]
        dd = d[pos : pos + size]
        pos += size
        if blk.nnz == 0:
            if np.linalg.norm(dd[1:]) - dd[0] > accept_tol:
                return None, "constant cone violated"
            continue
        blocks.append(-blk)
        hs.append(dd)
        sizes.append(size)
    return (
        dict(
            free=free,
            xf=xf,
            c=m.c[free].copy(),
            q=m.q[free].copy(),
            const=m.c0 + float(m.c @ xf) + float(m.q @ (xf - m.r) ** 2),
            A=A,
            b=b,
            G=sp.vstack([lin_G] + blocks).tocsr() if blocks else lin_G,
            h=np.concatenate([lin_h] + hs) if hs else lin_h,
            n_lin=lin_G.shape[0],
            sizes=sizes,
        ),
        "",
    )


def _to_cvx(m: sp.spmatrix):
    from cvxopt import spmatrix

    coo = sp.coo_matrix(m)
    return spmatrix(coo.data.tolist(), coo.row.tolist(), coo.col.tolist(), size=coo.shape)


def _backend_cvxopt(pre, opts):
    from cvxopt import matrix, solvers, spdiag

    solvers.options.update(
        show_progress=False,
        feastol=opts.feastol,
        abstol=opts.abstol,
        reltol=opts.reltol,
        maxiters=opts.maxiters,
    )
    dims = {"l": pre["n_lin"], "q": pre["sizes"], "s": []}
    args = dict(G=_to_cvx(pre["G"]), h=matrix(pre["h"]), dims=dims)
    if pre["A"].shape[0]:
        args.update(A=_to_cvx(pre["A"]), b=matrix(pre["b"]))
    try:
        if np.any(pre["q"]):
            sol = solvers.coneqp(spdiag(matrix(2.0 * pre["q"])), matrix(pre["c"]), **args)
        else:
            sol = solvers.conelp(matrix(pre["c"]), **args)
    except (ValueError, ArithmeticError) as exc:
        return NUMERICAL_FAILURE, None, {"reason": str(exc)}
    status = sol["status"]
    info = {"backend": "cvxopt", "raw_status": status, "iterations": sol.get("iterations"),
            "relative_gap": sol.get("relative gap")}
    x = None if sol["x"] is None else np.array(sol["x"]).ravel()
    if status == "primal infeasible":
        return INFEASIBLE, None, info
    if status == "optimal":
        return OPTIMAL, x, info
    if status == "dual infeasible" or x is None:
        return NUMERICAL_FAILURE, None, info
    return "unknown", x, info


def _backend_clarabel(pre, opts):
    import clarabel

    nf = pre["free"].size
    A = sp.vstack([pre["A"], pre["G"]]).tocsc()
    b = np.concatenate([pre["b"], pre["h"]])
    P = sp.diags(2.0 * pre["q"], format="csc") if np.any(pre["q"]) else sp.csc_matrix((nf, nf))
    cones = []
    if pre["A"].shape[0]:
        cones.append(clarabel.ZeroConeT(pre["A"].shape[0]))
    if pre["n_lin"]:
        cones.append(clarabel.NonnegativeConeT(pre["n_lin"]))
    cones.extend(clarabel.SecondOrderConeT(s) for s in pre["sizes"])
    st = clarabel.DefaultSettings()
    st.verbose = False
    st.tol_gap_abs = opts.abstol
    st.tol_gap_rel = opts.reltol
    st.tol_feas = opts.feastol
    st.max_iter = opts.maxiters
    sol = clarabel.DefaultSolver(P, pre["c"], A, b, cones, st).solve()
    status = str(sol.status)
    info = {"backend": "clarabel", "raw_status": status, "iterations": sol.iterations}
    x = np.asarray(sol.x, dtype=float)
    if status.endswith("PrimalInfeasible") or status.endswith("AlmostPrimalInfeasible"):
        return INFEASIBLE, None, info
    if status.endswith("Solved") and not status.endswith("AlmostSolved"):
        return OPTIMAL, x, info
    if status.endswith("DualInfeasible") or not np.all(np.isfinite(x)):
        return NUMERICAL_FAILURE, None, info
    info["relative_gap"] = 0.0 if status.endswith("AlmostSolved") else None
    return "unknown", x, info


BACKENDS = {"clarabel": _backend_clarabel, "cvxopt": _backend_cvxopt}


def solve_continuous(
    prog: ConicProgram,
    lb=None,
    ub=None,
    options: SolverOptions | None = None,
    x0=None,
) -> SolveResult:
    """Solve the continuous program (binaries treated as bounded reals).

    ``x0`` is accepted as a warm-start hint; the interior-point backend does
    not use it.
    """
    opts = options or SolverOptions()
    lb = np.asarray(prog.lb if lb is None else lb, dtype=float)
    ub = np.asarray(prog.ub if ub is None else ub, dtype=float)
    t0 = time.perf_counter()
    pre, why = _presolve(prog, lb, ub, opts.accept_tol)
    if pre is None:
        return SolveResult(INFEASIBLE, None, math.nan, {}, time.perf_counter() - t0, {"reason": why})
    status, xs, info = BACKENDS[opts.backend](pre, opts)
    wall = time.perf_counter() - t0
    x = None
    if xs is not None:
        x = pre["xf"].copy()
        x[pre["free"]] += xs
    if x is None:
        return SolveResult(status, None, math.nan, {}, wall, info)
    res = prog.residuals(x, lb, ub)
    obj = prog.objective_value(x)
    if status == "unknown":
        # the IPM stalled; accept only if the point is feasible and near-optimal
        gap = info.get("relative_gap")
        if max(res.values()) <= opts.accept_tol and gap is not None and abs(gap) <= 1e-6:
            status = OPTIMAL
            info["inexact"] = True
        else:
            status = NUMERICAL_FAILURE
    elif max(res.values()) > opts.accept_tol:
        status = NUMERICAL_FAILURE
    return SolveResult(status, x, obj, res, wall, info)


def _fractional(x, bins, tol):
    v = x[bins]
    f = np.abs(v - np.round(v))
    return bins[f > tol], f[f > tol]


def solve_misocp(
    prog: ConicProgram,
    options: BnbOptions | None = None,
    solver_options: SolverOptions | None = None,
    lb=None,
    ub=None,
) -> SolveResult:
    """Best-bound branch-and-bound over ``prog.binary``.

    Branching picks the most fractional binary among the highest-priority
    class given by ``prog.meta['branch_priority']`` (lower value first).
    """
    opts = options or BnbOptions()
    lb = np.asarray(prog.lb if lb is None else lb, dtype=float).copy()
    ub = np.asarray(prog.ub if ub is None else ub, dtype=float).copy()
    bins = np.asarray(prog.binary, dtype=np.int64)
    open_bins = bins[lb[bins] < ub[bins]]
    t0 = time.perf_counter()
    if open_bins.size == 0:
        return solve_continuous(prog, lb, ub, solver_options)

    prio = prog.meta.get("branch_priority", {})
    prio_arr = np.array([prio.get(int(i), 0) for i in range(prog.n)])

    def relax(lo, hi):
        return solve_continuous(prog, lo, hi, solver_options)

    root = relax(lb, ub)
    if root.status == INFEASIBLE:
        raise Infeasible("root relaxation is infeasible")
    if not root.ok:
        raise NumericalFailure(f"root relaxation failed: {root.info}")

    incumbent: SolveResult | None = None
    inc_obj = math.inf
    nodes = 0
    counter = 0
    history = []

    def gap_tol(v):
        return max(opts.abs_gap, opts.rel_gap * abs(v))

    def offer(res: SolveResult):
        nonlocal incumbent, inc_obj
        if res.ok and res.objective < inc_obj:
            x = res.x.copy()
            x[bins] = np.round(x[bins])
            incumbent, inc_obj = res, res.objective
            incumbent.x = x
            history.append(res.objective)

    def round_fix(res: SolveResult, lo, hi):
        lo2, hi2 = lo.copy(), hi.copy()
        r = np.round(res.x[bins])
        lo2[bins] = r
        hi2[bins] = r
        return relax(lo2, hi2)

    heap = [(root.objective, counter, lb, ub, root)]
    offer(round_fix(root, lb, ub)) if _fractional(root.x, bins, opts.int_tol)[0].size else offer(root)
    hit_limit = False
    while heap:
        bound, _, lo, hi, res = heapq.heappop(heap)
        if bound >= inc_obj - gap_tol(inc_obj):
            continue
        frac, fval = _fractional(res.x, bins, opts.int_tol)
        if frac.size == 0:
            offer(res)
            continue
        if nodes >= opts.node_limit:
            hit_limit = True
            heapq.heappush(heap, (bound, counter, lo, hi, res))
            break
        nodes += 1
        pr = prio_arr[frac]
        best = pr.min()
        cand = frac[pr == best]
        cf = fval[pr == best]
        j = int(cand[np.argmax(cf)])  # stable: first maximal index
        for val in (0.0, 1.0):
            lo2, hi2 = lo.copy(), hi.copy()
            lo2[j] = hi2[j] = val
            child = relax(lo2, hi2)
            if not child.ok:
                continue
            if child.objective >= inc_obj - gap_tol(inc_obj):
                continue
            counter += 1
            heapq.heappush(heap, (child.objective, counter, lo2, hi2, child))
    wall = time.perf_counter() - t0
    best_bound = min((h[0] for h in heap), default=inc_obj)
    if incumbent is None and hit_limit and heap:
        offer(round_fix(heap[0][4], heap[0][2], heap[0][3]))
    if incumbent is None:
        if hit_limit:
            raise NodeLimitNoIncumbent(f"no integer solution after {nodes} nodes")
        raise Infeasible("no integer-feasible point")
    out = SolveResult(
        OPTIMAL,
        incumbent.x,
        incumbent.objective,
        prog.residuals(incumbent.x, lb, ub),
        wall,
        dict(
            incumbent.info,
            nodes=nodes,
            root_bound=root.objective,
            best_bound=min(best_bound, inc_obj),
            heuristic=hit_limit,
            incumbents=history,
        ),
    )
    return out
