"""A small second-order cone modeling layer.

Variables carry bounds and an optional binary flag, constraints are affine
equalities and inequalities plus cones ``||x|| <= t``, and the objective is
affine plus a separable convex quadratic. Rotated cones are rewritten into
standard form when added. The program compiles to sparse matrices that a
backend in :mod:`relgrid.solve` consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

INF = math.inf


class Expr:
    """Affine expression ``sum(coef * x[idx]) + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms=None, const=0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def lift(v) -> "Expr":
        return v if isinstance(v, Expr) else Expr(None, float(v))

    def copy(self) -> "Expr":
        return Expr(self.terms, self.const)

    def __add__(self, other):
        out = self.copy()
        if isinstance(other, Expr):
            t = out.terms
            for k, c in other.terms.items():
                t[k] = t.get(k, 0.0) + c
            out.const += other.const
        else:
            out.const += float(other)
        return out

    __radd__ = __add__

    def __neg__(self):
        return Expr({k: -c for k, c in self.terms.items()}, -self.const)

    def __sub__(self, other):
        return self + (-Expr.lift(other))

    def __rsub__(self, other):
        return Expr.lift(other) + (-self)

    def __mul__(self, s):
        s = float(s)
        return Expr({k: c * s for k, c in self.terms.items()}, self.const * s)

    __rmul__ = __mul__

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(c * x[k] for k, c in self.terms.items())

    def __repr__(self):
        return f"Expr({self.terms!r}, {self.const!r})"


@dataclass
class Compiled:
    c: np.ndarray
    c0: float
    q: np.ndarray  # objective adds sum(q * (x - r)**2)
    r: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix  # G x <= h
    h: np.ndarray
    C: sp.csr_matrix  # stacked cone rows, each block [t; x] as affine C x + d
    d: np.ndarray
    cone_sizes: list[int]


class ConicProgram:
    def __init__(self):
        self.names: list[str] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.binary: list[int] = []
        self._eq: list[tuple[Expr, str]] = []
        self._le: list[tuple[Expr, str]] = []
        self._cones: list[tuple[list[Expr], str]] = []
        self.obj = Expr()
        self.quad: dict[int, float] = {}
        self.center: dict[int, float] = {}
        self.index: dict[str, int] = {}
        self.meta: dict = {}
        self._compiled: Compiled | None = None

    # -- declaration ---------------------------------------------------
    @property
    def n(self) -> int:
        return len(self.names)

    def add_var(self, name: str, lb=-INF, ub=INF, binary=False) -> Expr:
        if name in self.index:
            raise ValueError(f"variable {name!r} already declared")
        i = len(self.names)
        self.names.append(name)
        if binary:
            lb, ub = max(0.0, lb), min(1.0, ub)
            self.binary.append(i)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.index[name] = i
        self._compiled = None
        return Expr({i: 1.0})

    def var(self, name: str) -> Expr:
        return Expr({self.index[name]: 1.0})

    def _check(self, e: Expr):
        n = self.n
        for k in e.terms:
            if not 0 <= k < n:
                raise ValueError(f"expression references undeclared variable {k}")

    def add_eq(self, lhs, rhs=0.0, tag: str = "") -> None:
        e = Expr.lift(lhs) - rhs
        self._check(e)
        self._eq.append((e, tag))
        self._compiled = None

    def add_le(self, lhs, rhs=0.0, tag: str = "") -> None:
        e = Expr.lift(lhs) - rhs
        self._check(e)
        self._le.append((e, tag))
        self._compiled = None

    def add_ge(self, lhs, rhs=0.0, tag: str = "") -> None:
        self.add_le(Expr.lift(rhs) - lhs, 0.0, tag)

    def add_soc(self, t, xs: Sequence, tag: str = "") -> None:
        """``||xs||_2 <= t``."""
        row = [Expr.lift(t)] + [Expr.lift(x) for x in xs]
        for e in row:
            self._check(e)
        self._cones.append((row, tag))
        self._compiled = None

    def add_rsoc(self, a, b, xs: Sequence, tag: str = "") -> None:
        """``||xs||^2 <= a*b`` with ``a, b >= 0``, as ``||(2xs, a-b)|| <= a+b``."""
        a, b = Expr.lift(a), Expr.lift(b)
        self.add_soc(a + b, [2.0 * Expr.lift(x) for x in xs] + [a - b], tag)

    def add_objective(self, e) -> None:
        e = Expr.lift(e)
        self._check(e)
        self.obj = self.obj + e
        self._compiled = None

    def add_proximal(self, idx: Iterable[int], center: Iterable[float], weight: float) -> None:
        """Add ``weight * sum((x[i] - center_i)**2)``.

        Kept in centered form so that a backend can shift variables and never
        see the large constant ``weight * ||center||^2``.
        """
        const = 0.0
        for i, z in zip(list(idx), list(center)):
            i, z = int(i), float(z)
            q0, r0 = self.quad.get(i, 0.0), self.center.get(i, 0.0)
            q1 = q0 + weight
            r1 = (q0 * r0 + weight * z) / q1
            # q0 (x-r0)^2 + w (x-z)^2 = q1 (x-r1)^2 + const
            const += q0 * r0**2 + weight * z**2 - q1 * r1**2
            self.quad[i], self.center[i] = q1, r1
        self.obj = self.obj + const
        self._compiled = None

    # -- views ---------------------------------------------------------
    @property
    def n_eq(self) -> int:
        return len(self._eq)

    @property
    def n_le(self) -> int:
        return len(self._le)

    @property
    def cones(self):
        return self._cones

    def cone_count(self, prefix: str) -> int:
        return sum(1 for _, tag in self._cones if tag.startswith(prefix))

    def eq_tags(self):
        return [t for _, t in self._eq]

    def le_tags(self):
        return [t for _, t in self._le]

    def copy(self) -> "ConicProgram":
        p = ConicProgram()
        p.names = list(self.names)
        p.lb = list(self.lb)
        p.ub = list(self.ub)
        p.binary = list(self.binary)
        p._eq = list(self._eq)
        p._le = list(self._le)
        p._cones = list(self._cones)
        p.obj = self.obj.copy()
        p.quad = dict(self.quad)
        p.center = dict(self.center)
        p.index = dict(self.index)
        p.meta = dict(self.meta)
        return p

    def objective_value(self, x: np.ndarray) -> float:
        val = self.obj.value(x)
        for i, q in self.quad.items():
            val += q * (x[i] - self.center.get(i, 0.0)) ** 2
        return val

    # -- compile -------------------------------------------------------
    def compile(self) -> Compiled:
        if self._compiled is not None:
            return self._compiled
        n = self.n

        def rows(exprs):
            ri, ci, vi, const = [], [], [], []
            for r, e in enumerate(exprs):
                for k, c in e.terms.items():
                    ri.append(r)
                    ci.append(k)
                    vi.append(c)
                const.append(e.const)
            m = sp.csr_matrix((vi, (ri, ci)), shape=(len(exprs), n))
            m.sum_duplicates()
            return m, np.asarray(const, dtype=float)

        A, ca = rows([e for e, _ in self._eq])
        G, cg = rows([e for e, _ in self._le])
        flat = [e for row, _ in self._cones for e in row]
        C, d = rows(flat)
        c = np.zeros(n)
        for k, v in self.obj.terms.items():
            c[k] += v
        q = np.zeros(n)
        r = np.zeros(n)
        for k, v in self.quad.items():
            q[k] += v
            r[k] = self.center.get(k, 0.0)
        self._compiled = Compiled(
            c=c,
            c0=self.obj.const,
            q=q,
            r=r,
            A=A,
            b=-ca,
            G=G,
            h=-cg,
            C=C,
            d=d,
            cone_sizes=[len(row) for row, _ in self._cones],
        )
        return self._compiled

    def residuals(self, x: np.ndarray, lb=None, ub=None) -> dict[str, float]:
        """Largest violation per constraint family at ``x``."""
        m = self.compile()
        lb = np.asarray(self.lb if lb is None else lb)
        ub = np.asarray(self.ub if ub is None else ub)
        out = {
            "eq": float(np.abs(m.A @ x - m.b).max(initial=0.0)),
            "le": float(np.maximum(m.G @ x - m.h, 0.0).max(initial=0.0)),
            "bounds": float(max(np.maximum(lb - x, 0).max(initial=0.0), np.maximum(x - ub, 0).max(initial=0.0))),
        }
        s = m.C @ x + m.d
        worst = 0.0
        pos = 0
        for size in m.cone_sizes:
            blk = s[pos : pos + size]
            worst = max(worst, float(np.linalg.norm(blk[1:]) - blk[0]))
            pos += size
        out["cone"] = max(worst, 0.0)
        return out

    # -- text dump -----------------------------------------------------
    def dump(self, path) -> None:
        """Write a plain-text rendering: sparse triplets plus a cone list.

        Sections: ``VARS`` (index name lb ub kind), ``OBJ`` (index coef),
        ``QUAD`` (index q r, objective adds q*(x-r)^2), ``EQ`` / ``LE`` triplets
        (row col value) with ``RHS`` (row value) for ``A x = b`` and
        ``G x <= h``, and ``CONES`` (size then triplets for ``C x + d``, whose
        first row is the cone's bound).
        """
        m = self.compile()
        bset = set(self.binary)
        with open(path, "w") as fh:
            fh.write(f"VARS {self.n}\n")
            for i, nm in enumerate(self.names):
                kind = "B" if i in bset else "C"
                fh.write(f"{i} {nm} {self.lb[i]!r} {self.ub[i]!r} {kind}\n")
            fh.write(f"OBJ {np.count_nonzero(m.c)} {m.c0!r}\n")
            for i in np.flatnonzero(m.c):
                fh.write(f"{i} {m.c[i]!r}\n")
            fh.write(f"QUAD {np.count_nonzero(m.q)}\n")
            for i in np.flatnonzero(m.q):
                fh.write(f"{i} {m.q[i]!r} {m.r[i]!r}\n")
            for label, mat, rhs in (("EQ", m.A, m.b), ("LE", m.G, m.h)):
                coo = mat.tocoo()
                fh.write(f"{label} {mat.shape[0]} {coo.nnz}\n")
                for r, cidx, v in zip(coo.row, coo.col, coo.data):
                    fh.write(f"{r} {cidx} {v!r}\n")
                fh.write(f"RHS {len(rhs)}\n")
                for r, v in enumerate(rhs):
                    fh.write(f"{r} {v!r}\n")
            coo = m.C.tocoo()
            fh.write(f"CONES {len(m.cone_sizes)} {coo.nnz}\n")
            fh.write(" ".join(str(s) for s in m.cone_sizes) + "\n")
            for r, cidx, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {cidx} {v!r}\n")
            fh.write(f"CONST {len(m.d)}\n")
            for r, v in enumerate(m.d):
                fh.write(f"{r} {v!r}\n")
