"""Radial feeder topology, per-unit line data and DER assets.

Lines are keyed by their downstream bus, so line ``i`` feeds bus ``i`` from
``ancestor[i]``. Input records may list a line in either direction; the
orientation is fixed by a breadth-first walk from the substation (bus 0).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    CycleDetected,
    Disconnected,
    DuplicateLineToBus,
    InputError,
    MissingSubstation,
    UnknownBus,
    UnknownDerBus,
)

INF = float("inf")


@dataclass(frozen=True)
class BusParams:
    id: int
    g: float = 0.0
    b: float = 0.0
    base_load_p: float = 0.0
    base_load_q: float = 0.0
    vsq_min: float = 0.9
    vsq_max: float = 1.1
    is_substation: bool = False
    substation_vsq: float | None = None
    substation_p_max: float = INF
    substation_q_max: float = INF


@dataclass(frozen=True)
class LineParams:
    id: int
    r: float
    x: float
    s_max: float


@dataclass(frozen=True)
class Network:
    buses: tuple[BusParams, ...]
    lines: tuple[LineParams, ...]
    ancestor: Mapping[int, int]
    children: Mapping[int, tuple[int, ...]]
    mcs: Mapping[int, tuple[int, ...]]
    order: tuple[int, ...]
    power_base_mva: float = 1.0

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def line(self, i: int) -> LineParams:
        return self.lines[i - 1]

    # dense per-bus views (index 0 of line arrays is unused and zero)
    @property
    def parent(self) -> np.ndarray:
        p = np.full(self.n_bus, -1, dtype=np.int64)
        for i, a in self.ancestor.items():
            p[i] = a
        return p

    @property
    def r(self) -> np.ndarray:
        return np.array([0.0] + [ln.r for ln in self.lines])

    @property
    def x(self) -> np.ndarray:
        return np.array([0.0] + [ln.x for ln in self.lines])

    @property
    def s_max(self) -> np.ndarray:
        return np.array([INF] + [ln.s_max for ln in self.lines])

    def path_matrix(self) -> np.ndarray:
        """M[i, j] = 1 when line j lies on the path from bus i to the substation."""
        m = np.zeros((self.n_bus, self.n_bus))
        for i, path in self.mcs.items():
            m[i, list(path)] = 1.0
        return m

    def canonical(self) -> str:
        """Deterministic JSON rendering of the derived maps."""
        return json.dumps(
            {
                "ancestor": sorted(self.ancestor.items()),
                "children": sorted((k, list(v)) for k, v in self.children.items()),
                "mcs": sorted((k, list(v)) for k, v in self.mcs.items()),
                "order": list(self.order),
            },
            sort_keys=True,
        )


def _get(rec, *names, default=None):
    for n in names:
        if n in rec and rec[n] is not None:
            return rec[n]
    return default


def build_network(
    bus_records: Sequence[Mapping],
    line_records: Sequence[Mapping],
    power_base_mva: float = 1.0,
    base_kv: float | None = None,
    substation: Mapping | None = None,
) -> Network:
    """Validate records and derive ancestor, children and cut-set maps.

    Line impedance may be given in p.u. (``r``/``x`` or ``r_pu``/``x_pu``) or
    in ohms (``r_ohm``/``x_ohm``), the latter needing ``base_kv``.
    """
    substation = dict(substation or {})
    ids = [int(_get(b, "id")) for b in bus_records]
    if len(set(ids)) != len(ids):
        raise InputError(f"duplicate bus ids in {sorted(ids)}")
    if 0 not in ids:
        raise MissingSubstation("no bus with id 0")
    if sorted(ids) != list(range(len(ids))):
        raise UnknownBus(f"bus ids must be 0..{len(ids) - 1}, got {sorted(ids)}")
    flagged = [int(b["id"]) for b in bus_records if b.get("is_substation")]
    if flagged and flagged != [0]:
        raise MissingSubstation(f"substation flag must be on bus 0 only, got {flagged}")
    n = len(ids)

    # orientation-free adjacency with cycle detection by union-find
    root = list(range(n))

    def find(a):
        while root[a] != a:
            root[a] = root[root[a]]
            a = root[a]
        return a

    adj: dict[int, list[tuple[int, Mapping]]] = {i: [] for i in range(n)}
    for rec in line_records:
        a, b = int(_get(rec, "from", "from_bus")), int(_get(rec, "to", "to_bus"))
        for e in (a, b):
            if e not in adj:
                raise UnknownBus(f"line {a}->{b} references unknown bus {e}")
        if a == b:
            raise CycleDetected(f"line {a}->{b} is a self loop")
        ra, rb = find(a), find(b)
        if ra == rb:
            raise CycleDetected(f"line {a}->{b} closes a cycle")
        root[ra] = rb
        adj[a].append((b, rec))
        adj[b].append((a, rec))

    declared = [int(rec["id"]) for rec in line_records if "id" in rec]
    dup = {d for d in declared if declared.count(d) > 1}
    if dup:
        raise DuplicateLineToBus(f"more than one line feeds bus {sorted(dup)}")

    ancestor: dict[int, int] = {}
    line_rec: dict[int, Mapping] = {}
    order = [0]
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for w, rec in sorted(adj[u], key=lambda t: t[0]):
            if w in seen:
                continue
            seen.add(w)
            ancestor[w] = u
            line_rec[w] = rec
            order.append(w)
            queue.append(w)
    missing = sorted(set(range(n)) - seen)
    if missing:
        raise Disconnected(f"buses {missing} are not connected to the substation")
    for w, rec in line_rec.items():
        if "id" in rec and int(rec["id"]) != w:
            raise DuplicateLineToBus(
                f"line declared as id {rec['id']} actually feeds bus {w}"
            )

    zbase = None
    if base_kv is not None:
        zbase = float(base_kv) ** 2 / float(power_base_mva)

    lines = []
    for i in range(1, n):
        rec = line_rec[i]
        r = _get(rec, "r", "r_pu")
        x = _get(rec, "x", "x_pu")
        if r is None or x is None:
            if zbase is None:
                raise InputError(f"line {i}: ohmic impedance needs base_kv")
            r = float(_get(rec, "r_ohm", default=0.0)) / zbase
            x = float(_get(rec, "x_ohm", default=0.0)) / zbase
        s = float(_get(rec, "s_max", "s", default=INF))
        if r < 0 or x < 0 or not s > 0:
            raise InputError(f"line {i}: need R >= 0, X >= 0, S > 0")
        lines.append(LineParams(i, float(r), float(x), s))

    buses = []
    for rec in sorted(bus_records, key=lambda b: int(b["id"])):
        i = int(rec["id"])
        lo = float(_get(rec, "vsq_min", "voltage_sq_min", default=0.9))
        hi = float(_get(rec, "vsq_max", "voltage_sq_max", default=1.1))
        kw = {}
        if i == 0:
            v0 = float(_get(substation, "vsq", default=_get(rec, "substation_vsq", default=lo)))
            lo = hi = v0
            pm = _get(substation, "p_max", default=_get(rec, "substation_p_max"))
            qm = _get(substation, "q_max", default=_get(rec, "substation_q_max"))
            kw = dict(
                is_substation=True,
                substation_vsq=v0,
                substation_p_max=INF if pm is None else float(pm),
                substation_q_max=INF if qm is None else float(qm),
            )
        elif not lo < hi:
            raise InputError(f"bus {i}: vsq_min must be below vsq_max")
        buses.append(
            BusParams(
                id=i,
                g=float(_get(rec, "g", default=0.0)),
                b=float(_get(rec, "b", default=0.0)),
                base_load_p=float(_get(rec, "p_load", "p_load_mw", default=0.0)) / power_base_mva,
                base_load_q=float(_get(rec, "q_load", "q_load_mvar", default=0.0)) / power_base_mva,
                vsq_min=lo,
                vsq_max=hi,
                **kw,
            )
        )

    children = {i: tuple(sorted(w for w, a in ancestor.items() if a == i)) for i in range(n)}
    mcs: dict[int, tuple[int, ...]] = {0: ()}
    for w in order[1:]:
        mcs[w] = mcs[ancestor[w]] + (w,)
    return Network(
        buses=tuple(buses),
        lines=tuple(lines),
        ancestor=ancestor,
        children=children,
        mcs=mcs,
        order=tuple(order),
        power_base_mva=float(power_base_mva),
    )


def minimum_cut_set(network: Network, bus: int) -> list[int]:
    """Lines on the path from ``bus`` to the substation, substation side first."""
    if bus not in network.mcs:
        raise UnknownBus(f"bus {bus} not in network")
    return list(network.mcs[bus])


@dataclass(frozen=True)
class DgUnit:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class DrUnit:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float


@dataclass(frozen=True)
class BessUnit:
    bus: int
    p_min: float
    p_max: float
    q_min: float = 0.0
    q_max: float = 0.0
    soc_min: float = 0.0
    soc_max: float = 1.0
    eta_c: float = 1.0
    eta_d: float = 1.0
    delta: float = 0.0
    soc_init: float = 0.0


@dataclass(frozen=True)
class DerAssets:
    dg: Mapping[int, DgUnit] = field(default_factory=dict)
    bess: Mapping[int, BessUnit] = field(default_factory=dict)
    dr: Mapping[int, DrUnit] = field(default_factory=dict)

    def check(self, network: Network) -> None:
        for kind in ("dg", "bess", "dr"):
            for bus, u in getattr(self, kind).items():
                if not 0 < bus < network.n_bus:
                    raise UnknownDerBus(f"{kind} at bus {bus} is not a load bus")
                if u.p_min > u.p_max or u.q_min > u.q_max:
                    raise InputError(f"{kind} at bus {bus}: min exceeds max")
        for bus, u in self.bess.items():
            if not 0 <= u.soc_min <= u.soc_init <= u.soc_max <= 1:
                raise InputError(f"bess at bus {bus}: need 0 <= soc_min <= soc_init <= soc_max <= 1")
            if not (0 < u.eta_c <= 1 and 0 < u.eta_d <= 1 and 0 <= u.delta < 1):
                raise InputError(f"bess at bus {bus}: efficiency or self-discharge out of range")
            if u.p_max <= 0:
                raise InputError(f"bess at bus {bus}: p_max must be positive")


def build_ders(records: Mapping, power_base_mva: float = 1.0) -> DerAssets:
    """Parse the ``ders`` section; powers are scaled by ``power_base_mva``."""

    def scaled(rec, keys):
        out = {}
        for k, v in rec.items():
            out[k] = float(v) / power_base_mva if k in keys else v
        return out

    pq = {"p_min", "p_max", "q_min", "q_max"}
    dg = {}
    for rec in records.get("dg", []):
        r = scaled(rec, pq)
        dg[int(r["bus"])] = DgUnit(int(r["bus"]), r["p_min"], r["p_max"], r["q_min"], r["q_max"])
    dr = {}
    for rec in records.get("dr", []):
        r = scaled(rec, pq)
        dr[int(r["bus"])] = DrUnit(int(r["bus"]), r["p_min"], r["p_max"], r["q_min"], r["q_max"])
    bess = {}
    for rec in records.get("bess", []):
        r = scaled(rec, pq)
        kw = {k: float(r[k]) for k in BessUnit.__dataclass_fields__ if k in r and k != "bus"}
        bess[int(r["bus"])] = BessUnit(bus=int(r["bus"]), **kw)
    for kind, d in (("dg", records.get("dg", [])), ("bess", records.get("bess", [])), ("dr", records.get("dr", []))):
        buses = [int(r["bus"]) for r in d]
        if len(set(buses)) != len(buses):
            raise InputError(f"duplicate {kind} bus in {buses}")
    return DerAssets(dg=dg, bess=bess, dr=dr)


def load_case(path) -> tuple[Network, DerAssets]:
    """Read a case JSON with ``buses``, ``lines`` and ``ders`` sections."""
    with open(path) as fh:
        doc = json.load(fh)
    return case_from_dict(doc)


def case_from_dict(doc: Mapping) -> tuple[Network, DerAssets]:
    try:
        base = float(doc.get("power_base_mva", 1.0))
        net = build_network(
            doc["buses"],
            doc["lines"],
            power_base_mva=base,
            base_kv=doc.get("base_kv"),
            substation=doc.get("substation"),
        )
        ders = build_ders(doc.get("ders", {}), base)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed case data: {exc!r}") from exc
    ders.check(net)
    return net, ders
