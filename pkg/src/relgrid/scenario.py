"""Time series for one dispatch horizon: loads, prices, temperature, derating."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyProfile,
    InputError,
    NonPositiveMax,
    TemperatureOutOfRange,
)
from .grid import Network

DER_KINDS = ("dg", "bess_charge", "bess_discharge", "dr")
WEIGHT_KINDS = ("substation", "load") + DER_KINDS


@dataclass(frozen=True)
class DeratingFactors:
    line_factor: np.ndarray
    dg_factor: np.ndarray
    bess_factor: np.ndarray


@dataclass(frozen=True)
class Scenario:
    horizon: int
    step_hours: float
    load_p: np.ndarray  # (n_bus, T)
    load_q: np.ndarray
    price_substation: np.ndarray  # (T,)
    der_prices: Mapping[str, np.ndarray]  # kind -> (T,)
    ambient_temp: np.ndarray  # (T,) degC
    shed_weights: Mapping[str, float] = field(default_factory=dict)
    temp_range: tuple[float, float] = (-30.0, 60.0)

    @property
    def derating(self) -> DeratingFactors:
        return derating(self.ambient_temp, self.temp_range)

    def with_prices(self, scale: float) -> "Scenario":
        return Scenario(
            self.horizon,
            self.step_hours,
            self.load_p,
            self.load_q,
            self.price_substation * scale,
            {k: v * scale for k, v in self.der_prices.items()},
            self.ambient_temp,
            dict(self.shed_weights),
            self.temp_range,
        )

    def with_weights(self, weights: Mapping[str, float]) -> "Scenario":
        return Scenario(
            self.horizon,
            self.step_hours,
            self.load_p,
            self.load_q,
            self.price_substation,
            self.der_prices,
            self.ambient_temp,
            dict(weights),
            self.temp_range,
        )


def scale_loads(base_load, profile) -> np.ndarray:
    """Scale per-bus base loads by ``profile / max(profile)``.

    Returns an array of shape ``(len(base_load), len(profile))``; a scalar
    base load gives a 1-d series.
    """
    prof = np.asarray(profile, dtype=float)
    if prof.size == 0:
        raise EmptyProfile("load profile is empty")
    peak = prof.max()
    if not peak > 0:
        raise NonPositiveMax(f"profile maximum is {peak}, must be positive")
    base = np.asarray(base_load, dtype=float)
    return np.multiply.outer(base, prof / peak)


def derating(at, temp_range=(-30.0, 60.0)) -> DeratingFactors:
    """Temperature derating for line S^2, DG p-max and BESS energy, as fractions."""
    t = np.atleast_1d(np.asarray(at, dtype=float))
    lo, hi = temp_range
    bad = (t < lo) | (t > hi) | ~np.isfinite(t)
    if bad.any():
        raise TemperatureOutOfRange(
            f"temperature {t[bad][0]} outside plausible range [{lo}, {hi}]"
        )
    line = (-0.77 * t + 119.45) / 100.0
    dg = (-0.47 * t + 111.60) / 100.0
    bess = (-0.016 * t**2 + 1.97 * t + 60.75) / 100.0
    return DeratingFactors(line, dg, bess)


def _series(value, T, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(T, float(arr))
    if arr.shape != (T,):
        raise DimensionMismatch(f"{name} has length {arr.size}, horizon is {T}")
    return arr


def build_scenario(
    network: Network,
    profile: Sequence[float],
    temps: Sequence[float],
    prices: Mapping[str, object],
    shed_weights: Mapping[str, float] | None = None,
    step_hours: float = 2.0,
    temp_range: tuple[float, float] = (-30.0, 60.0),
) -> Scenario:
    prof = np.asarray(profile, dtype=float)
    T = prof.size
    at = np.asarray(temps, dtype=float)
    if at.shape != (T,):
        raise DimensionMismatch(
            f"temperature series has {at.size} steps, load profile has {T}"
        )
    base_p = np.array([b.base_load_p for b in network.buses])
    base_q = np.array([b.base_load_q for b in network.buses])
    load_p = scale_loads(base_p, prof)
    load_q = scale_loads(base_q, prof)
    if (load_p < 0).any() or (load_q < 0).any():
        raise InputError("loads must be non-negative")
    c0 = _series(prices.get("substation", 0.0), T, "substation price")
    der = {k: _series(prices.get(k, 0.0), T, f"{k} price") for k in DER_KINDS}
    weights = {k: 0.0 for k in WEIGHT_KINDS}
    for k, v in (shed_weights or {}).items():
        if k not in weights:
            raise InputError(f"unknown shed weight {k!r}")
        if float(v) < 0:
            raise InputError(f"shed weight {k!r} must be non-negative")
        weights[k] = float(v)
    derating(at, temp_range)
    return Scenario(T, float(step_hours), load_p, load_q, c0, der, at, weights, tuple(temp_range))


def read_series_csv(path, column: str | None = None) -> np.ndarray:
    """Read the value column of a ``timestamp,value`` CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EmptyProfile(f"{path} has no rows")
    cols = list(rows[0].keys())
    col = column or next((c for c in cols if c != "timestamp"), None)
    if col is None or col not in cols:
        raise InputError(f"{path}: no value column (columns {cols})")
    try:
        return np.array([float(r[col]) for r in rows])
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc


def load_scenario(path, network: Network) -> Scenario:
    with open(path) as fh:
        doc = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    try:
        if "load_profile" in doc:
            profile = np.asarray(doc["load_profile"], dtype=float)
        else:
            profile = read_series_csv(resolve(doc["load_csv"]), doc.get("load_column"))
        if "temperature" in doc:
            temps = np.asarray(doc["temperature"], dtype=float)
        else:
            temps = read_series_csv(resolve(doc["temperature_csv"]), doc.get("temperature_column"))
    except KeyError as exc:
        raise InputError(f"scenario is missing {exc}") from exc
    T = int(doc.get("horizon", profile.size))
    if profile.size != T:
        raise DimensionMismatch(f"load profile has {profile.size} steps, horizon is {T}")
    return build_scenario(
        network,
        profile,
        temps,
        doc.get("prices", {}),
        doc.get("shed_weights", {}),
        step_hours=float(doc.get("step_hours", 2.0)),
        temp_range=tuple(doc.get("temperature_range", (-30.0, 60.0))),
    )
