"""Split-sample noise of a response curve.

Common days are numbered 1, 2, ... in ascending order; odd and even days
give two sub-sample curves whose spread around the all-day curve, relative
to the all-day value, is the noise at each lag.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import date
from typing import Mapping

import numpy as np

from crossimpact._io import atomic_write
from crossimpact.ingest import MidpointSeries
from crossimpact.response import LagGrid, response
from crossimpact.signs import SignSeries

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class NoiseCurve:
    stock_i: str
    stock_j: str
    lags: np.ndarray
    nu: np.ndarray
    n_days_odd: int
    n_days_even: int
    undefined_lags: list[int] = field(default_factory=list)


def noise_from_curves(r_all: np.ndarray, r_odd: np.ndarray, r_even: np.ndarray) -> np.ndarray:
    """sqrt(((R1 - R)^2 + (R2 - R)^2) / 2) / |R|, NaN where R is 0 or undefined."""
    r_all = np.asarray(r_all, dtype=np.float64)
    d1 = np.asarray(r_odd, dtype=np.float64) - r_all
    d2 = np.asarray(r_even, dtype=np.float64) - r_all
    with np.errstate(invalid="ignore", divide="ignore"):
        nu = np.sqrt(0.5 * (d1 * d1 + d2 * d2)) / np.abs(r_all)
    return np.where(r_all == 0, np.nan, nu)


def response_noise(m_i: Mapping[date, MidpointSeries], eps_j: Mapping[date, SignSeries],
                   grid: LagGrid | None = None, convention: str = "inc0",
                   stock_i: str = "i", stock_j: str = "j") -> NoiseCurve:
    days = sorted(m_i)
    if sorted(eps_j) != days:
        raise ValueError("series cover different day sets; align them on common days first")
    if len(days) < 2:
        raise ValueError(f"noise needs at least 2 common days, got {len(days)}")
    grid = grid or LagGrid.range()
    odd = days[0::2]   # running numbers 1, 3, 5, ...
    even = days[1::2]

    def sub(ds):
        return response({d: m_i[d] for d in ds}, {d: eps_j[d] for d in ds}, grid, convention,
                        stock_i, stock_j).values

    full = response(m_i, eps_j, grid, convention, stock_i, stock_j).values
    nu = noise_from_curves(full, sub(odd), sub(even))
    undefined = grid.lags[np.isnan(nu)].tolist()
    if undefined:
        log.info("noise %s<-%s undefined at %d lag(s)", stock_i, stock_j, len(undefined))
    return NoiseCurve(stock_i, stock_j, grid.lags.copy(), nu, len(odd), len(even), undefined)


def write_noise(curve: NoiseCurve, path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "nu", "n_odd", "n_even"])
        for tau, nu in zip(curve.lags.tolist(), curve.nu.tolist()):
            w.writerow([tau, repr(nu), curve.n_days_odd, curve.n_days_even])
