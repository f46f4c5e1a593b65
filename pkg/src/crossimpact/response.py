"""Lagged response functions, sign correlators and signed-return statistics.

For a pair (i, j) the response at lag tau averages r_i(t, tau) * eps_j(t)
over all seconds t of all common days, where r_i is the log midpoint change
of stock i over tau seconds inside one session. ``inc0`` averages over every
second with a defined return; ``exc0`` keeps only seconds with eps_j(t) != 0.
Zero signs add nothing to the numerator, so both conventions share the same
sum and differ only in the event count.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import date
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from crossimpact import _kernels
from crossimpact._io import atomic_write
from crossimpact.ingest import MidpointSeries
from crossimpact.signs import SignSeries

log = logging.getLogger(__name__)

CONVENTIONS = ("inc0", "exc0")


@dataclass(frozen=True, eq=False)
class LagGrid:
    lags: np.ndarray

    def __post_init__(self):
        lags = np.asarray(self.lags, dtype=np.int64)
        if lags.ndim != 1 or len(lags) == 0:
            raise ValueError("lag grid must be a non-empty 1-d sequence")
        if lags[0] < 1 or (np.diff(lags) <= 0).any():
            raise ValueError("lags must be >= 1 and strictly ascending")
        object.__setattr__(self, "lags", lags)

    @classmethod
    def range(cls, start: int = 1, end: int = 1000) -> "LagGrid":
        """Inclusive integer range ``start..end``."""
        return cls(np.arange(start, end + 1))

    @classmethod
    def parse(cls, text: str) -> "LagGrid":
        """``"1:1000"`` (inclusive) or a comma list ``"1,2,60"``."""
        if ":" in text:
            a, b = text.split(":")
            return cls.range(int(a), int(b))
        return cls(np.array([int(x) for x in text.split(",")]))

    def __len__(self) -> int:
        return len(self.lags)

    def __eq__(self, other):
        return isinstance(other, LagGrid) and np.array_equal(self.lags, other.lags)


@dataclass(frozen=True, eq=False)
class ResponseCurve:
    stock_i: str
    stock_j: str
    convention: str
    kind: str  # "response" | "sign_correlator"
    lags: np.ndarray
    values: np.ndarray
    counts: np.ndarray
    stderr: np.ndarray
    total: np.ndarray = field(repr=False)  # summed products behind ``values``

    @property
    def grid(self) -> LagGrid:
        return LagGrid(self.lags)

    def at(self, tau: int) -> float:
        idx = np.searchsorted(self.lags, tau)
        if idx >= len(self.lags) or self.lags[idx] != tau:
            raise KeyError(f"lag {tau} not on the curve's grid")
        return float(self.values[idx])

    def scaled(self, c: float) -> "ResponseCurve":
        return ResponseCurve(self.stock_i, self.stock_j, self.convention, self.kind, self.lags,
                             self.values * c, self.counts, self.stderr * abs(c), self.total * c)


def _finish(stock_i, stock_j, convention, kind, lags, total, sumsq, counts) -> ResponseCurve:
    counts = np.asarray(counts, dtype=np.int64)
    total = np.asarray(total, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
        n = counts.astype(np.float64)
        var = (sumsq - total * total / np.maximum(n, 1)) / np.maximum(n - 1, 1)
        stderr = np.where(counts > 1, np.sqrt(np.maximum(var, 0.0) / np.maximum(n, 1)), np.nan)
    undefined = np.flatnonzero(counts == 0)
    if len(undefined):
        log.info("%s %s->%s %s: no events at %d lag(s), first tau=%d", kind, stock_j, stock_i,
                 convention, len(undefined), lags[undefined[0]])
    return ResponseCurve(stock_i, stock_j, convention, kind, lags.copy(), values, counts, stderr, total)


def _check_days(a: Mapping[date, object], b: Mapping[date, object]) -> list[date]:
    days = sorted(a)
    if sorted(b) != days:
        raise ValueError("series cover different day sets; align them on common days first")
    return days


def _check_convention(convention: str) -> None:
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}, got {convention!r}")


def log_return(m: MidpointSeries, t: int, tau: int) -> float | None:
    """log m(t + tau) - log m(t); None when either midpoint is undefined."""
    if t < 0 or tau < 0 or t + tau >= len(m):
        raise IndexError("lag window leaves the session")
    a, b = m.values[t], m.values[t + tau]
    if math.isnan(a) or math.isnan(b):
        return None
    return math.log(b) - math.log(a)


def _log_mid(m: MidpointSeries) -> tuple[np.ndarray, bool, int]:
    logm = _kernels.log_values(np.ascontiguousarray(m.values, dtype=np.float64))
    defined = ~np.isnan(logm)
    fd = m.first_defined if m.first_defined is not None else len(logm)
    suffix = bool(defined[fd:].all()) and not defined[:fd].any()
    return logm, suffix, fd


def response_curves(m_i: Mapping[date, MidpointSeries], eps_j: Mapping[date, SignSeries],
                    grid: LagGrid | None = None, stock_i: str = "i", stock_j: str = "j"
                    ) -> dict[str, ResponseCurve]:
    """Both conventions from one pass over the data."""
    grid = grid or LagGrid.range()
    days = _check_days(m_i, eps_j)
    lags = grid.lags
    k = len(lags)
    total = np.zeros(k)
    sumsq = np.zeros(k)
    n_inc = np.zeros(k, dtype=np.int64)
    n_exc = np.zeros(k, dtype=np.int64)
    for day in days:
        m, e = m_i[day], eps_j[day]
        if len(m) != len(e):
            raise ValueError(f"{day}: midpoint and sign series lengths differ")
        logm, suffix, fd = _log_mid(m)
        _kernels.response_day(logm, e.values.astype(np.int8), lags, suffix, fd,
                              total, sumsq, n_inc, n_exc)
    return {
        "inc0": _finish(stock_i, stock_j, "inc0", "response", lags, total, sumsq, n_inc),
        "exc0": _finish(stock_i, stock_j, "exc0", "response", lags, total, sumsq, n_exc),
    }


def response(m_i: Mapping[date, MidpointSeries], eps_j: Mapping[date, SignSeries],
             grid: LagGrid | None = None, convention: str = "inc0",
             stock_i: str = "i", stock_j: str = "j") -> ResponseCurve:
    """Average of r_i(t, tau) * eps_j(t) over the common days."""
    _check_convention(convention)
    return response_curves(m_i, eps_j, grid, stock_i, stock_j)[convention]


def sign_correlator_curves(eps_i: Mapping[date, SignSeries], eps_j: Mapping[date, SignSeries],
                           grid: LagGrid | None = None, stock_i: str = "i", stock_j: str = "j",
                           exclude_both: bool = False) -> dict[str, ResponseCurve]:
    """Average of eps_i(t + tau) * eps_j(t), both conventions.

    ``exc0`` conditions on eps_j(t) != 0; with ``exclude_both`` it also
    requires eps_i(t + tau) != 0.
    """
    grid = grid or LagGrid.range()
    days = _check_days(eps_i, eps_j)
    lags = grid.lags
    k = len(lags)
    total = np.zeros(k, dtype=np.int64)
    nonzero = np.zeros(k, dtype=np.int64)
    n_inc = np.zeros(k, dtype=np.int64)
    n_exc = np.zeros(k, dtype=np.int64)
    for day in days:
        a, b = eps_i[day].values, eps_j[day].values
        if len(a) != len(b):
            raise ValueError(f"{day}: sign series lengths differ")
        _kernels.correlator_day(a.astype(np.int8), b.astype(np.int8), lags, exclude_both,
                                total, nonzero, n_inc, n_exc)
    tot = total.astype(np.float64)
    sq = nonzero.astype(np.float64)
    return {
        "inc0": _finish(stock_i, stock_j, "inc0", "sign_correlator", lags, tot, sq, n_inc),
        "exc0": _finish(stock_i, stock_j, "exc0", "sign_correlator", lags, tot, sq, n_exc),
    }


def sign_correlator(eps_i: Mapping[date, SignSeries], eps_j: Mapping[date, SignSeries],
                    grid: LagGrid | None = None, convention: str = "inc0",
                    stock_i: str = "i", stock_j: str = "j", exclude_both: bool = False
                    ) -> ResponseCurve:
    _check_convention(convention)
    return sign_correlator_curves(eps_i, eps_j, grid, stock_i, stock_j, exclude_both)[convention]


def only_zero(curve_inc: ResponseCurve, curve_exc: ResponseCurve) -> ResponseCurve:
    """Pointwise inc0 minus exc0: the part attributable to zero-sign seconds."""
    if curve_inc.convention != "inc0" or curve_exc.convention != "exc0":
        raise ValueError("only_zero needs an inc0 curve and an exc0 curve")
    if curve_inc.kind != curve_exc.kind:
        raise ValueError("curves are of different kinds")
    if (curve_inc.stock_i, curve_inc.stock_j) != (curve_exc.stock_i, curve_exc.stock_j):
        raise ValueError("curves belong to different pairs")
    if not np.array_equal(curve_inc.lags, curve_exc.lags):
        raise ValueError("lag grids differ")
    return ResponseCurve(
        curve_inc.stock_i, curve_inc.stock_j, "only0", curve_inc.kind, curve_inc.lags.copy(),
        curve_inc.values - curve_exc.values,
        curve_inc.counts - curve_exc.counts,
        # the two estimates share events; adding in quadrature is an upper-end approximation
        np.hypot(curve_inc.stderr, curve_exc.stderr),
        curve_inc.total - curve_exc.total,
    )


@dataclass(frozen=True)
class MarketAverage:
    curve: ResponseCurve
    per_stock: dict[str, np.ndarray]
    missing_pairs: list[tuple[str, str]]


def market_average(curves: Mapping[tuple[str, str], ResponseCurve],
                   symbols: Sequence[str] | None = None) -> MarketAverage:
    """Unweighted double average over impacted stocks i of the mean over j != i.

    Self pairs are ignored. Pairs absent from ``curves`` are skipped and
    reported; lags where a curve is undefined drop that curve at that lag.
    """
    offdiag = {k: c for k, c in curves.items() if k[0] != k[1]}
    if not offdiag:
        raise ValueError("no cross-response curves to average")
    first = next(iter(offdiag.values()))
    for c in offdiag.values():
        if not np.array_equal(c.lags, first.lags) or c.convention != first.convention \
                or c.kind != first.kind:
            raise ValueError("curves differ in grid, convention or kind")
    if symbols is None:
        symbols = sorted({s for k in offdiag for s in k})
    missing = [(i, j) for i in symbols for j in symbols if i != j and (i, j) not in offdiag]
    if missing:
        log.warning("market average: %d pair(s) missing, e.g. %s", len(missing), missing[:3])
    per_stock = {}
    counts = np.zeros(len(first.lags), dtype=np.int64)
    for i in symbols:
        rows = [offdiag[(i, j)] for j in symbols if j != i and (i, j) in offdiag]
        if not rows:
            continue
        stack = np.vstack([c.values for c in rows])
        with np.errstate(invalid="ignore"):
            n = (~np.isnan(stack)).sum(axis=0)
            per_stock[i] = np.where(n > 0, np.nansum(stack, axis=0) / np.maximum(n, 1), np.nan)
        counts += sum(c.counts for c in rows)
    means = np.vstack(list(per_stock.values()))
    n = (~np.isnan(means)).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(n > 0, np.nansum(means, axis=0) / np.maximum(n, 1), np.nan)
        dev = np.where(np.isnan(means), 0.0, means - values)
        var = (dev * dev).sum(axis=0) / np.maximum(n - 1, 1)
        stderr = np.where(n > 1, np.sqrt(var / np.maximum(n, 1)), np.nan)
    curve = ResponseCurve("*", "*", first.convention, first.kind, first.lags.copy(),
                          values, counts, stderr, values * counts)
    return MarketAverage(curve, per_stock, missing)


# ---------------------------------------------------------------------------
# signed returns

class ShiftEstimationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SignedReturnHistogram:
    tau: int
    bin_edges: np.ndarray
    density: np.ndarray
    shift: float
    folded_pos: np.ndarray
    folded_neg: np.ndarray
    n_events: int

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[1:] + self.bin_edges[:-1])


def signed_returns(m_i: Mapping[date, MidpointSeries], eps_j: Mapping[date, SignSeries],
                   tau: int, convention: str = "exc0") -> np.ndarray:
    """All u = r_i(t, tau) * eps_j(t) over valid events, day by day."""
    _check_convention(convention)
    out = []
    for day in _check_days(m_i, eps_j):
        logm = _kernels.log_values(np.ascontiguousarray(m_i[day].values, dtype=np.float64))
        e = eps_j[day].values
        L = len(logm)
        if tau >= L:
            continue
        r = logm[tau:] - logm[:L - tau]
        keep = ~np.isnan(r)
        if convention == "exc0":
            keep &= e[:L - tau] != 0
        out.append(r[keep] * e[:L - tau][keep])
    return np.concatenate(out) if out else np.zeros(0)


def histogram_from_values(u: np.ndarray, tau: int, bins: int = 201, span: float = 5.0,
                          estimate_shift: bool = True) -> SignedReturnHistogram:
    """Density of ``u`` on ``bins`` uniform bins over +-span standard deviations.

    The edges are symmetric about zero and ``bins`` is forced odd, so bin k
    and bin ``bins - 1 - k`` mirror each other under u -> -u.
    """
    u = np.asarray(u, dtype=np.float64)
    if len(u) == 0:
        raise ValueError("no events to histogram")
    if bins % 2 == 0:
        bins += 1
    half = span * float(np.std(u))
    if not half > 0:
        half = max(float(np.abs(u).max()), 1e-300)
    edges = np.linspace(-half, half, bins + 1)
    counts, _ = np.histogram(u, bins=edges)
    width = edges[1] - edges[0]
    total = counts.sum()
    density = counts / (total * width) if total else np.zeros(bins)
    mid = bins // 2
    folded_pos = density[mid + 1:].copy()
    folded_neg = density[:mid][::-1].copy()
    hist = SignedReturnHistogram(tau, edges, density, float("nan"), folded_pos, folded_neg, int(len(u)))
    if estimate_shift:
        try:
            shift = estimate_symmetrizing_shift(hist)
        except ShiftEstimationError as exc:
            log.warning("tau=%d: %s", tau, exc)
            shift = float("nan")
        hist = SignedReturnHistogram(tau, edges, density, shift, folded_pos, folded_neg, int(len(u)))
    return hist


def signed_return_histogram(m_i: Mapping[date, MidpointSeries], eps_j: Mapping[date, SignSeries],
                            tau: int, bins: int = 201, convention: str = "exc0",
                            span: float = 5.0) -> SignedReturnHistogram:
    u = signed_returns(m_i, eps_j, tau, convention)
    if len(u) == 0:
        raise ValueError(f"no valid events at tau={tau}")
    return histogram_from_values(u, tau, bins, span)


def _asymmetry(hist: SignedReturnHistogram, shift: float, grid: np.ndarray) -> float:
    """L1 distance between the positive side and the mirrored negative side
    of the density shifted left by ``shift``."""
    x = hist.centers
    f = hist.density
    pos = np.interp(grid + shift, x, f, left=0.0, right=0.0)
    neg = np.interp(-grid + shift, x, f, left=0.0, right=0.0)
    return float(np.abs(pos - neg).sum() * (grid[1] - grid[0]))


def estimate_symmetrizing_shift(hist: SignedReturnHistogram, search_bins: int = 10,
                                steps_per_bin: int = 4) -> float:
    """Shift that makes the signed-return density most nearly symmetric.

    Coarse grid over +-``search_bins`` bin widths, then golden-section
    refinement between the neighbours of the best grid point.
    """
    w = hist.bin_width
    if hist.folded_pos.sum() == 0 or hist.folded_neg.sum() == 0:
        raise ShiftEstimationError("density is one-sided; nothing to symmetrize")
    half = hist.bin_edges[-1]
    grid = (np.arange(int(len(hist.density) * 4)) + 0.5) * (half / (len(hist.density) * 4))
    shifts = np.arange(-search_bins * steps_per_bin, search_bins * steps_per_bin + 1) * (w / steps_per_bin)
    vals = np.array([_asymmetry(hist, s, grid) for s in shifts])
    best = int(np.argmin(vals))
    if best == 0 or best == len(shifts) - 1:
        raise ShiftEstimationError(
            f"minimum at search edge (shift={shifts[best]:.3g}, asymmetry={vals[best]:.3g}); "
            f"widen search beyond +-{search_bins} bins")
    a, b, c = shifts[best - 1], shifts[best], shifts[best + 1]
    try:
        x = optimize.golden(lambda s: _asymmetry(hist, s, grid), brack=(a, b, c), tol=1e-6)
    except ValueError:
        # flat neighbourhood, the grid point is as good as it gets
        return float(b)
    x = float(x)
    return x if _asymmetry(hist, x, grid) <= vals[best] else float(b)


# ---------------------------------------------------------------------------
# output

def write_curve(curve: ResponseCurve, path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau", "value", "count", "stderr"])
        for row in zip(curve.lags.tolist(), curve.values.tolist(), curve.counts.tolist(),
                       curve.stderr.tolist()):
            w.writerow([row[0], repr(row[1]), row[2], repr(row[3])])


def read_curve(path, stock_i: str = "i", stock_j: str = "j", convention: str = "inc0",
               kind: str = "sign_correlator") -> ResponseCurve:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["tau", "value", "count", "stderr"]:
            raise ValueError(f"{path}: expected header tau,value,count,stderr")
        rows = list(reader)
    lags = np.array([int(r["tau"]) for r in rows], dtype=np.int64)
    values = np.array([float(r["value"]) for r in rows])
    counts = np.array([int(r["count"]) for r in rows], dtype=np.int64)
    stderr = np.array([float(r["stderr"]) for r in rows])
    return ResponseCurve(stock_i, stock_j, convention, kind, lags, values, counts, stderr,
                         np.where(counts > 0, values * counts, 0.0))


def write_histogram(hist: SignedReturnHistogram, path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_left", "bin_right", "density"])
        for a, b, d in zip(hist.bin_edges[:-1].tolist(), hist.bin_edges[1:].tolist(),
                           hist.density.tolist()):
            w.writerow([repr(a), repr(b), repr(d)])
