"""Trade-sign classification and per-second aggregation.

Per-trade signs follow the tick rule: the sign of the price change against
the previous trade of the same day, inheriting the previous sign when the
price is unchanged. Trades before the first price change of a day have no
reference and stay unset (stored as 0). Per-second signs are the sign of
the summed per-trade signs (number imbalance) or of the volume-weighted sum
(volume imbalance).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

from crossimpact._io import atomic_write
from crossimpact.ingest import (
    ParseError,
    SessionWindow,
    TradeDay,
    _buffer,
    _check_header,
    _ordered_keys,
    _scan_lines,
    _split_days,
    write_rows,
)

REFERENCE_COLUMNS = ("day", "time", "seq", "sign")
CONVENTIONS = ("number", "volume")


class ConsistencyError(ValueError):
    """Reference labels that do not line up with the trades they describe."""


@dataclass(frozen=True, eq=False)
class PerTradeSignSeries:
    day: date
    second: np.ndarray
    seq: np.ndarray
    sign: np.ndarray  # int8; 0 = unset

    def __len__(self) -> int:
        return len(self.sign)

    @property
    def keys(self) -> np.ndarray:
        return _key(self.second, self.seq)


@dataclass(frozen=True, eq=False)
class SignSeries:
    day: date
    values: np.ndarray  # int8 over the session grid
    convention: str = "number"

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class AccuracyReport:
    n_identified: int
    n_matches: int
    accuracy: float
    n_zero_signs: int = 0
    excluded_all_zero: int = 0

    def as_dict(self) -> dict:
        return {
            "n_identified": self.n_identified,
            "n_matches": self.n_matches,
            "accuracy": self.accuracy,
            "n_zero_signs": self.n_zero_signs,
            "excluded_all_zero": self.excluded_all_zero,
        }


def _report(n_identified: int, n_matches: int, **extra) -> AccuracyReport:
    acc = n_matches / n_identified if n_identified else float("nan")
    return AccuracyReport(int(n_identified), int(n_matches), acc, **extra)


def _key(second: np.ndarray, seq: np.ndarray) -> np.ndarray:
    return second.astype(np.int64) * (1 << 32) + seq.astype(np.int64)


# ---------------------------------------------------------------------------
# classification and aggregation

def classify_per_trade(trades: TradeDay) -> PerTradeSignSeries:
    """Tick-rule sign of every trade; unset (0) until the first price change."""
    n = len(trades)
    sign = np.zeros(n, dtype=np.int8)
    if n > 1:
        sign[1:] = np.sign(np.diff(trades.price)).astype(np.int8)
        # zero ticks inherit the most recent nonzero sign
        idx = np.where(sign != 0, np.arange(n), -1)
        np.maximum.accumulate(idx, out=idx)
        sign = np.where(idx >= 0, sign[np.maximum(idx, 0)], 0).astype(np.int8)
    return PerTradeSignSeries(trades.day, trades.second, trades.seq, sign)


def _aggregate(second: np.ndarray, weights: np.ndarray, length: int) -> np.ndarray:
    total = np.bincount(second, weights=weights, minlength=length)
    return np.sign(total).astype(np.int8)


def aggregate_number(per_trade: PerTradeSignSeries,
                     window: SessionWindow = SessionWindow()) -> SignSeries:
    """sgn of the per-trade sign sum in each second; 0 for no trade or balance."""
    values = _aggregate(per_trade.second, per_trade.sign.astype(np.float64), window.length)
    return SignSeries(per_trade.day, values, "number")


def aggregate_volume(per_trade: PerTradeSignSeries, trades: TradeDay,
                     window: SessionWindow = SessionWindow()) -> SignSeries:
    """sgn of the signed volume sum in each second."""
    if not (np.array_equal(per_trade.second, trades.second)
            and np.array_equal(per_trade.seq, trades.seq)):
        raise ConsistencyError(f"{per_trade.day}: sign series and trades are not aligned")
    w = per_trade.sign.astype(np.float64) * trades.volume.astype(np.float64)
    return SignSeries(per_trade.day, _aggregate(per_trade.second, w, window.length), "volume")


def signs_by_day(trades: Mapping[date, TradeDay], window: SessionWindow = SessionWindow(),
                 convention: str = "number") -> dict[date, SignSeries]:
    """Convenience: classify and aggregate every day of a stock."""
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown sign convention {convention!r}")
    out = {}
    for day in sorted(trades):
        pt = classify_per_trade(trades[day])
        if convention == "number":
            out[day] = aggregate_number(pt, window)
        else:
            out[day] = aggregate_volume(pt, trades[day], window)
    return out


# ---------------------------------------------------------------------------
# reference labels

@dataclass(frozen=True, eq=False)
class ReferenceDay:
    day: date
    second: np.ndarray
    seq: np.ndarray
    sign: np.ndarray  # int8, +1 buyer-initiated, -1 seller-initiated

    def __len__(self) -> int:
        return len(self.sign)


def parse_reference(source, window: SessionWindow = SessionWindow()) -> dict[date, ReferenceDay]:
    """Read a ``day,time,seq,sign`` label file; sign B -> +1, S -> -1."""
    df, buf = _read_reference_frame(source)
    daycode, sod = _ordered_keys(df, buf, REFERENCE_COLUMNS)
    seq = df["seq"].to_numpy(dtype=np.int64)
    if (seq < 1).any():
        line = int(np.flatnonzero(seq < 1)[0]) + 2
        raise ParseError(f"seq {seq[line - 2]} must be >= 1", line)
    raw = df["sign"].astype(str).str.strip().str.upper()
    sign = np.where(raw == "B", 1, np.where(raw == "S", -1, 0)).astype(np.int8)
    if (sign == 0).any():
        line = int(np.flatnonzero(sign == 0)[0]) + 2
        raise ParseError(f"sign {df['sign'].iat[line - 2]!r} is not B or S", line)
    second = sod - window.open_seconds
    keep = (second >= 0) & (second < window.length)
    daycode, second, seq, sign = daycode[keep], second[keep], seq[keep], sign[keep]
    out = {}
    for day, a, b in _split_days(daycode):
        k = _key(second[a:b], seq[a:b])
        if len(k) > 1 and (np.diff(k) <= 0).any():
            raise ParseError(f"{day}: reference (second, seq) keys not strictly increasing")
        out[day] = ReferenceDay(day, second[a:b].copy(), seq[a:b].copy(), sign[a:b].copy())
    return out


def _read_reference_frame(source):
    buf = _buffer(source)
    _check_header(buf, REFERENCE_COLUMNS)
    try:
        df = pd.read_csv(buf, dtype={"day": str, "time": str, "seq": "int64", "sign": str},
                         engine="c", encoding="utf-8-sig", keep_default_na=False)
    except (ValueError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        _scan_lines(buf, REFERENCE_COLUMNS)
        raise ParseError(f"malformed reference file: {exc}") from exc
    df.columns = [c.strip() for c in df.columns]
    return df, buf


def write_reference(days: Mapping[date, ReferenceDay], dest,
                    window: SessionWindow = SessionWindow()) -> None:
    write_rows(dest, REFERENCE_COLUMNS, days, window,
               ("seq", lambda r: np.where(r.sign > 0, "B", "S").tolist()))


def _locate(theoretical: PerTradeSignSeries, ref: ReferenceDay) -> np.ndarray:
    tkeys = theoretical.keys
    rkeys = _key(ref.second, ref.seq)
    pos = np.searchsorted(tkeys, rkeys)
    ok = pos < len(tkeys)
    ok[ok] = tkeys[pos[ok]] == rkeys[ok]
    if not ok.all():
        i = int(np.flatnonzero(~ok)[0])
        raise ConsistencyError(
            f"{ref.day}: reference trade (second {ref.second[i]}, seq {ref.seq[i]}) "
            "not present in trades file")
    return pos


def reference_per_trade(reference: ReferenceDay, trades: TradeDay) -> PerTradeSignSeries:
    """Empirical per-trade signs aligned to ``trades``; hidden trades stay 0."""
    base = PerTradeSignSeries(trades.day, trades.second, trades.seq,
                              np.zeros(len(trades), dtype=np.int8))
    pos = _locate(base, reference)
    sign = base.sign.copy()
    sign[pos] = reference.sign
    return PerTradeSignSeries(trades.day, trades.second, trades.seq, sign)


def accuracy_per_trade(theoretical: Mapping[date, PerTradeSignSeries],
                       reference: Mapping[date, ReferenceDay]) -> AccuracyReport:
    """Share of identified trades whose tick-rule sign equals the reference label.

    Identified trades are the reference keys whose theoretical sign is set;
    ``n_zero_signs`` counts referenced trades left unset by the tick rule.
    """
    n_id = n_match = n_unset = 0
    for day in sorted(reference):
        ref = reference[day]
        if day not in theoretical:
            if len(ref):
                raise ConsistencyError(f"reference day {day} has no trades")
            continue
        th = theoretical[day]
        pos = _locate(th, ref)
        tsign = th.sign[pos]
        isset = tsign != 0
        n_unset += int((~isset).sum())
        n_id += int(isset.sum())
        n_match += int((tsign[isset] == ref.sign[isset]).sum())
    return _report(n_id, n_match, n_zero_signs=n_unset)


def accuracy_per_second(theoretical: Mapping[date, SignSeries],
                        reference_number: Mapping[date, SignSeries],
                        reference_volume: Mapping[date, SignSeries]) -> dict[str, AccuracyReport]:
    """Compare per-second theoretical signs with both reference aggregations.

    Seconds where all three series are 0 are dropped first; the remaining
    seconds form the identified trading time for both comparisons.
    """
    days = sorted(theoretical)
    if sorted(reference_number) != days or sorted(reference_volume) != days:
        raise ValueError("theoretical and reference series cover different days")
    n_id = 0
    excluded = 0
    matches = {"number": 0, "volume": 0}
    zeros = {"number": 0, "volume": 0}
    for day in days:
        th = theoretical[day].values
        refs = {"number": reference_number[day].values, "volume": reference_volume[day].values}
        if any(len(r) != len(th) for r in refs.values()):
            raise ValueError(f"{day}: series lengths differ")
        all_zero = (th == 0) & (refs["number"] == 0) & (refs["volume"] == 0)
        keep = ~all_zero
        excluded += int(all_zero.sum())
        n_id += int(keep.sum())
        for name, r in refs.items():
            matches[name] += int((th[keep] == r[keep]).sum())
            zeros[name] += int((r == 0).sum())
    return {name: _report(n_id, matches[name], n_zero_signs=zeros[name], excluded_all_zero=excluded)
            for name in ("number", "volume")}


# ---------------------------------------------------------------------------
# persistence across no-trade gaps

@dataclass
class GapPersistence:
    """Counts of same/different signs around runs of zero signs, by run length.

    Index ``k`` of the count arrays is the gap length in seconds; index 0 is
    unused.
    """

    same: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    diff: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))

    @property
    def bins(self) -> np.ndarray:
        return np.arange(1, len(self.same))

    @property
    def counts(self) -> np.ndarray:
        return (self.same + self.diff)[1:]

    @property
    def p_same(self) -> np.ndarray:
        tot = self.counts
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, self.same[1:] / np.maximum(tot, 1), np.nan)

    @property
    def p_diff(self) -> np.ndarray:
        tot = self.counts
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(tot > 0, self.diff[1:] / np.maximum(tot, 1), np.nan)

    def __add__(self, other: "GapPersistence") -> "GapPersistence":
        n = max(len(self.same), len(other.same))
        s = np.zeros(n, dtype=np.int64)
        d = np.zeros(n, dtype=np.int64)
        s[:len(self.same)] += self.same
        s[:len(other.same)] += other.same
        d[:len(self.diff)] += self.diff
        d[:len(other.diff)] += other.diff
        return GapPersistence(s, d)


def _gaps_one_day(values: np.ndarray) -> GapPersistence:
    nz = np.flatnonzero(values)
    if len(nz) < 2:
        return GapPersistence()
    gap = np.diff(nz) - 1
    inner = gap > 0
    gap = gap[inner]
    same = (values[nz[:-1]] == values[nz[1:]])[inner]
    n = int(gap.max()) + 1 if len(gap) else 1
    return GapPersistence(np.bincount(gap[same], minlength=n).astype(np.int64),
                          np.bincount(gap[~same], minlength=n).astype(np.int64))


def gap_persistence(series: Iterable[SignSeries]) -> GapPersistence:
    """Accumulate sign persistence across zero runs bounded by nonzero signs.

    Runs never span days; runs at the start or end of a day are ignored.
    """
    acc = GapPersistence()
    for s in series:
        if s.convention != "number":
            raise ValueError("gap persistence expects number-imbalance sign series")
        acc = acc + _gaps_one_day(s.values)
    return acc


def write_gap_persistence(gp: GapPersistence, path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau0", "p_same", "p_diff", "count"])
        for k, ps, pd_, c in zip(gp.bins.tolist(), gp.p_same.tolist(), gp.p_diff.tolist(),
                                 gp.counts.tolist()):
            w.writerow([k, repr(ps), repr(pd_), c])
