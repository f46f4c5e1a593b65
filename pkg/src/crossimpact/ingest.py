"""Trades-and-quotes ingestion on the one-second session grid.

Trades CSV: ``day,time,price,volume``; quotes CSV: ``day,time,bid,ask``.
Days are ISO dates, times ``HH:MM:SS`` local. Each day is windowed to the
half-open session ``[open, close)`` and indexed by session second.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import date, time
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
import pandas as pd

from crossimpact._io import atomic_write

log = logging.getLogger(__name__)

TRADE_COLUMNS = ("day", "time", "price", "volume")
QUOTE_COLUMNS = ("day", "time", "bid", "ask")


class IngestError(ValueError):
    """Base class for input file problems; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(IngestError):
    pass


class OrderingError(IngestError):
    pass


class CrossedQuoteError(ParseError):
    pass


class NoCommonDaysError(ValueError):
    pass


@dataclass(frozen=True)
class SessionWindow:
    open: time = time(9, 40)
    close: time = time(15, 50)

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError(f"session close {self.close} is not after open {self.open}")

    @property
    def open_seconds(self) -> int:
        return self.open.hour * 3600 + self.open.minute * 60 + self.open.second

    @property
    def close_seconds(self) -> int:
        return self.close.hour * 3600 + self.close.minute * 60 + self.close.second

    @property
    def length(self) -> int:
        return self.close_seconds - self.open_seconds

    def clock(self, second: int) -> str:
        """Wall-clock ``HH:MM:SS`` for a session-second index."""
        sod = self.open_seconds + int(second)
        return f"{sod // 3600:02d}:{sod % 3600 // 60:02d}:{sod % 60:02d}"

    def clock_table(self) -> np.ndarray:
        sod = self.open_seconds + np.arange(self.length)
        return np.array(
            [f"{s // 3600:02d}:{s % 3600 // 60:02d}:{s % 60:02d}" for s in sod.tolist()],
            dtype=object,
        )

    @classmethod
    def from_strings(cls, open_: str, close: str) -> "SessionWindow":
        return cls(time.fromisoformat(open_), time.fromisoformat(close))


@dataclass(frozen=True, slots=True)
class TradeRecord:
    day: date
    second: int
    seq: int
    price: float
    volume: int


@dataclass(frozen=True, slots=True)
class QuoteRecord:
    day: date
    second: int
    bid: float
    ask: float


@dataclass(frozen=True, eq=False)
class TradeDay:
    """Columnar in-window trades of one day, sorted by (second, seq)."""

    day: date
    second: np.ndarray
    seq: np.ndarray
    price: np.ndarray
    volume: np.ndarray

    def __len__(self) -> int:
        return len(self.second)

    def records(self) -> Iterator[TradeRecord]:
        for s, n, p, v in zip(self.second.tolist(), self.seq.tolist(),
                              self.price.tolist(), self.volume.tolist()):
            yield TradeRecord(self.day, s, n, p, v)

    def __eq__(self, other):
        if not isinstance(other, TradeDay):
            return NotImplemented
        return (self.day == other.day
                and np.array_equal(self.second, other.second)
                and np.array_equal(self.seq, other.seq)
                and np.array_equal(self.price, other.price)
                and np.array_equal(self.volume, other.volume))


@dataclass(frozen=True, eq=False)
class QuoteDay:
    """Columnar in-window quotes of one day, in file order."""

    day: date
    second: np.ndarray
    bid: np.ndarray
    ask: np.ndarray

    def __len__(self) -> int:
        return len(self.second)

    def records(self) -> Iterator[QuoteRecord]:
        for s, b, a in zip(self.second.tolist(), self.bid.tolist(), self.ask.tolist()):
            yield QuoteRecord(self.day, s, b, a)

    def __eq__(self, other):
        if not isinstance(other, QuoteDay):
            return NotImplemented
        return (self.day == other.day
                and np.array_equal(self.second, other.second)
                and np.array_equal(self.bid, other.bid)
                and np.array_equal(self.ask, other.ask))


@dataclass(frozen=True, eq=False)
class MidpointSeries:
    """Per-second midpoints; NaN marks seconds before the first quote."""

    day: date
    values: np.ndarray
    first_defined: int | None

    def __len__(self) -> int:
        return len(self.values)


# ---------------------------------------------------------------------------
# parsing

def _buffer(source) -> io.BytesIO:
    if isinstance(source, (str, os.PathLike)):
        return io.BytesIO(Path(source).read_bytes())
    if isinstance(source, (bytes, bytearray, memoryview)):
        return io.BytesIO(bytes(source))
    data = source.read()
    if isinstance(data, str):
        data = data.encode("utf-8")
    return io.BytesIO(data)


def _check_header(buf: io.BytesIO, columns: tuple[str, ...]) -> None:
    first = buf.readline().decode("utf-8-sig", errors="replace").strip()
    buf.seek(0)
    names = tuple(c.strip() for c in first.split(","))
    if names != columns:
        raise ParseError(f"expected header {','.join(columns)!r}, got {first!r}", line=1)


def _scan_lines(buf: io.BytesIO, columns: tuple[str, ...]) -> None:
    """Slow line-by-line validation, used to pinpoint the line behind a failure."""
    buf.seek(0)
    text = io.TextIOWrapper(buf, encoding="utf-8-sig", newline="")
    reader = csv.reader(text)
    next(reader, None)
    try:
        for row in reader:
            lineno = reader.line_num
            if not row:
                continue
            if len(row) != len(columns):
                raise ParseError(f"expected {len(columns)} fields, got {len(row)}", lineno)
            _parse_day(row[0], lineno)
            _parse_clock(row[1], lineno)
            for name, value in zip(columns[2:], row[2:]):
                if name == "sign":
                    if value.strip().upper() not in ("B", "S"):
                        raise ParseError(f"sign {value!r} is not B or S", lineno)
                elif name in ("volume", "seq"):
                    try:
                        v = int(value)
                    except ValueError:
                        raise ParseError(f"{name} {value!r} is not an integer", lineno) from None
                    if v < 1:
                        raise ParseError(f"{name} {v} must be >= 1", lineno)
                else:
                    try:
                        x = float(value)
                    except ValueError:
                        raise ParseError(f"{name} {value!r} is not a number", lineno) from None
                    if not (math.isfinite(x) and x > 0):
                        raise ParseError(f"{name} {value!r} must be > 0", lineno)
    except UnicodeDecodeError as exc:
        raise ParseError(f"file is not valid UTF-8: {exc}") from None
    finally:
        text.detach()


def _parse_day(value: str, lineno: int) -> date:
    try:
        if len(value) != 10:
            raise ValueError
        return date.fromisoformat(value)
    except ValueError:
        raise ParseError(f"day {value!r} is not an ISO date", lineno) from None


def _parse_clock(value: str, lineno: int) -> int:
    parts = value.split(":")
    if len(value) != 8 or len(parts) != 3 or not all(p.isdigit() for p in parts):
        raise ParseError(f"time {value!r} is not HH:MM:SS", lineno)
    h, m, s = (int(p) for p in parts)
    if h > 23 or m > 59 or s > 59:
        raise ParseError(f"time {value!r} out of range", lineno)
    return h * 3600 + m * 60 + s


def _fixed_width(values: np.ndarray, width: int, what: str) -> np.ndarray:
    """Encode strings to an (n, width+1) uint8 matrix; a trailing zero column proves length."""
    arr = values.astype(f"S{width + 1}")
    mat = arr.view(np.uint8).reshape(len(arr), width + 1)
    return mat


def _digits(mat: np.ndarray, cols: list[int]) -> np.ndarray:
    out = np.zeros(len(mat), dtype=np.int64)
    for c in cols:
        out = out * 10 + (mat[:, c].astype(np.int64) - 48)
    return out


def _vector_days(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (day codes yyyymmdd, bad-row mask)."""
    mat = _fixed_width(values, 10, "day")
    digit_cols = [0, 1, 2, 3, 5, 6, 8, 9]
    bad = (mat[:, 10] != 0) | (mat[:, 4] != ord("-")) | (mat[:, 7] != ord("-"))
    d = mat[:, digit_cols]
    bad |= ((d < 48) | (d > 57)).any(axis=1)
    return _digits(mat, digit_cols), bad


def _vector_clock(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mat = _fixed_width(values, 8, "time")
    bad = (mat[:, 8] != 0) | (mat[:, 2] != ord(":")) | (mat[:, 5] != ord(":"))
    d = mat[:, [0, 1, 3, 4, 6, 7]]
    bad |= ((d < 48) | (d > 57)).any(axis=1)
    h = _digits(mat, [0, 1])
    m = _digits(mat, [3, 4])
    s = _digits(mat, [6, 7])
    bad |= (h > 23) | (m > 59) | (s > 59)
    return h * 3600 + m * 60 + s, bad


def _read_table(source, columns: tuple[str, ...]) -> tuple[pd.DataFrame, io.BytesIO]:
    buf = _buffer(source)
    _check_header(buf, columns)
    dtypes = {"day": str, "time": str}
    for c in columns[2:]:
        dtypes[c] = "int64" if c == "volume" else "float64"
    try:
        df = pd.read_csv(buf, dtype=dtypes, engine="c", skip_blank_lines=True,
                         na_filter=True, encoding="utf-8-sig",
                         float_precision="round_trip")
    except (ValueError, pd.errors.ParserError, UnicodeDecodeError) as exc:
        _scan_lines(buf, columns)
        raise ParseError(str(exc)) from exc
    df.columns = [c.strip() for c in df.columns]
    if df[list(columns[:2])].isna().any().any():
        _scan_lines(buf, columns)
        raise ParseError("missing day/time field")
    return df, buf


def _first_bad(mask: np.ndarray) -> int:
    # data row i sits on file line i + 2 (header is line 1, no blank lines assumed)
    return int(np.flatnonzero(mask)[0]) + 2


def _ordered_keys(df: pd.DataFrame, buf: io.BytesIO, columns) -> tuple[np.ndarray, np.ndarray]:
    try:
        daycode, bad_day = _vector_days(df["day"].to_numpy())
        sod, bad_time = _vector_clock(df["time"].to_numpy())
    except UnicodeEncodeError:
        _scan_lines(buf, columns)
        raise ParseError("non-ASCII day/time field")
    if bad_day.any() or bad_time.any():
        _scan_lines(buf, columns)
        raise ParseError("malformed day/time", _first_bad(bad_day | bad_time))
    # calendar validity checked once per distinct day
    for code in np.unique(daycode).tolist():
        try:
            date(code // 10000, code // 100 % 100, code % 100)
        except ValueError:
            raise ParseError(f"invalid calendar day {code}",
                             _first_bad(daycode == code)) from None
    key = daycode * 86400 + sod
    if len(key) > 1:
        back = np.flatnonzero(np.diff(key) < 0)
        if len(back):
            i = int(back[0]) + 1
            what = "day" if daycode[i] < daycode[i - 1] else "timestamp"
            raise OrderingError(f"non-monotone {what}: {df['day'].iat[i]} {df['time'].iat[i]} "
                                f"after {df['day'].iat[i - 1]} {df['time'].iat[i - 1]}", i + 2)
    return daycode, sod


def _positive(df: pd.DataFrame, name: str, buf, columns) -> np.ndarray:
    x = df[name].to_numpy(dtype=np.float64)
    bad = ~np.isfinite(x) | (x <= 0)
    if bad.any():
        line = _first_bad(bad)
        raise ParseError(f"{name} {df[name].iat[line - 2]!r} must be a positive number", line)
    return x


def _split_days(daycode: np.ndarray) -> list[tuple[date, int, int]]:
    if len(daycode) == 0:
        return []
    starts = np.concatenate([[0], np.flatnonzero(np.diff(daycode)) + 1])
    ends = np.concatenate([starts[1:], [len(daycode)]])
    out = []
    for a, b in zip(starts.tolist(), ends.tolist()):
        c = int(daycode[a])
        out.append((date(c // 10000, c // 100 % 100, c % 100), a, b))
    return out


def _within_second_ordinal(second: np.ndarray) -> np.ndarray:
    n = len(second)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    new = np.ones(n, dtype=bool)
    new[1:] = second[1:] != second[:-1]
    starts = np.flatnonzero(new)
    group_start = starts[np.cumsum(new) - 1]
    return np.arange(n, dtype=np.int64) - group_start + 1


def parse_trades(source, window: SessionWindow = SessionWindow()) -> dict[date, TradeDay]:
    """Parse a trades CSV into per-day in-window trade columns.

    ``seq`` numbers trades within a second in file order, starting at 1.
    Rows outside ``[window.open, window.close)`` are dropped after validation.
    """
    df, buf = _read_table(source, TRADE_COLUMNS)
    daycode, sod = _ordered_keys(df, buf, TRADE_COLUMNS)
    price = _positive(df, "price", buf, TRADE_COLUMNS)
    volume = df["volume"].to_numpy(dtype=np.int64)
    if (volume < 1).any():
        line = _first_bad(volume < 1)
        raise ParseError(f"volume {volume[line - 2]} must be >= 1", line)
    second = sod - window.open_seconds
    keep = (second >= 0) & (second < window.length)
    daycode, second, price, volume = daycode[keep], second[keep], price[keep], volume[keep]
    out = {}
    for day, a, b in _split_days(daycode):
        s = second[a:b]
        out[day] = TradeDay(day, s.copy(), _within_second_ordinal(s),
                            price[a:b].copy(), volume[a:b].copy())
    return out


def parse_quotes(source, window: SessionWindow = SessionWindow()) -> dict[date, QuoteDay]:
    """Parse a quotes CSV into per-day in-window quote columns (ask >= bid > 0)."""
    df, buf = _read_table(source, QUOTE_COLUMNS)
    daycode, sod = _ordered_keys(df, buf, QUOTE_COLUMNS)
    bid = _positive(df, "bid", buf, QUOTE_COLUMNS)
    ask = _positive(df, "ask", buf, QUOTE_COLUMNS)
    crossed = ask < bid
    if crossed.any():
        line = _first_bad(crossed)
        raise CrossedQuoteError(f"crossed quote bid {bid[line - 2]!r} > ask {ask[line - 2]!r}", line)
    second = sod - window.open_seconds
    keep = (second >= 0) & (second < window.length)
    daycode, second, bid, ask = daycode[keep], second[keep], bid[keep], ask[keep]
    return {day: QuoteDay(day, second[a:b].copy(), bid[a:b].copy(), ask[a:b].copy())
            for day, a, b in _split_days(daycode)}


# ---------------------------------------------------------------------------
# serialization

def write_rows(dest, header: tuple[str, ...], days: Mapping[date, object],
               window: SessionWindow, columns) -> None:
    """Write ``day,time,<columns>`` rows day by day; floats use the shortest
    repr that round-trips, so parse(write(x)) == x."""
    clocks = window.clock_table()

    def body(fh):
        fh.write(",".join(header) + "\n")
        for day in sorted(days):
            rec = days[day]
            iso = day.isoformat()
            cols = [clocks[rec.second].tolist()]
            cols += [list(map(str, c(rec) if callable(c) else getattr(rec, c).tolist()))
                     for c in columns]
            fh.write("".join(f"{iso},{','.join(row)}\n" for row in zip(*cols)))

    if isinstance(dest, (str, os.PathLike)):
        with atomic_write(dest) as fh:
            body(fh)
    else:
        body(dest)


def write_trades(days: Mapping[date, TradeDay], dest, window: SessionWindow = SessionWindow()) -> None:
    write_rows(dest, TRADE_COLUMNS, days, window, ("price", "volume"))


def write_quotes(days: Mapping[date, QuoteDay], dest, window: SessionWindow = SessionWindow()) -> None:
    write_rows(dest, QUOTE_COLUMNS, days, window, ("bid", "ask"))


# ---------------------------------------------------------------------------
# midpoints and day alignment

def build_midpoints(quotes: QuoteDay, window: SessionWindow = SessionWindow()) -> MidpointSeries | None:
    """Carry the last quote midpoint of each second forward over the session.

    Returns None (with a warning) for a day without quotes.
    """
    n = window.length
    if len(quotes) == 0:
        log.warning("no quotes on %s, day skipped", quotes.day)
        return None
    sec = quotes.second
    last = np.ones(len(sec), dtype=bool)
    last[:-1] = sec[1:] != sec[:-1]
    mid = np.full(n, np.nan)
    mid[sec[last]] = 0.5 * (quotes.bid[last] + quotes.ask[last])
    defined = ~np.isnan(mid)
    idx = np.where(defined, np.arange(n), 0)
    np.maximum.accumulate(idx, out=idx)
    first = int(sec[0])
    values = mid[idx]
    values[:first] = np.nan
    return MidpointSeries(quotes.day, values, first)


def midpoints_by_day(quotes: Mapping[date, QuoteDay],
                     window: SessionWindow = SessionWindow()) -> dict[date, MidpointSeries]:
    out = {}
    for day in sorted(quotes):
        m = build_midpoints(quotes[day], window)
        if m is not None:
            out[day] = m
    return out


def common_days(days_i: Iterable[date], days_j: Iterable[date]) -> list[date]:
    """Ascending intersection of two day sets; empty result is an error."""
    out = sorted(set(days_i) & set(days_j))
    if not out:
        raise NoCommonDaysError("no common trading days")
    return out


@dataclass
class StockData:
    symbol: str
    trades: dict[date, TradeDay]
    quotes: dict[date, QuoteDay]
    window: SessionWindow = field(default_factory=SessionWindow)

    @property
    def days(self) -> list[date]:
        """Days with at least one in-window trade and one in-window quote."""
        return sorted(d for d, t in self.trades.items()
                      if len(t) and d in self.quotes and len(self.quotes[d]))


def trades_path(data_dir, symbol: str) -> Path:
    return Path(data_dir) / f"{symbol}_trades.csv"


def quotes_path(data_dir, symbol: str) -> Path:
    return Path(data_dir) / f"{symbol}_quotes.csv"


def reference_path(data_dir, symbol: str) -> Path:
    return Path(data_dir) / f"{symbol}_reference.csv"


def load_stock(data_dir, symbol: str, window: SessionWindow = SessionWindow()) -> StockData:
    return StockData(symbol,
                     parse_trades(trades_path(data_dir, symbol), window),
                     parse_quotes(quotes_path(data_dir, symbol), window),
                     window)


# ---------------------------------------------------------------------------
# sector metadata

def read_sectors(path) -> dict[str, str]:
    """Read ``symbol,sector`` rows (CSV) or ``[[stocks]]`` tables (TOML).

    The returned dict keeps file order, which fixes the sector order used
    for matrix layout.
    """
    path = Path(path)
    out: dict[str, str] = {}
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        rows = [(r["symbol"], r["sector"]) for r in doc.get("stocks", [])]
    else:
        with open(path, encoding="utf-8-sig", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["symbol", "sector"]:
                raise ParseError("sector metadata needs header 'symbol,sector'", 1)
            rows = [(r["symbol"].strip(), r["sector"].strip()) for r in reader]
    for symbol, sector in rows:
        if symbol in out and out[symbol] != sector:
            raise ParseError(f"symbol {symbol} listed under two sectors")
        out[symbol] = sector
    return out


def write_sectors(sectors: Mapping[str, str], path) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["symbol", "sector"])
        for symbol, sector in sectors.items():
            w.writerow([symbol, sector])
