"""Market-response matrices: all pairwise responses at one lag, scaled by the
largest magnitude among them."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from crossimpact._io import atomic_write
from crossimpact.response import ResponseCurve

log = logging.getLogger(__name__)


class MatrixGapError(ValueError):
    def __init__(self, pairs: list[tuple[str, str]], tau: int):
        self.pairs = pairs
        shown = ", ".join(f"{i}<-{j}" for i, j in pairs[:10])
        more = f" (+{len(pairs) - 10} more)" if len(pairs) > 10 else ""
        super().__init__(f"no response at tau={tau} for {len(pairs)} pair(s): {shown}{more}")


@dataclass(frozen=True, eq=False)
class MarketResponseMatrix:
    """Row i, column j holds the response of stock i's price to stock j's trades."""

    tau: int | None
    symbols: list[str]
    entries: np.ndarray
    convention: str | None
    max_abs: float | None
    sectors: list[str | None] | None = None

    @property
    def all_zero(self) -> bool:
        return not np.any(self.entries)


def sector_order(symbols: Sequence[str], sector_meta: Mapping[str, str] | None) -> list[str]:
    """Group by sector in metadata order, then by symbol within a sector."""
    symbols = sorted(set(symbols))
    if not sector_meta:
        return symbols
    unknown = [s for s in symbols if s not in sector_meta]
    if unknown:
        raise KeyError(f"symbols missing from sector metadata: {unknown}")
    rank = {}
    for sector in sector_meta.values():
        rank.setdefault(sector, len(rank))
    return sorted(symbols, key=lambda s: (rank[sector_meta[s]], s))


def build_matrix(curves: Mapping[tuple[str, str], ResponseCurve], tau: int,
                 sector_meta: Mapping[str, str] | None = None,
                 symbols: Sequence[str] | None = None) -> MarketResponseMatrix:
    """Normalize R_ij(tau) by max |R_ij(tau)| over all ordered pairs, self pairs included."""
    if symbols is None:
        symbols = {s for k in curves for s in k}
    order = sector_order(symbols, sector_meta)
    n = len(order)
    raw = np.full((n, n), np.nan)
    missing = []
    convention = None
    for a, i in enumerate(order):
        for b, j in enumerate(order):
            c = curves.get((i, j))
            v = np.nan
            if c is not None:
                convention = convention or c.convention
                try:
                    v = c.at(tau)
                except KeyError:
                    pass
            if np.isnan(v):
                missing.append((i, j))
            raw[a, b] = v
    if missing:
        raise MatrixGapError(missing, tau)
    max_abs = float(np.abs(raw).max()) if n else 0.0
    if max_abs > 0:
        entries = raw / max_abs
    else:
        log.warning("all responses are zero at tau=%d; matrix flagged all-zero", tau)
        entries = np.zeros_like(raw)
    sectors = [sector_meta[s] for s in order] if sector_meta else None
    return MarketResponseMatrix(tau, order, entries, convention, max_abs, sectors)


def export_matrix(matrix: MarketResponseMatrix, path, fmt: str | None = None) -> Path:
    """Write the matrix as a labelled dense CSV grid or as JSON."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "csv").lower()
    if fmt == "csv":
        with atomic_write(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["symbol", *matrix.symbols])
            for s, row in zip(matrix.symbols, matrix.entries.tolist()):
                w.writerow([s, *(repr(x) for x in row)])
    elif fmt == "json":
        doc = {
            "tau": matrix.tau,
            "convention": matrix.convention,
            "max_abs": matrix.max_abs,
            "symbols": matrix.symbols,
            "sectors": matrix.sectors,
            "entries": matrix.entries.tolist(),
        }
        with atomic_write(path) as fh:
            json.dump(doc, fh)
            fh.write("\n")
    else:
        raise ValueError(f"unknown matrix format {fmt!r}")
    return path


def load_matrix(path, fmt: str | None = None) -> MarketResponseMatrix:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "csv").lower()
    if fmt == "json":
        doc = json.loads(path.read_text(encoding="utf-8"))
        return MarketResponseMatrix(doc["tau"], doc["symbols"],
                                    np.array(doc["entries"], dtype=np.float64).reshape(
                                        len(doc["symbols"]), len(doc["symbols"])),
                                    doc["convention"], doc["max_abs"], doc.get("sectors"))
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    symbols = rows[0][1:]
    if [r[0] for r in rows[1:]] != symbols:
        raise ValueError(f"{path}: row labels do not match column labels")
    entries = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
    return MarketResponseMatrix(None, symbols, entries.reshape(len(symbols), len(symbols)),
                                None, None)
