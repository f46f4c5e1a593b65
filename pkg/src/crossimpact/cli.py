"""Command-line entry point.

Subcommands: signs, response, correlator, fit, matrix, noise, generate.
Settings come from an optional TOML file (``--config``); flags given on the
command line override it. Exit codes: 0 success, 1 computation error,
2 usage or I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

from crossimpact import fitting, matrix, noise, response, signs, synthgen
from crossimpact._io import atomic_write
from crossimpact.ingest import (
    IngestError,
    SessionWindow,
    common_days,
    load_stock,
    midpoints_by_day,
    read_sectors,
    reference_path,
)

log = logging.getLogger("crossimpact")

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2
DEFAULT_TAUS = "1,2,60,300,1800,7200"


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    data_dir: Path | None = None
    symbols: list[str] = field(default_factory=list)
    pairs: list[tuple[str, str]] = field(default_factory=list)
    sector_meta: Path | None = None
    lags: str = "1:1000"
    conventions: tuple[str, ...] = ("inc0", "exc0")
    output_dir: Path = Path("out")
    jobs: int = 1
    session: SessionWindow = field(default_factory=SessionWindow)

    @property
    def grid(self) -> response.LagGrid:
        return response.LagGrid.parse(self.lags)


# ---------------------------------------------------------------------------
# config handling

def _load_toml(path: Path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"bad config file {path}: {exc}") from None


def _split_list(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return [str(v) for v in value]


def _parse_pairs(value) -> list[tuple[str, str]]:
    out = []
    for item in _split_list(value):
        if ":" not in item:
            raise UsageError(f"pair {item!r} must look like I:J")
        i, j = item.split(":", 1)
        out.append((i.strip(), j.strip()))
    return out


def _conventions(value: str) -> tuple[str, ...]:
    if value == "both":
        return ("inc0", "exc0")
    if value in ("inc0", "exc0"):
        return (value,)
    raise UsageError(f"--convention must be inc0, exc0 or both, got {value!r}")


def build_config(args: argparse.Namespace) -> tuple[RunConfig, dict]:
    """Merge TOML settings with command-line flags (flags win)."""
    doc = _load_toml(Path(args.config)) if args.config else {}
    section = dict(doc.get("run", {}))
    section.update(doc.get(args.command, {}))

    def pick(flag: str, key: str | None = None):
        value = getattr(args, flag, None)
        return value if value is not None else section.get(key or flag)

    cfg = RunConfig()
    data = pick("data", "data_dir")
    cfg.data_dir = Path(data) if data else None
    cfg.symbols = _split_list(pick("symbols"))
    cfg.pairs = _parse_pairs(pick("pairs"))
    sectors = pick("sectors", "sector_meta")
    cfg.sector_meta = Path(sectors) if sectors else None
    cfg.lags = str(pick("lags") or cfg.lags)
    cfg.conventions = _conventions(pick("convention") or "both")
    cfg.output_dir = Path(pick("output", "output_dir") or cfg.output_dir)
    cfg.jobs = int(pick("jobs") or 1)
    if cfg.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    session = section.get("session")
    if session:
        cfg.session = SessionWindow.from_strings(session["open"], session["close"])
    try:
        cfg.grid
    except ValueError as exc:
        raise UsageError(f"bad --lags {cfg.lags!r}: {exc}") from None
    for path in (cfg.data_dir, cfg.sector_meta):
        if path is not None and not path.exists():
            raise UsageError(f"path does not exist: {path}")
    return cfg, section


# ---------------------------------------------------------------------------
# data preparation and the worker pool

@dataclass
class Prepared:
    symbol: str
    days: list
    midpoints: dict
    signs: dict


_PREPARED: dict[str, Prepared] = {}


def _prepare(data_dir: Path, symbol: str, window: SessionWindow) -> Prepared:
    stock = load_stock(data_dir, symbol, window)
    days = stock.days
    mids = midpoints_by_day({d: stock.quotes[d] for d in days}, window)
    sgn = signs.signs_by_day({d: stock.trades[d] for d in days}, window)
    return Prepared(symbol, days, mids, sgn)


def _prepare_task(args):
    return _prepare(*args)


def pool_map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map over a bounded process pool; in-process for jobs == 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as ex:
        return list(ex.map(fn, items))


def load_prepared(cfg: RunConfig, symbols: Iterable[str]) -> dict[str, Prepared]:
    if cfg.data_dir is None:
        raise UsageError("--data is required")
    symbols = sorted(set(symbols))
    for s in symbols:
        for p in (cfg.data_dir / f"{s}_trades.csv", cfg.data_dir / f"{s}_quotes.csv"):
            if not p.exists():
                raise UsageError(f"missing input file {p}")
    prepared = pool_map(_prepare_task, [(cfg.data_dir, s, cfg.session) for s in symbols], cfg.jobs)
    _PREPARED.clear()
    _PREPARED.update({p.symbol: p for p in prepared})
    return dict(_PREPARED)


def _aligned(i: str, j: str):
    a, b = _PREPARED[i], _PREPARED[j]
    days = common_days(a.days, b.days)
    return days, a, b


def _response_task(args):
    i, j, lags = args
    days, a, b = _aligned(i, j)
    return response.response_curves({d: a.midpoints[d] for d in days},
                                    {d: b.signs[d] for d in days},
                                    response.LagGrid(lags), i, j)


def _correlator_task(args):
    i, j, lags, exclude_both = args
    days, a, b = _aligned(i, j)
    return response.sign_correlator_curves({d: a.signs[d] for d in days},
                                           {d: b.signs[d] for d in days},
                                           response.LagGrid(lags), i, j, exclude_both)


def _noise_task(args):
    i, j, lags, convention = args
    days, a, b = _aligned(i, j)
    return noise.response_noise({d: a.midpoints[d] for d in days},
                                {d: b.signs[d] for d in days},
                                response.LagGrid(lags), convention, i, j)


def _resolve_pairs(cfg: RunConfig, all_pairs_default: bool = True) -> list[tuple[str, str]]:
    if cfg.pairs:
        return cfg.pairs
    symbols = cfg.symbols
    if not symbols and cfg.sector_meta:
        symbols = list(read_sectors(cfg.sector_meta))
    if not symbols:
        raise UsageError("give --pairs or --symbols")
    return [(i, j) for i in symbols for j in symbols] if all_pairs_default else []


def _write_json(path: Path, doc) -> None:
    with atomic_write(path) as fh:
        json.dump(doc, fh, indent=2, sort_keys=False)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands

def cmd_signs(cfg: RunConfig, args, section) -> None:
    symbols = cfg.symbols or [p[0] for p in cfg.pairs]
    if not symbols:
        raise UsageError("give --symbols")
    if cfg.data_dir is None:
        raise UsageError("--data is required")
    use_reference = bool(args.reference or section.get("reference"))
    if use_reference:
        for s in symbols:
            if not reference_path(cfg.data_dir, s).exists():
                raise UsageError(f"missing reference file {reference_path(cfg.data_dir, s)}")
    volume_source = args.volume_reference or section.get("volume_reference", "empirical")
    window = cfg.session
    clocks = window.clock_table()
    for s in symbols:
        stock = load_stock(cfg.data_dir, s, window)
        per_trade = {d: signs.classify_per_trade(t) for d, t in stock.trades.items()}
        number = {d: signs.aggregate_number(pt, window) for d, pt in per_trade.items()}
        volume = {d: signs.aggregate_volume(pt, stock.trades[d], window)
                  for d, pt in per_trade.items()}
        with atomic_write(cfg.output_dir / f"{s}_signs.csv") as fh:
            fh.write("day,time,number,volume\n")
            for d in sorted(number):
                iso = d.isoformat()
                rows = zip(clocks.tolist(), number[d].values.tolist(), volume[d].values.tolist())
                fh.writelines(f"{iso},{c},{n},{v}\n" for c, n, v in rows)
        signs.write_gap_persistence(signs.gap_persistence(number[d] for d in sorted(number)),
                                    cfg.output_dir / f"{s}_gaps.csv")
        if not use_reference:
            continue
        ref = signs.parse_reference(reference_path(cfg.data_dir, s), window)
        per_trade_report = signs.accuracy_per_trade(per_trade, ref)
        days = sorted(d for d in ref if d in stock.trades)
        emp = {d: signs.reference_per_trade(ref[d], stock.trades[d]) for d in days}
        ref_number = {d: signs.aggregate_number(emp[d], window) for d in days}
        vol_src = emp if volume_source == "empirical" else {d: per_trade[d] for d in days}
        ref_volume = {d: signs.aggregate_volume(vol_src[d], stock.trades[d], window) for d in days}
        per_second = signs.accuracy_per_second({d: number[d] for d in days}, ref_number, ref_volume)
        _write_json(cfg.output_dir / f"{s}_accuracy.json", {
            "symbol": s,
            "days": [d.isoformat() for d in days],
            "per_trade": per_trade_report.as_dict(),
            "per_second": {k: v.as_dict() for k, v in per_second.items()},
            "volume_reference_source": volume_source,
        })


def cmd_response(cfg: RunConfig, args, section) -> None:
    pairs = _resolve_pairs(cfg)
    load_prepared(cfg, {s for p in pairs for s in p})
    lags = cfg.grid.lags
    results = pool_map(_response_task, [(i, j, lags) for i, j in pairs], cfg.jobs)
    by_pair = dict(zip(pairs, results))
    for (i, j), curves in by_pair.items():
        for conv in cfg.conventions:
            response.write_curve(curves[conv], cfg.output_dir / f"response_{i}_{j}_{conv}.csv")
        if len(cfg.conventions) == 2:
            response.write_curve(response.only_zero(curves["inc0"], curves["exc0"]),
                                 cfg.output_dir / f"response_{i}_{j}_only0.csv")
    if args.market or section.get("market"):
        for conv in cfg.conventions:
            avg = response.market_average({k: v[conv] for k, v in by_pair.items()})
            response.write_curve(avg.curve, cfg.output_dir / f"market_average_{conv}.csv")
    tau = args.histogram if args.histogram is not None else section.get("histogram")
    if tau is not None:
        for i, j in pairs:
            days, a, b = _aligned(i, j)
            for conv in cfg.conventions:
                h = response.signed_return_histogram({d: a.midpoints[d] for d in days},
                                                     {d: b.signs[d] for d in days},
                                                     int(tau), convention=conv)
                stem = f"histogram_{i}_{j}_{conv}_tau{int(tau)}"
                response.write_histogram(h, cfg.output_dir / f"{stem}.csv")
                _write_json(cfg.output_dir / f"{stem}.json",
                            {"tau": int(tau), "shift": h.shift, "n_events": h.n_events,
                             "bin_width": h.bin_width})


def _correlators(cfg: RunConfig, pairs, exclude_both: bool):
    load_prepared(cfg, {s for p in pairs for s in p})
    lags = cfg.grid.lags
    results = pool_map(_correlator_task, [(i, j, lags, exclude_both) for i, j in pairs], cfg.jobs)
    return dict(zip(pairs, results))


def cmd_correlator(cfg: RunConfig, args, section) -> None:
    pairs = _resolve_pairs(cfg)
    exclude_both = bool(args.exclude_both or section.get("exclude_both"))
    for (i, j), curves in _correlators(cfg, pairs, exclude_both).items():
        for conv in cfg.conventions:
            response.write_curve(curves[conv], cfg.output_dir / f"correlator_{i}_{j}_{conv}.csv")
        if len(cfg.conventions) == 2:
            response.write_curve(response.only_zero(curves["inc0"], curves["exc0"]),
                                 cfg.output_dir / f"correlator_{i}_{j}_only0.csv")


def cmd_fit(cfg: RunConfig, args, section) -> None:
    inputs = [Path(p) for p in (args.inputs or section.get("inputs", []))]
    jobs = []
    if inputs:
        for p in inputs:
            if not p.exists():
                raise UsageError(f"missing input file {p}")
            jobs.append((p.stem, response.read_curve(p)))
    else:
        pairs = _resolve_pairs(cfg)
        exclude_both = bool(args.exclude_both or section.get("exclude_both"))
        for (i, j), curves in _correlators(cfg, pairs, exclude_both).items():
            for conv in cfg.conventions:
                jobs.append((f"correlator_{i}_{j}_{conv}", curves[conv]))
    for name, curve in jobs:
        fit = fitting.fit_powerlaw(curve)
        fitting.write_fit(fit, cfg.output_dir / f"fit_{name}.json")


def cmd_matrix(cfg: RunConfig, args, section) -> None:
    if cfg.sector_meta is None:
        raise UsageError("matrix needs --sectors")
    meta = read_sectors(cfg.sector_meta)
    symbols = cfg.symbols or list(meta)
    missing = [s for s in symbols if s not in meta]
    if missing:
        raise UsageError(f"symbols not in sector metadata: {missing}")
    taus = response.LagGrid.parse(str(args.taus or section.get("taus", DEFAULT_TAUS)))
    pairs = [(i, j) for i in symbols for j in symbols]
    load_prepared(cfg, symbols)
    results = pool_map(_response_task, [(i, j, taus.lags) for i, j in pairs], cfg.jobs)
    fmt = args.format or section.get("format", "csv")
    for conv in cfg.conventions:
        curves = {p: r[conv] for p, r in zip(pairs, results)}
        for tau in taus.lags.tolist():
            m = matrix.build_matrix(curves, tau, meta, symbols)
            matrix.export_matrix(m, cfg.output_dir / f"matrix_{conv}_tau{tau}.{fmt}", fmt)


def cmd_noise(cfg: RunConfig, args, section) -> None:
    pairs = _resolve_pairs(cfg)
    load_prepared(cfg, {s for p in pairs for s in p})
    lags = cfg.grid.lags
    for conv in cfg.conventions:
        results = pool_map(_noise_task, [(i, j, lags, conv) for i, j in pairs], cfg.jobs)
        for (i, j), nc in zip(pairs, results):
            noise.write_noise(nc, cfg.output_dir / f"noise_{i}_{j}_{conv}.csv")


GEN_FLAGS = {
    "stocks": "n_stocks", "days": "n_days", "seed": "seed", "trade_rate": "trade_rate",
    "flip_rate": "label_flip_rate", "impact": "impact_per_sign", "noise_sigma": "noise_sigma",
}


def cmd_generate(cfg: RunConfig, args, section) -> None:
    known = {f.name for f in fields(synthgen.GenConfig)}
    doc = {k: v for k, v in section.items() if k in known}
    for flag, key in GEN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    try:
        gen = synthgen.GenConfig.from_dict(doc)
        synthgen.check_config(gen)
    except (TypeError, KeyError, synthgen.ConfigError) as exc:
        raise UsageError(f"bad generate settings: {exc}") from None
    market = synthgen.generate(gen)
    synthgen.write_market(market, cfg.output_dir)


COMMANDS = {
    "signs": cmd_signs, "response": cmd_response, "correlator": cmd_correlator,
    "fit": cmd_fit, "matrix": cmd_matrix, "noise": cmd_noise, "generate": cmd_generate,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossimpact", description="Trade signs, self/cross-responses and related statistics")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def subparser(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="TOML file; [run] and [<command>] tables are read")
        p.add_argument("--jobs", type=int, help="worker processes (default 1)")
        p.add_argument("--lags", help="lag grid start:end (inclusive) or comma list")
        p.add_argument("--convention", choices=["inc0", "exc0", "both"])
        p.add_argument("--output", help="output directory")
        p.add_argument("--data", help="directory with <SYM>_trades.csv / <SYM>_quotes.csv")
        p.add_argument("--symbols", help="comma-separated symbols")
        p.add_argument("--pairs", help="comma-separated I:J pairs (price of I, trades of J)")
        p.add_argument("--sectors", help="sector metadata (symbol,sector CSV or TOML)")
        return p

    p = subparser("signs", "classify trade signs, optionally score them against reference labels")
    p.add_argument("--reference", action="store_true",
                   help="compare against <SYM>_reference.csv in the data directory")
    p.add_argument("--volume-reference", choices=["empirical", "theoretical"],
                   help="per-trade signs feeding the volume-imbalance reference")

    p = subparser("response", "price response curves for stock pairs")
    p.add_argument("--market", action="store_true", help="also write the doubly averaged market response")
    p.add_argument("--histogram", type=int, metavar="TAU", help="signed-return histogram at this lag")

    p = subparser("correlator", "trade-sign correlators for stock pairs")
    p.add_argument("--exclude-both", action="store_true",
                   help="exc0 also drops events with eps_i(t+tau) == 0")

    p = subparser("fit", "power-law fits of sign correlators")
    p.add_argument("inputs", nargs="*", help="correlator CSV files; without them correlators are computed")
    p.add_argument("--exclude-both", action="store_true")

    p = subparser("matrix", "normalized market-response matrices")
    p.add_argument("--taus", help=f"comma-separated lags (default {DEFAULT_TAUS})")
    p.add_argument("--format", choices=["csv", "json"])

    subparser("noise", "split-sample response noise")

    p = subparser("generate", "write a synthetic market")
    p.add_argument("--stocks", type=int)
    p.add_argument("--days", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--trade-rate", type=float)
    p.add_argument("--flip-rate", type=float)
    p.add_argument("--impact", type=float)
    p.add_argument("--noise-sigma", type=float)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, section = build_config(args)
        COMMANDS[args.command](cfg, args, section)
    except (UsageError, IngestError, OSError) as exc:
        print(f"crossimpact {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, RuntimeError, ArithmeticError) as exc:
        print(f"crossimpact {args.command}: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
