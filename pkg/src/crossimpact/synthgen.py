"""Synthetic trades, quotes and reference labels with known ground truth.

Per-second trade directions are signs of stationary Gaussian processes.
For a target sign correlation K(tau) the latent correlation is
sin(pi * K / 2) (arcsine law), so the sign series reproduces K at lags
>= 1 when every second trades. Cross-stock dependence comes from a common
latent component shared by all stocks. Midpoints are a log random walk
plus a one-second price impact of each second's aggregated sign.

Trade prices are built so the tick rule recovers the true direction of
every trade after the first price change of a day: a buy prints at the ask
but never below the previous trade (strictly above it after a sell), and
symmetrically for sells.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from functools import lru_cache
from pathlib import Path

import numpy as np
from numba import njit
from scipy import fft as sfft

from crossimpact.ingest import (
    QuoteDay,
    SessionWindow,
    TradeDay,
    quotes_path,
    reference_path,
    trades_path,
    write_quotes,
    write_sectors,
    write_trades,
)
from crossimpact.signs import ReferenceDay, SignSeries, write_reference

log = logging.getLogger(__name__)

SECTOR_NAMES = ("IT", "F", "E", "HC", "I", "CD", "U", "M", "CS", "TS")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SignKernel:
    """Target sign correlation: powerlaw theta/(1+(tau/tau0)^2)^(gamma/2) or
    exponential theta*exp(-tau/tau0)."""

    kind: str = "powerlaw"
    theta: float = 0.5
    tau0: float = 5.0
    gamma: float = 1.2

    def __post_init__(self):
        if self.kind not in ("powerlaw", "exponential"):
            raise ConfigError(f"unknown kernel kind {self.kind!r}")
        if not self.tau0 > 0:
            raise ConfigError("kernel tau0 must be > 0")
        if not -1.0 <= self.theta <= 1.0:
            raise ConfigError("kernel theta must lie in [-1, 1]")

    def __call__(self, tau) -> np.ndarray:
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind == "exponential":
            return self.theta * np.exp(-tau / self.tau0)
        return self.theta * (1.0 + (tau / self.tau0) ** 2) ** (-0.5 * self.gamma)


@dataclass(frozen=True)
class GenConfig:
    n_stocks: int = 4
    n_days: int = 5
    session: SessionWindow = field(default_factory=SessionWindow)
    trade_rate: float = 1.0
    sign_kernel: SignKernel = field(default_factory=SignKernel)
    cross_kernel: SignKernel | None = None
    impact_per_sign: float = 5e-5
    cross_impact: float = 0.0
    noise_sigma: float = 2e-4
    label_flip_rate: float = 0.0
    hidden_rate: float = 0.0
    quote_rate: float = 1.0
    half_spread: float = 5e-4
    start_price: float = 100.0
    start_day: date = date(2008, 1, 2)
    n_sectors: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_stocks < 1 or self.n_days < 1:
            raise ConfigError("need at least one stock and one day")
        for name in ("trade_rate", "noise_sigma", "half_spread"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("label_flip_rate", "hidden_rate", "quote_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not self.start_price > 0:
            raise ConfigError("start_price must be > 0")

    @property
    def symbols(self) -> list[str]:
        return [f"S{k:02d}" for k in range(self.n_stocks)]

    @property
    def days(self) -> list[date]:
        out, d = [], self.start_day
        while len(out) < self.n_days:
            if d.weekday() < 5:
                out.append(d)
            d += timedelta(days=1)
        return out

    @property
    def sectors(self) -> dict[str, str]:
        names = SECTOR_NAMES[: max(1, min(self.n_sectors, len(SECTOR_NAMES)))]
        return {s: names[k % len(names)] for k, s in enumerate(self.symbols)}

    @classmethod
    def from_dict(cls, doc: dict) -> "GenConfig":
        doc = dict(doc)
        for key in ("sign_kernel", "cross_kernel"):
            if isinstance(doc.get(key), dict):
                doc[key] = SignKernel(**doc[key])
        if isinstance(doc.get("session"), dict):
            s = doc["session"]
            doc["session"] = SessionWindow.from_strings(s["open"], s["close"])
        if isinstance(doc.get("start_day"), str):
            doc["start_day"] = date.fromisoformat(doc["start_day"])
        return cls(**doc)


@dataclass
class SyntheticMarket:
    config: GenConfig
    symbols: list[str]
    days: list[date]
    trades: dict[str, dict[date, TradeDay]]
    quotes: dict[str, dict[date, QuoteDay]]
    reference: dict[str, dict[date, ReferenceDay]]
    true_signs: dict[str, dict[date, SignSeries]]
    sectors: dict[str, str]


# ---------------------------------------------------------------------------
# Gaussian processes

def _embedding_size(length: int) -> int:
    return sfft.next_fast_len(2 * max(length - 1, 1))


def _latent_covariances(cfg: GenConfig, size: int) -> tuple[np.ndarray | None, np.ndarray]:
    """(common, idiosyncratic) latent covariances on lags 0..size//2."""
    lags = np.arange(size // 2 + 1, dtype=np.float64)
    rho_self = np.sin(0.5 * np.pi * cfg.sign_kernel(lags))
    rho_self[0] = 1.0
    if cfg.cross_kernel is None:
        return None, rho_self
    common = np.sin(0.5 * np.pi * cfg.cross_kernel(lags))
    idio = rho_self - common
    idio[0] = 1.0 - common[0]
    return common, idio


def _circulant_sqrt(cov_half: np.ndarray, size: int, what: str) -> np.ndarray:
    k = np.arange(size)
    c = cov_half[np.minimum(k, size - k)]
    lam = sfft.fft(c).real
    tol = 1e-8 * max(float(lam.max()), 1.0)
    if lam.min() < -tol:
        raise ConfigError(f"{what} sign kernel is not positive definite "
                          f"(min eigenvalue {lam.min():.3g}); lower its amplitude")
    return np.sqrt(np.clip(lam, 0.0, None) / size)


@lru_cache(maxsize=8)
def _sqrt_spectra(cfg: GenConfig) -> tuple[np.ndarray | None, np.ndarray]:
    size = _embedding_size(cfg.session.length)
    common, idio = _latent_covariances(cfg, size)
    return (None if common is None else _circulant_sqrt(common, size, "cross"),
            _circulant_sqrt(idio, size, "self" if common is None else "self-minus-cross"))


def _gaussian_path(rng: np.random.Generator, sqrt_lam: np.ndarray, length: int) -> np.ndarray:
    size = len(sqrt_lam)
    z = rng.standard_normal(size) + 1j * rng.standard_normal(size)
    return sfft.fft(sqrt_lam * z).real[:length]


def check_config(cfg: GenConfig) -> None:
    """Raise ConfigError when the requested sign dependence cannot be realised."""
    _sqrt_spectra(cfg)


# ---------------------------------------------------------------------------
# trade prices

@njit(cache=True)
def _trade_prices(sign, bid, ask, tick):
    n = sign.shape[0]
    out = np.empty(n)
    for k in range(n):
        if k == 0:
            out[k] = ask[k] if sign[k] > 0 else bid[k]
            continue
        prev = out[k - 1]
        if sign[k] > 0:
            floor = prev if sign[k - 1] > 0 else prev + tick
            out[k] = ask[k] if ask[k] > floor else floor
        else:
            cap = prev if sign[k - 1] < 0 else prev - tick
            out[k] = bid[k] if bid[k] < cap else cap
    return out


def _rng(cfg: GenConfig, day_index: int, stock_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, day_index, stock_index, stream])


def _round6(x: np.ndarray) -> np.ndarray:
    return np.round(x, 6)


def generate(cfg: GenConfig) -> SyntheticMarket:
    """Draw a full synthetic market; identical config gives identical output."""
    sq_common, sq_idio = _sqrt_spectra(cfg)
    L = cfg.session.length
    symbols, days = cfg.symbols, cfg.days
    n = len(symbols)
    trades = {s: {} for s in symbols}
    quotes = {s: {} for s in symbols}
    reference = {s: {} for s in symbols}
    true_signs = {s: {} for s in symbols}
    tick = 0.01
    for d, day in enumerate(days):
        common = None
        if sq_common is not None:
            common = _gaussian_path(_rng(cfg, d, 0, 9), sq_common, L)
        eps = np.zeros((n, L), dtype=np.int8)
        counts = np.zeros((n, L), dtype=np.int64)
        for k in range(n):
            z = _gaussian_path(_rng(cfg, d, k, 0), sq_idio, L)
            if common is not None:
                z = z + common
            latent = np.where(z >= 0, 1, -1).astype(np.int8)
            counts[k] = _rng(cfg, d, k, 1).poisson(cfg.trade_rate, L)
            eps[k] = np.where(counts[k] > 0, latent, 0)
        total = eps.sum(axis=0).astype(np.float64)
        for k, sym in enumerate(symbols):
            rng = _rng(cfg, d, k, 2)
            drift = cfg.impact_per_sign * eps[k]
            if n > 1 and cfg.cross_impact:
                drift = drift + cfg.cross_impact * (total - eps[k]) / (n - 1)
            steps = cfg.noise_sigma * rng.standard_normal(L - 1) + drift[:-1]
            logm = np.log(cfg.start_price) + np.concatenate([[0.0], np.cumsum(steps)])
            mid = np.exp(logm)
            bid = _round6(mid * (1.0 - cfg.half_spread))
            ask = _round6(mid * (1.0 + cfg.half_spread))
            qmask = rng.random(L) < cfg.quote_rate
            qmask[0] = True
            qsec = np.flatnonzero(qmask)
            quotes[sym][day] = QuoteDay(day, qsec, bid[qsec], ask[qsec])

            c = counts[k]
            tsec = np.repeat(np.arange(L), c)
            tsign = np.repeat(eps[k], c).astype(np.int8)
            # quote in force at each trade: the latest quote at or before its second
            qidx = np.searchsorted(qsec, tsec, side="right") - 1
            price = _round6(_trade_prices(tsign, bid[qsec][qidx], ask[qsec][qidx], tick))
            seq = _seq(tsec)
            volume = 100 * rng.integers(1, 11, len(tsec))
            trades[sym][day] = TradeDay(day, tsec, seq, price, volume.astype(np.int64))

            keep = rng.random(len(tsec)) >= cfg.hidden_rate
            flip = rng.random(len(tsec)) < cfg.label_flip_rate
            label = np.where(flip, -tsign, tsign).astype(np.int8)
            reference[sym][day] = ReferenceDay(day, tsec[keep], seq[keep], label[keep])
            true_signs[sym][day] = SignSeries(day, eps[k].copy(), "number")
    return SyntheticMarket(cfg, symbols, days, trades, quotes, reference, true_signs, cfg.sectors)


def _seq(second: np.ndarray) -> np.ndarray:
    if len(second) == 0:
        return np.zeros(0, dtype=np.int64)
    new = np.ones(len(second), dtype=bool)
    new[1:] = second[1:] != second[:-1]
    starts = np.flatnonzero(new)
    return np.arange(len(second)) - starts[np.cumsum(new) - 1] + 1


def write_market(market: SyntheticMarket, out_dir) -> list[Path]:
    """Write trades, quotes and reference CSVs per stock plus ``sectors.csv``."""
    out_dir = Path(out_dir)
    window = market.config.session
    written = []
    for sym in market.symbols:
        write_trades(market.trades[sym], trades_path(out_dir, sym), window)
        write_quotes(market.quotes[sym], quotes_path(out_dir, sym), window)
        write_reference(market.reference[sym], reference_path(out_dir, sym), window)
        written += [trades_path(out_dir, sym), quotes_path(out_dir, sym), reference_path(out_dir, sym)]
    write_sectors(market.sectors, out_dir / "sectors.csv")
    written.append(out_dir / "sectors.csv")
    return written


def expected_correlator(cfg: GenConfig, tau, cross: bool = False, convention: str = "inc0",
                        exclude_both: bool = False) -> np.ndarray:
    """Population sign correlator implied by the generator, lags >= 1.

    Trading presence is independent of direction, so inc0 scales the latent
    sign correlation by p^2 and exc0 by p, with p = P(at least one trade);
    conditioning on both signs being nonzero recovers it exactly.
    """
    kernel = cfg.cross_kernel if cross else cfg.sign_kernel
    if kernel is None:
        return np.zeros(len(np.atleast_1d(tau)))
    base = kernel(tau)
    p = 1.0 - np.exp(-cfg.trade_rate)
    if convention == "exc0" and exclude_both:
        return base
    return base * (p if convention == "exc0" else p * p)


def with_seed(cfg: GenConfig, seed: int) -> GenConfig:
    return replace(cfg, seed=seed)
