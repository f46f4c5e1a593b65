"""Trade-sign classification and self/cross-response analysis of tick data."""
from crossimpact.fitting import PowerLawFit, fit_powerlaw, fit_powerlaw_arrays
from crossimpact.ingest import SessionWindow, load_stock, midpoints_by_day, parse_quotes, parse_trades
from crossimpact.matrix import MarketResponseMatrix, build_matrix
from crossimpact.noise import response_noise
from crossimpact.response import LagGrid, ResponseCurve, response_curves, sign_correlator
from crossimpact.signs import SignSeries, classify_per_trade, gap_persistence, signs_by_day
from crossimpact.synthgen import GenConfig, generate

__version__ = "0.1.0"

__all__ = [
    "GenConfig", "LagGrid", "MarketResponseMatrix", "PowerLawFit", "ResponseCurve",
    "SessionWindow", "SignSeries", "build_matrix", "classify_per_trade", "fit_powerlaw",
    "fit_powerlaw_arrays", "gap_persistence", "generate", "load_stock", "midpoints_by_day",
    "parse_quotes", "parse_trades", "response_curves", "response_noise", "sign_correlator",
    "signs_by_day",
]
