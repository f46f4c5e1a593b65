"""Power-law fits of sign correlators.

Model: theta / (1 + (tau / tau0)**2) ** (gamma / 2), fitted by unweighted
least squares with a damped Gauss-Newton (Levenberg-Marquardt) iteration
and an analytic Jacobian, restarted from a small seed grid.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from crossimpact._io import atomic_write

N_PARAMS = 3
TAU0_BOUNDS = (1e-6, 1e6)
GAMMA_BOUNDS = (0.01, 10.0)
SEED_TAU0 = (0.05, 0.5, 5.0, 50.0)
SEED_GAMMA = (0.5, 1.0, 1.5, 2.0)


class FitError(RuntimeError):
    """No start produced a finite fit; ``best`` holds whatever came closest."""

    def __init__(self, message: str, best: "PowerLawFit | None" = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class PowerLawFit:
    theta: float
    tau0: float
    gamma: float
    chi2: float
    converged: bool
    iterations: int
    n_points: int
    rss: float

    def to_json(self) -> dict:
        return {
            "theta": self.theta,
            "tau0_seconds": self.tau0,
            "gamma": self.gamma,
            "chi2": self.chi2,
            "converged": self.converged,
            "iterations": self.iterations,
            "n_points": self.n_points,
        }

    def __call__(self, tau):
        return powerlaw_model(self.theta, self.tau0, self.gamma, tau)


def powerlaw_model(theta, tau0, gamma, tau):
    if not tau0 > 0:
        raise ValueError(f"tau0 must be > 0, got {tau0}")
    x = np.asarray(tau, dtype=np.float64) / tau0
    return theta * (1.0 + x * x) ** (-0.5 * gamma)


def powerlaw_jacobian(theta, tau0, gamma, tau) -> np.ndarray:
    """Columns d/dtheta, d/dtau0, d/dgamma, shape (len(tau), 3)."""
    tau = np.asarray(tau, dtype=np.float64)
    x2 = (tau / tau0) ** 2
    q = 1.0 + x2
    base = q ** (-0.5 * gamma)
    f = theta * base
    return np.column_stack([base, f * gamma * x2 / (q * tau0), -0.5 * f * np.log(q)])


def chi2_normalized(model_values, data_values, n_params: int = N_PARAMS) -> float:
    """Residual sum of squares over the M - n_params degrees of freedom."""
    f = np.asarray(model_values, dtype=np.float64)
    y = np.asarray(data_values, dtype=np.float64)
    if f.shape != y.shape:
        raise ValueError("model and data lengths differ")
    m = f.size
    if m <= n_params:
        raise ValueError(f"{m} points cannot support {n_params} parameters")
    r = f - y
    return float(np.dot(r, r) / (m - n_params))


def _clip(p: np.ndarray) -> np.ndarray:
    return np.array([p[0], min(max(p[1], TAU0_BOUNDS[0]), TAU0_BOUNDS[1]),
                     min(max(p[2], GAMMA_BOUNDS[0]), GAMMA_BOUNDS[1])])


def _lm(tau, y, p0, max_iter=500, gtol=1e-8, xtol=1e-12):
    """Returns (params, rss, converged, iterations)."""
    p = _clip(np.asarray(p0, dtype=np.float64))
    r = powerlaw_model(*p, tau) - y
    rss = float(r @ r)
    lam = 1e-3
    step_rel = math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = powerlaw_jacobian(*p, tau)
        g = J.T @ r
        grad_ok = 2.0 * np.linalg.norm(g) <= gtol * (1.0 + rss)
        if grad_ok and step_rel <= xtol:
            converged = True
            break
        A = J.T @ J
        d = np.diag(A).copy()
        d[d <= 0] = 1e-12
        improved = False
        while lam < 1e20:
            try:
                delta = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            p_new = _clip(p + delta)
            r_new = powerlaw_model(*p_new, tau) - y
            rss_new = float(r_new @ r_new)
            if np.isfinite(rss_new) and rss_new <= rss:
                step_rel = float(np.linalg.norm(p_new - p) / (np.linalg.norm(p) + xtol))
                p, r = p_new, r_new
                improved = rss_new < rss or step_rel == 0.0
                rss = rss_new
                lam = max(lam / 10.0, 1e-15)
                break
            lam *= 10.0
        if not improved:
            # no downhill step left: we are at the optimum to machine precision
            converged = grad_ok
            break
    else:
        J = powerlaw_jacobian(*p, tau)
        converged = 2.0 * np.linalg.norm(J.T @ r) <= gtol * (1.0 + rss)
    return p, rss, converged, it


def fit_powerlaw_arrays(tau, y, seeds=None) -> PowerLawFit:
    """Fit the model to (tau, y); NaN points are dropped."""
    tau = np.asarray(tau, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    keep = np.isfinite(y) & np.isfinite(tau)
    tau, y = tau[keep], y[keep]
    if len(y) < 10:
        raise ValueError(f"need at least 10 defined lags, got {len(y)}")
    if seeds is None:
        seeds = [(y[0], t0, g) for t0, g in itertools.product(SEED_TAU0, SEED_GAMMA)]
    best = None
    for seed in seeds:
        p, rss, conv, its = _lm(tau, y, seed)
        if not np.isfinite(rss) or not np.all(np.isfinite(p)):
            continue
        if best is None or rss < best[1] or (rss == best[1] and conv and not best[2]):
            best = (p, rss, conv, its)
    if best is None:
        raise FitError("all starts diverged")
    p, rss, conv, its = best
    chi2 = rss / (len(y) - N_PARAMS)
    return PowerLawFit(float(p[0]), float(p[1]), float(p[2]), float(chi2), bool(conv), int(its),
                       int(len(y)), float(rss))


def fit_powerlaw(curve, seeds=None) -> PowerLawFit:
    """Fit a sign-correlator ResponseCurve over its defined lags."""
    if getattr(curve, "kind", "sign_correlator") != "sign_correlator":
        raise ValueError("power-law fits apply to sign correlators only")
    return fit_powerlaw_arrays(curve.lags, curve.values, seeds)


def write_fit(fit: PowerLawFit, path) -> None:
    with atomic_write(path) as fh:
        json.dump(fit.to_json(), fh, indent=2)
        fh.write("\n")
