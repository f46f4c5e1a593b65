"""Compiled per-day accumulators for the lagged averages.

Each kernel adds one day's contribution into per-lag accumulators. Within a
lag, events are visited in ascending ``t`` so that repeated calls over days
in ascending order sum in exactly the same order as a plain nested loop.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def log_values(x):
    """Elementwise libm log; NaN stays NaN."""
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        v = x[i]
        out[i] = math.log(v) if v == v else v
    return out


@njit(cache=True)
def response_day(logm, eps, lags, suffix_defined, first_defined,
                 total, sumsq, n_inc, n_exc):
    """Accumulate r(t, tau) * eps(t) for one day.

    ``logm`` holds log midpoints (NaN where undefined). When
    ``suffix_defined`` is set, every second from ``first_defined`` on is
    defined, so the include-zero count has a closed form and only nonzero
    signs need visiting.
    """
    L = logm.shape[0]
    if suffix_defined:
        nz = np.empty(L, dtype=np.int64)
        m = 0
        for t in range(first_defined, L):
            if eps[t] != 0:
                nz[m] = t
                m += 1
        for k in range(lags.shape[0]):
            tau = lags[k]
            end = L - tau
            if end > first_defined:
                n_inc[k] += end - first_defined
            s = total[k]
            q = sumsq[k]
            c = 0
            for i in range(m):
                t = nz[i]
                if t >= end:
                    break
                p = (logm[t + tau] - logm[t]) * eps[t]
                s += p
                q += p * p
                c += 1
            total[k] = s
            sumsq[k] = q
            n_exc[k] += c
    else:
        for k in range(lags.shape[0]):
            tau = lags[k]
            s = total[k]
            q = sumsq[k]
            ci = 0
            ce = 0
            for t in range(L - tau):
                a = logm[t]
                b = logm[t + tau]
                if np.isnan(a) or np.isnan(b):
                    continue
                ci += 1
                e = eps[t]
                if e != 0:
                    p = (b - a) * e
                    s += p
                    q += p * p
                    ce += 1
            total[k] = s
            sumsq[k] = q
            n_inc[k] += ci
            n_exc[k] += ce


@njit(cache=True)
def correlator_day(eps_i, eps_j, lags, both_nonzero, total, nonzero, n_inc, n_exc):
    """Accumulate eps_i(t + tau) * eps_j(t) for one day (integer sums)."""
    L = eps_j.shape[0]
    nz = np.empty(L, dtype=np.int64)
    m = 0
    for t in range(L):
        if eps_j[t] != 0:
            nz[m] = t
            m += 1
    for k in range(lags.shape[0]):
        tau = lags[k]
        end = L - tau
        if end > 0:
            n_inc[k] += end
        s = 0
        c = 0
        nzp = 0
        for i in range(m):
            t = nz[i]
            if t >= end:
                break
            a = eps_i[t + tau]
            if both_nonzero and a == 0:
                continue
            p = a * eps_j[t]
            s += p
            if p != 0:
                nzp += 1
            c += 1
        total[k] += s
        nonzero[k] += nzp
        n_exc[k] += c
