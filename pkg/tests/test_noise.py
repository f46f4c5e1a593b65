import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossimpact.ingest import MidpointSeries, midpoints_by_day
from crossimpact.noise import noise_from_curves, response_noise, write_noise
from crossimpact.response import LagGrid, response
from crossimpact.signs import SignSeries, signs_by_day

import oracles


def test_identical_subsets_zero():
    r = np.array([1e-5, -2e-5, 3e-6])
    assert np.all(noise_from_curves(r, r, r) == 0.0)


def test_hand_value_one():
    r = np.array([2.0])
    # R1 = 2R, R2 = 0: sqrt((R^2 + R^2)/2) / |R| = 1
    assert noise_from_curves(r, 2 * r, 0 * r)[0] == 1.0


def test_zero_response_undefined():
    assert np.isnan(noise_from_curves([0.0], [1.0], [-1.0])[0])


def repeated_days(n, values, signs):
    days = [date(2008, 1, 2) + timedelta(days=k) for k in range(n)]
    m = {d: MidpointSeries(d, np.array(values, dtype=np.float64), 0) for d in days}
    e = {d: SignSeries(d, np.array(signs, dtype=np.int8)) for d in days}
    return m, e


def test_identical_days_give_zero_noise():
    m, e = repeated_days(4, [100.0, 101.0, 100.5, 102.0, 101.0], [1, -1, 0, 1, 1])
    nc = response_noise(m, e, LagGrid.range(1, 3))
    assert np.all(nc.nu == 0.0)
    assert (nc.n_days_odd, nc.n_days_even) == (2, 2)


def test_needs_two_days():
    m, e = repeated_days(1, [100.0, 101.0], [1, 1])
    with pytest.raises(ValueError):
        response_noise(m, e, LagGrid.range(1, 1))


def test_undefined_lags_reported():
    m, e = repeated_days(2, [100.0, 100.0, 100.0], [1, 1, 1])
    nc = response_noise(m, e, LagGrid.range(1, 2))
    assert nc.undefined_lags == [1, 2]


def scaled_market(rng, n_days, c):
    L = 60
    days = [date(2008, 1, 2) + timedelta(days=k) for k in range(n_days)]
    m, e = {}, {}
    for d in days:
        steps = rng.standard_normal(L)
        m[d] = steps
        e[d] = rng.choice([-1, 0, 1], L)
    base = {d: MidpointSeries(d, 100 * np.exp(1e-3 * np.cumsum(m[d])), 0) for d in days}
    big = {d: MidpointSeries(d, 100 * np.exp(c * 1e-3 * np.cumsum(m[d])), 0) for d in days}
    sg = {d: SignSeries(d, e[d].astype(np.int8)) for d in days}
    return base, big, sg


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10), st.sampled_from(["inc0", "exc0"]))
def test_invariant_under_return_rescaling(seed, c, conv):
    rng = np.random.default_rng(seed)
    base, _, sg = scaled_market(rng, int(rng.integers(2, 6)), 1.0)
    grid = LagGrid.range(1, 20)
    days = sorted(base)

    def curve(ds):
        return response({d: base[d] for d in ds}, {d: sg[d] for d in ds}, grid, conv).values
    r, r1, r2 = curve(days), curve(days[0::2]), curve(days[1::2])
    a = noise_from_curves(r, r1, r2)
    b = noise_from_curves(c * r, c * r1, c * r2)
    ok = np.isfinite(a)
    assert np.array_equal(a, response_noise(base, sg, grid, conv).nu, equal_nan=True)
    assert np.all(np.abs(a[ok] - b[ok]) <= 1e-12 * np.abs(a[ok]))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10))
def test_rescaled_prices_through_pipeline(seed, c):
    # exp/log round trips on prices add ~1 ulp per log price, hence the looser bound
    rng = np.random.default_rng(seed)
    base, big, sg = scaled_market(rng, 4, c)
    grid = LagGrid.range(1, 20)
    a = response_noise(base, sg, grid).nu
    b = response_noise(big, sg, grid).nu
    assert np.allclose(a, b, rtol=1e-6, equal_nan=True)


def test_parity_swap_leaves_nu():
    rng = np.random.default_rng(9)
    base, _, sg = scaled_market(rng, 4, 1.0)
    days = sorted(base)
    # rotating the order by one day swaps which days land in the odd and even subsets
    order = days[1:] + days[:1]
    relabel = {d: date(2009, 1, 1) + timedelta(days=k) for k, d in enumerate(order)}
    m2 = {relabel[d]: MidpointSeries(relabel[d], base[d].values, 0) for d in days}
    e2 = {relabel[d]: SignSeries(relabel[d], sg[d].values) for d in days}
    grid = LagGrid.range(1, 10)
    a = response_noise(base, sg, grid).nu
    b = response_noise(m2, e2, grid).nu
    assert np.allclose(a, b, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_noise_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    m = oracles.toy_market(rng, n_stocks=2, n_days=int(rng.integers(2, 6)))
    i, j = "T0", "T1"
    mids = midpoints_by_day(m.stocks[i].quotes, m.window)
    sgns = signs_by_day(m.stocks[j].trades, m.window)
    lags = list(range(1, m.window.length))
    om, oe = m.oracle_mids(i), m.oracle_signs(j)
    for conv in ("inc0", "exc0"):
        got = response_noise(mids, sgns, LagGrid(np.array(lags)), conv).nu
        days = sorted(om)

        def sub(ds):
            return oracles.averages(oracles.lagged_response({d: om[d] for d in ds},
                                                            {d: oe[d] for d in ds}, lags), conv)
        want = oracles.split_noise(sub(days), sub(days[0::2]), sub(days[1::2]))
        for a, b in zip(got.tolist(), want):
            assert (math.isnan(a) and math.isnan(b)) or abs(a - b) <= 1e-12 * abs(b) + 1e-300


def test_noise_csv(tmp_path):
    m, e = repeated_days(2, [100.0, 101.0, 100.5], [1, 0, 1])
    write_noise(response_noise(m, e, LagGrid.range(1, 2)), tmp_path / "n.csv")
    lines = (tmp_path / "n.csv").read_text().splitlines()
    assert lines[0] == "tau,nu,n_odd,n_even"
    assert lines[1].endswith(",1,1")
