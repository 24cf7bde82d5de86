import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bayeslv.errors import (
    DegenerateRange,
    DuplicateQuote,
    EmptyTrainingSet,
    MissingColumn,
    NonPositiveStrike,
)
from bayeslv.market_data import (
    DomainMap,
    MarketParams,
    OptionQuote,
    Role,
    SplitRule,
    atm_implied_vol_level,
    bs_call_price,
    implied_vol,
    load_quotes,
    rescale_domain,
    split_train_validate,
    write_quotes,
)

# Discounted lognormal payoff integrated with mpmath at 30 digits.
BS_ATM_REFERENCE = 9.2270055081540475442


def _csv(tmp_path, text, name="q.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- loading


def test_bid_ask_midpoint(tmp_path):
    p = _csv(tmp_path, "maturity,strike,bid,ask\n0.5,100,9.8,10.2\n")
    (q,) = load_quotes(p)
    assert q.mid_price == pytest.approx(10.0, abs=1e-12)
    assert q.role is Role.TRAIN


def test_empty_file_is_missing_column(tmp_path):
    with pytest.raises(MissingColumn):
        load_quotes(_csv(tmp_path, ""))


def test_missing_price_source(tmp_path):
    with pytest.raises(MissingColumn):
        load_quotes(_csv(tmp_path, "maturity,strike\n0.5,100\n"))


def test_duplicate_quote_rejected(tmp_path):
    with pytest.raises(DuplicateQuote):
        load_quotes(_csv(tmp_path, "maturity,strike,mid\n0.5,100,10\n0.5,100,10.1\n"))


def test_nonpositive_strike_rejected(tmp_path):
    with pytest.raises(NonPositiveStrike):
        load_quotes(_csv(tmp_path, "maturity,strike,mid\n0.5,0,10\n"))


def test_sorted_by_maturity_then_strike(tmp_path):
    p = _csv(tmp_path, "maturity,strike,mid\n1.0,90,15\n0.5,110,2\n0.5,90,12\n")
    qs = load_quotes(p)
    assert [(q.maturity, q.strike) for q in qs] == [(0.5, 90), (0.5, 110), (1.0, 90)]


def test_implied_vol_column_converted(tmp_path, market):
    p = _csv(tmp_path, "maturity,strike,implied_vol\n1.0,100,0.2\n")
    (q,) = load_quotes(p, market=market)
    assert q.mid_price == pytest.approx(BS_ATM_REFERENCE, rel=1e-12)


def test_implied_vol_needs_market(tmp_path):
    with pytest.raises(MissingColumn):
        load_quotes(_csv(tmp_path, "maturity,strike,implied_vol\n1.0,100,0.2\n"))


def test_price_above_spot_dropped_with_warning(tmp_path, market, caplog):
    p = _csv(tmp_path, "maturity,strike,mid\n0.5,100,10\n0.5,90,150\n")
    with caplog.at_level(logging.WARNING):
        qs = load_quotes(p, market=market)
    assert len(qs) == 1
    assert "dropping" in caplog.text


def test_arbitrage_warning_not_error(tmp_path, caplog):
    p = _csv(tmp_path, "maturity,strike,mid\n0.5,90,10\n0.5,100,12\n")
    with caplog.at_level(logging.WARNING):
        assert len(load_quotes(p)) == 2
    assert "monotonicity" in caplog.text


def test_role_column_and_roundtrip(tmp_path):
    quotes = [
        OptionQuote(0.5, 95.0, 8.25, Role.TRAIN),
        OptionQuote(1.5, 105.0, 6.5, Role.VALIDATE),
    ]
    path = tmp_path / "rt.csv"
    write_quotes(path, quotes)
    assert path.read_text().splitlines()[0] == "maturity,strike,mid,role"
    assert load_quotes(path) == quotes


# ---------------------------------------------------------------- pricing


def test_bs_matches_quadrature_reference():
    assert bs_call_price(100, 100, 1.0, 0.05, 0.02, 0.2) == pytest.approx(
        BS_ATM_REFERENCE, rel=1e-13
    )


def test_bs_zero_strike_limit():
    assert bs_call_price(100, 1e-12, 1.0, 0.05, 0.02, 0.2) == pytest.approx(
        100 * np.exp(-0.02), rel=1e-12
    )


def test_bs_zero_vol_out_of_the_money():
    assert bs_call_price(100, 120, 1.0, 0.05, 0.02, 1e-9) == pytest.approx(0.0, abs=1e-12)
    assert bs_call_price(100, 120, 1.0, 0.05, 0.02, 0.0) == 0.0


@given(
    k=st.floats(50, 200),
    t=st.floats(0.05, 3.0),
    v1=st.floats(0.01, 1.0),
    dv=st.floats(1e-4, 0.5),
)
def test_bs_monotone_in_vol(k, t, v1, dv):
    lo = bs_call_price(100, k, t, 0.05, 0.02, v1)
    hi = bs_call_price(100, k, t, 0.05, 0.02, v1 + dv)
    assert hi >= lo - 1e-12


@given(t=st.floats(0.05, 3.0), vol=st.floats(0.05, 1.0))
def test_bs_convex_decreasing_in_strike(t, vol):
    k = np.linspace(40, 200, 81)
    c = bs_call_price(100, k, t, 0.05, 0.02, vol)
    assert np.all(np.diff(c) <= 1e-12)
    assert np.all(np.diff(c, 2) >= -1e-10)


@given(vol=st.floats(0.05, 2.0), k=st.floats(70, 140), t=st.floats(0.1, 2.0))
def test_implied_vol_inverts_price(vol, k, t):
    price = bs_call_price(100, k, t, 0.05, 0.02, vol)
    iv = implied_vol(price, 100, k, t, 0.05, 0.02)
    # vega vanishes far from the money, so compare in price space
    assert bs_call_price(100, k, t, 0.05, 0.02, iv) == pytest.approx(price, rel=1e-9, abs=1e-10)


def test_atm_implied_vol_level(market):
    quotes = [
        OptionQuote(t, k, float(bs_call_price(100, k, t, 0.05, 0.02, 0.25)))
        for t in (0.5, 1.0)
        for k in (90.0, 100.0, 110.0)
    ]
    assert atm_implied_vol_level(quotes, market) == pytest.approx(0.25, rel=1e-8)


# ---------------------------------------------------------------- rescaling


def test_domain_map_endpoints_and_midpoints():
    d = DomainMap(0.0, 2.0, 60.0, 140.0)
    u, v = d.to_unit([0.0, 1.0, 2.0], [60.0, 100.0, 140.0])
    np.testing.assert_array_equal(u, [-0.5, 0.0, 0.5])
    np.testing.assert_array_equal(v, [-0.5, 0.0, 0.5])


@given(st.integers(0, 2**32 - 1))
def test_domain_map_roundtrip(seed):
    r = np.random.default_rng(seed)
    d = DomainMap(0.0, r.uniform(0.1, 10), 10.0, 10.0 + r.uniform(1, 500))
    t = r.uniform(0, d.t_max, 1000)
    k = r.uniform(d.k_min, d.k_max, 1000)
    t2, k2 = d.from_unit(*d.to_unit(t, k))
    np.testing.assert_allclose(t2, t, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(k2, k, rtol=1e-12)


def test_degenerate_ranges():
    with pytest.raises(DegenerateRange):
        DomainMap(0.0, 1.0, 100.0, 100.0)
    with pytest.raises(DegenerateRange):
        MarketParams(100, 0.05, 0.02, 0.0, 60, 140)
    with pytest.raises(DegenerateRange):
        MarketParams(100, 0.05, 0.02, 1.0, 100, 140)


def test_rescaled_quotes_inside_unit_square(market):
    quotes = [OptionQuote(t, k, 1.0) for t in (0.25, 1.5) for k in (60.0, 100.0, 160.0)]
    _, rescaled = rescale_domain(quotes, market)
    assert all(-0.5 <= r.u <= 0.5 and -0.5 <= r.v <= 0.5 for r in rescaled)


# ---------------------------------------------------------------- splitting


def _grid_quotes(maturities, strikes=(90.0, 100.0, 110.0)):
    return [OptionQuote(t, k, 1.0) for t in maturities for k in strikes]


def test_split_by_cutoff():
    train, val = split_train_validate(_grid_quotes([0.5, 1.0, 1.5]), SplitRule(maturity_cutoff=1.0))
    assert {q.maturity for q in train} == {0.5, 1.0}
    assert {q.maturity for q in val} == {1.5}
    assert all(q.role is Role.VALIDATE for q in val)


def test_split_first_six_maturities():
    mats = np.round(np.linspace(0.25, 2.0, 10), 6)
    train, val = split_train_validate(_grid_quotes(mats), SplitRule(n_train_maturities=6))
    assert sorted({q.maturity for q in train}) == list(mats[:6])
    assert len(train) + len(val) == 30


def test_split_all_train_warns(caplog):
    with caplog.at_level(logging.WARNING):
        train, val = split_train_validate(_grid_quotes([0.5]))
    assert val == [] and len(train) == 3
    assert "empty" in caplog.text


def test_split_empty_training_set():
    quotes = [OptionQuote(0.5, 100.0, 1.0, Role.VALIDATE)]
    with pytest.raises(EmptyTrainingSet):
        split_train_validate(quotes)


@given(st.lists(st.sampled_from([0.25, 0.5, 1.0, 1.5, 2.0]), min_size=1, max_size=20),
       st.floats(0.2, 2.5))
def test_split_is_partition(mats, cutoff):
    quotes = [OptionQuote(t, 80.0 + i, 1.0) for i, t in enumerate(mats)]
    try:
        train, val = split_train_validate(quotes, SplitRule(maturity_cutoff=cutoff))
    except EmptyTrainingSet:
        assert min(mats) > cutoff
        return
    keys = lambda qs: {(q.maturity, q.strike) for q in qs}
    assert keys(train).isdisjoint(keys(val))
    assert keys(train) | keys(val) == keys(quotes)
