"""Option quote ingestion, Black-Scholes conversion and domain rescaling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtr

from .errors import (
    DegenerateRange,
    DuplicateQuote,
    EmptyTrainingSet,
    MissingColumn,
    NonPositiveStrike,
)

log = logging.getLogger(__name__)


class Role(str, Enum):
    TRAIN = "train"
    VALIDATE = "validate"


@dataclass(frozen=True)
class OptionQuote:
    maturity: float
    strike: float
    mid_price: float
    role: Role = Role.TRAIN


@dataclass(frozen=True)
class MarketParams:
    spot: float
    rate: float
    dividend: float
    t_max: float
    k_min: float
    k_max: float

    def __post_init__(self):
        if not self.t_max > 0:
            raise DegenerateRange(f"t_max must be positive, got {self.t_max}")
        if not self.k_min < self.spot < self.k_max:
            raise DegenerateRange(
                f"need k_min < spot < k_max, got {self.k_min}, {self.spot}, {self.k_max}"
            )


@dataclass(frozen=True)
class QuoteSchema:
    """Column names used when reading a quote CSV."""

    maturity: str = "maturity"
    strike: str = "strike"
    mid: str = "mid"
    bid: str = "bid"
    ask: str = "ask"
    implied_vol: str = "implied_vol"
    role: str = "role"


def bs_call_price(spot, strike, maturity, rate, dividend, implied_vol):
    """Black-Scholes price of a European call with continuous dividend yield.

    Broadcasts over array arguments.
    """
    spot, strike, maturity, vol = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (spot, strike, maturity, implied_vol))
    )
    sd = vol * np.sqrt(maturity)
    fwd_disc = spot * np.exp(-dividend * maturity)
    k_disc = strike * np.exp(-rate * maturity)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(fwd_disc / k_disc) + 0.5 * sd**2) / sd
    d2 = d1 - sd
    price = fwd_disc * ndtr(d1) - k_disc * ndtr(d2)
    # zero total variance: discounted intrinsic value
    price = np.where(sd > 0, price, np.maximum(fwd_disc - k_disc, 0.0))
    return price[()] if price.ndim == 0 else price


def load_quotes(
    path: str | Path,
    schema: QuoteSchema | None = None,
    market: MarketParams | None = None,
) -> list[OptionQuote]:
    """Read option quotes from a CSV file.

    The file needs ``maturity`` and ``strike`` columns plus one price source:
    ``mid``, a ``bid``/``ask`` pair, or ``implied_vol`` (converted with
    :func:`bs_call_price`, which requires ``market``). An optional ``role``
    column labels quotes as ``train`` or ``validate``.

    Quotes priced above spot are dropped with a warning. Returns quotes sorted
    by (maturity, strike).
    """
    schema = schema or QuoteSchema()
    try:
        df = pd.read_csv(path)
    except pd.errors.EmptyDataError as exc:
        raise MissingColumn(f"{path}: file has no header") from exc

    cols = set(df.columns)
    for required in (schema.maturity, schema.strike):
        if required not in cols:
            raise MissingColumn(f"{path}: missing column {required!r}")

    maturity = df[schema.maturity].to_numpy(float)
    strike = df[schema.strike].to_numpy(float)
    if np.any(strike <= 0):
        raise NonPositiveStrike(f"{path}: strikes must be positive")

    if schema.mid in cols:
        mid = df[schema.mid].to_numpy(float)
    elif schema.bid in cols and schema.ask in cols:
        mid = 0.5 * (df[schema.bid].to_numpy(float) + df[schema.ask].to_numpy(float))
    elif schema.implied_vol in cols:
        if market is None:
            raise MissingColumn(
                f"{path}: implied_vol quotes need market parameters for conversion"
            )
        mid = bs_call_price(
            market.spot, strike, maturity, market.rate, market.dividend,
            df[schema.implied_vol].to_numpy(float),
        )
    else:
        raise MissingColumn(f"{path}: need one of mid, bid/ask or implied_vol")

    if schema.role in cols:
        roles = [Role(str(r).strip().lower()) for r in df[schema.role]]
    else:
        roles = [Role.TRAIN] * len(df)

    quotes = []
    seen = set()
    for t, k, v, role in zip(maturity, strike, mid, roles):
        key = (round(float(t), 12), round(float(k), 12))
        if key in seen:
            raise DuplicateQuote(f"{path}: duplicate quote at T={t}, K={k}")
        seen.add(key)
        if v < 0 or (market is not None and v > market.spot):
            log.warning("dropping quote T=%g K=%g with price %g outside [0, spot]", t, k, v)
            continue
        quotes.append(OptionQuote(float(t), float(k), float(v), role))

    quotes.sort(key=lambda q: (q.maturity, q.strike))
    check_static_arbitrage(quotes)
    return quotes


def check_static_arbitrage(quotes: Sequence[OptionQuote]) -> list[tuple[float, float]]:
    """Warn about call prices that increase with strike within a maturity.

    Returns the offending (maturity, strike) pairs.
    """
    bad = []
    by_t: dict[float, list[OptionQuote]] = {}
    for q in quotes:
        by_t.setdefault(q.maturity, []).append(q)
    for t, qs in by_t.items():
        qs = sorted(qs, key=lambda q: q.strike)
        for lo, hi in zip(qs, qs[1:]):
            if hi.mid_price > lo.mid_price + 1e-12:
                bad.append((t, hi.strike))
    if bad:
        log.warning("%d quotes violate call monotonicity in strike", len(bad))
    return bad


def write_quotes(path: str | Path, quotes: Sequence[OptionQuote]) -> None:
    df = pd.DataFrame(
        {
            "maturity": [q.maturity for q in quotes],
            "strike": [q.strike for q in quotes],
            "mid": [q.mid_price for q in quotes],
            "role": [q.role.value for q in quotes],
        }
    )
    df.to_csv(path, index=False, float_format="%.12g")


@dataclass(frozen=True)
class DomainMap:
    """Affine map of (T, K) onto the square [-0.5, 0.5]^2.

    Maturity is anchored at ``t_anchor`` (the reference time, 0 by default).
    """

    t_anchor: float
    t_max: float
    k_min: float
    k_max: float

    def __post_init__(self):
        if not self.t_max > self.t_anchor:
            raise DegenerateRange("maturity range is empty")
        if not self.k_max > self.k_min:
            raise DegenerateRange("strike range is empty")

    def to_unit(self, maturity, strike):
        u = (np.asarray(maturity, float) - self.t_anchor) / (self.t_max - self.t_anchor) - 0.5
        v = (np.asarray(strike, float) - self.k_min) / (self.k_max - self.k_min) - 0.5
        return u, v

    def from_unit(self, u, v):
        t = self.t_anchor + (np.asarray(u, float) + 0.5) * (self.t_max - self.t_anchor)
        k = self.k_min + (np.asarray(v, float) + 0.5) * (self.k_max - self.k_min)
        return t, k

    @classmethod
    def from_market(cls, params: MarketParams) -> "DomainMap":
        return cls(0.0, params.t_max, params.k_min, params.k_max)


@dataclass(frozen=True)
class RescaledQuote:
    u: float
    v: float
    quote: OptionQuote


def rescale_domain(
    quotes: Sequence[OptionQuote], params: MarketParams
) -> tuple[DomainMap, list[RescaledQuote]]:
    if not quotes:
        raise ValueError("no quotes to rescale")
    dmap = DomainMap.from_market(params)
    u, v = dmap.to_unit([q.maturity for q in quotes], [q.strike for q in quotes])
    return dmap, [RescaledQuote(float(a), float(b), q) for a, b, q in zip(u, v, quotes)]


@dataclass(frozen=True)
class SplitRule:
    """How to divide quotes into training and validation sets.

    Exactly one of the fields is used, in this order of precedence:
    ``maturity_cutoff`` (maturities strictly above it are held out),
    ``n_train_maturities`` (the first n distinct maturities train), or the
    quotes' own ``role`` labels when both are ``None``.
    """

    maturity_cutoff: float | None = None
    n_train_maturities: int | None = None


def split_train_validate(
    quotes: Sequence[OptionQuote], rule: SplitRule = SplitRule()
) -> tuple[list[OptionQuote], list[OptionQuote]]:
    if rule.maturity_cutoff is not None:
        is_train = [q.maturity <= rule.maturity_cutoff + 1e-12 for q in quotes]
    elif rule.n_train_maturities is not None:
        kept = sorted({q.maturity for q in quotes})[: rule.n_train_maturities]
        is_train = [q.maturity in kept for q in quotes]
    else:
        is_train = [q.role is Role.TRAIN for q in quotes]

    train = [replace(q, role=Role.TRAIN) for q, t in zip(quotes, is_train) if t]
    validate = [replace(q, role=Role.VALIDATE) for q, t in zip(quotes, is_train) if not t]
    if not train:
        raise EmptyTrainingSet("split leaves no training quotes")
    if not validate:
        log.warning("validation set is empty")
    return train, validate


def atm_implied_vol_level(quotes: Sequence[OptionQuote], params: MarketParams) -> float:
    """Mean implied volatility of the quotes nearest the money, one per maturity."""
    by_t: dict[float, OptionQuote] = {}
    for q in quotes:
        best = by_t.get(q.maturity)
        if best is None or abs(q.strike - params.spot) < abs(best.strike - params.spot):
            by_t[q.maturity] = q
    vols = [
        implied_vol(q.mid_price, params.spot, q.strike, q.maturity, params.rate, params.dividend)
        for q in by_t.values()
    ]
    vols = [v for v in vols if math.isfinite(v)]
    return float(np.mean(vols)) if vols else float("nan")


def implied_vol(price, spot, strike, maturity, rate, dividend, lo=1e-4, hi=20.0) -> float:
    """Invert :func:`bs_call_price` by bracketing; NaN outside no-arbitrage bounds."""
    from scipy.optimize import brentq

    f = lambda s: bs_call_price(spot, strike, maturity, rate, dividend, s) - price
    if f(lo) > 0 or f(hi) < 0:
        return float("nan")
    return float(brentq(f, lo, hi, xtol=1e-12))
