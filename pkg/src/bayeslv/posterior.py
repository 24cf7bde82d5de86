"""Log posterior of the K-L parameterized local volatility at two mesh fidelities."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .errors import LengthMismatch, NumericalError
from .fem_pricer import (
    MeshLevel,
    PdeCoefficients,
    build_mesh,
    extract_price,
    price_surface,
    PriceField,
)
from .kl_prior import KLBasis, eval_log_vol, eval_log_vol_grid
from .market_data import DomainMap, MarketParams, OptionQuote

log = logging.getLogger(__name__)

NEG_INF = -math.inf


class Fidelity(str, Enum):
    COARSE = "coarse"
    FINE = "fine"


@dataclass(frozen=True)
class ParameterState:
    theta: np.ndarray
    l1: float
    l2: float
    sigma_y: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.theta, [self.l1, self.l2, self.sigma_y]])

    @classmethod
    def from_vector(cls, x) -> "ParameterState":
        x = np.asarray(x, dtype=float)
        return cls(x[:-3].copy(), float(x[-3]), float(x[-2]), float(x[-1]))


@dataclass(frozen=True)
class Hyperparams:
    """Inverse-gamma noise prior (a_eps, b_eps), gamma prior on sigma_Y^2
    (shape a_s, scale b_s) and uniform lengthscale bounds."""

    a_eps: float = 2.5
    b_eps: float = 1e-2
    a_s: float = 3.0
    b_s: float = 2.0
    l_lo: float = 0.5
    l_hi: float = 1.0

    def __post_init__(self):
        if min(self.a_eps, self.b_eps, self.a_s, self.b_s, self.l_lo) <= 0:
            raise ValueError("hyperparameters must be strictly positive")
        if not self.l_lo < self.l_hi:
            raise ValueError("lengthscale bounds must satisfy lo < hi")

    @classmethod
    def scaled_to_prices(cls, prices, noise_fraction: float = 0.005, a_eps: float = 2.5, **kw):
        """Pick ``b_eps`` so the prior-mean noise variance ``b/(a-1)`` equals
        ``(noise_fraction * mean price)**2``."""
        sd = noise_fraction * float(np.mean(prices))
        return cls(a_eps=a_eps, b_eps=(a_eps - 1.0) * sd * sd, **kw)


@dataclass(frozen=True)
class LogDensity:
    value: float
    fidelity: Fidelity


def log_marginal_likelihood(v_obs, v_model, hyper: Hyperparams) -> float:
    """Price likelihood with the noise variance integrated out (inverse-gamma prior)."""
    v_obs = np.asarray(v_obs, dtype=float)
    v_model = np.asarray(v_model, dtype=float)
    if v_obs.shape != v_model.shape:
        raise LengthMismatch(f"{v_obs.shape} vs {v_model.shape}")
    n = v_obs.size
    if n < 1:
        raise LengthMismatch("need at least one observation")
    shape = hyper.a_eps + 0.5 * n
    resid = v_obs - v_model
    return float(gammaln(shape) - shape * math.log(hyper.b_eps + 0.5 * resid @ resid))


def in_support(state: ParameterState, hyper: Hyperparams) -> bool:
    return (
        hyper.l_lo <= state.l1 <= hyper.l_hi
        and hyper.l_lo <= state.l2 <= hyper.l_hi
        and state.sigma_y > 0
        and bool(np.all(np.isfinite(state.theta)))
    )


def log_prior(state: ParameterState, hyper: Hyperparams) -> float:
    """Standard normal on theta, uniform lengthscales, Gamma(a_s, scale b_s) on sigma_Y^2."""
    if not in_support(state, hyper):
        return NEG_INF
    s2 = state.sigma_y**2
    theta = np.asarray(state.theta)
    return float(-0.5 * theta @ theta + (hyper.a_s - 1.0) * math.log(s2) - s2 / hyper.b_s)


class KLVolatility:
    """Local volatility ``exp(Y)`` of one parameter state, callable as ``vol(T, K)``.

    Column-vector ``T`` with row-vector ``K`` is evaluated on the tensor grid;
    other shapes are evaluated pointwise after broadcasting.
    """

    def __init__(self, basis: KLBasis, theta, dmap: DomainMap):
        self.basis = basis
        self.theta = np.asarray(theta, dtype=float)
        self.dmap = dmap

    def log_vol(self, maturity, strike) -> np.ndarray:
        t = np.asarray(maturity, dtype=float)
        k = np.asarray(strike, dtype=float)
        if t.ndim == 2 and k.ndim == 2 and t.shape[1] == 1 and k.shape[0] == 1:
            u, _ = self.dmap.to_unit(t[:, 0], self.dmap.k_min)
            _, v = self.dmap.to_unit(self.dmap.t_max, k[0])
            return eval_log_vol_grid(self.basis, self.theta, u, v)
        t, k = np.broadcast_arrays(t, k)
        u, v = self.dmap.to_unit(t, k)
        pts = np.column_stack([np.ravel(u), np.ravel(v)])
        return eval_log_vol(self.basis, self.theta, pts).reshape(t.shape)

    def __call__(self, maturity, strike) -> np.ndarray:
        return np.exp(self.log_vol(maturity, strike))


@dataclass
class PricingContext:
    """Everything needed to reprice a fixed set of quotes at one fidelity."""

    market: MarketParams
    level: MeshLevel
    maturities: Sequence[float]
    left_boundary: str = "forward"
    mesh: object = field(init=False)
    grid: object = field(init=False)

    def __post_init__(self):
        self.mesh, self.grid = build_mesh(self.market, self.level, sorted(set(self.maturities)))

    def solve(self, vol) -> PriceField:
        coeffs = PdeCoefficients(
            self.market.rate, self.market.dividend, self.market.spot, vol, self.left_boundary
        )
        return price_surface(self.mesh, self.grid, coeffs)


class CalibrationPosterior:
    """Posterior over ``x = (theta, l1, l2, sigma_y)`` given training quotes.

    ``template`` fixes the K-L measures, truncation ``n_kl`` and mean level;
    lengthscales and scale are taken from each evaluated state.
    """

    def __init__(
        self,
        quotes: Sequence[OptionQuote],
        market: MarketParams,
        template: KLBasis,
        hyper: Hyperparams,
        coarse: MeshLevel,
        fine: MeshLevel,
        left_boundary: str = "forward",
        extra_maturities: Sequence[float] = (),
    ):
        if not quotes:
            raise ValueError("posterior needs at least one quote")
        self.quotes = list(quotes)
        self.market = market
        self.template = template
        self.hyper = hyper
        self.dmap = DomainMap.from_market(market)
        self.maturities = np.array([q.maturity for q in self.quotes])
        self.strikes = np.array([q.strike for q in self.quotes])
        self.v_obs = np.array([q.mid_price for q in self.quotes])
        mats = sorted(set(self.maturities) | set(extra_maturities))
        self.contexts = {
            Fidelity.COARSE: PricingContext(market, coarse, mats, left_boundary),
            Fidelity.FINE: PricingContext(market, fine, mats, left_boundary),
        }
        self.n_evals = {Fidelity.COARSE: 0, Fidelity.FINE: 0}

    @property
    def dim(self) -> int:
        return self.template.n_kl + 3

    def basis_for(self, state: ParameterState) -> KLBasis:
        return self.template.with_hyper(state.l1, state.l2, state.sigma_y)

    def volatility(self, state: ParameterState) -> KLVolatility:
        return KLVolatility(self.basis_for(state), state.theta, self.dmap)

    def solve(self, state: ParameterState, fidelity: Fidelity | str) -> PriceField:
        return self.contexts[Fidelity(fidelity)].solve(self.volatility(state))

    def model_prices(self, state, fidelity, maturities=None, strikes=None) -> np.ndarray:
        field_ = self.solve(state, fidelity)
        if maturities is None:
            maturities, strikes = self.maturities, self.strikes
        return extract_price(field_, maturities, strikes)

    def log_posterior(self, state: ParameterState, fidelity: Fidelity | str) -> LogDensity:
        fidelity = Fidelity(fidelity)
        lp = log_prior(state, self.hyper)
        if lp == NEG_INF:
            return LogDensity(NEG_INF, fidelity)
        self.n_evals[fidelity] += 1
        try:
            v_model = self.model_prices(state, fidelity)
        except (NumericalError, FloatingPointError) as exc:
            log.debug("pricing failed at %s fidelity: %s", fidelity.value, exc)
            return LogDensity(NEG_INF, fidelity)
        if not np.all(np.isfinite(v_model)):
            return LogDensity(NEG_INF, fidelity)
        return LogDensity(lp + log_marginal_likelihood(self.v_obs, v_model, self.hyper), fidelity)

    def log_density_fn(self, fidelity: Fidelity | str):
        """``x -> log pi(x)`` on flat parameter vectors, as the sampler expects."""
        fidelity = Fidelity(fidelity)

        def fn(x):
            with np.errstate(over="ignore", invalid="ignore"):
                return self.log_posterior(ParameterState.from_vector(x), fidelity).value

        return fn

    def initial_state(self) -> ParameterState:
        """theta = 0, lengthscales mid-interval, sigma_Y at the prior mode of sigma_Y^2."""
        h = self.hyper
        return ParameterState(
            np.zeros(self.template.n_kl),
            0.5 * (h.l_lo + h.l_hi),
            0.5 * (h.l_lo + h.l_hi),
            math.sqrt((h.a_s - 1.0) * h.b_s),
        )
