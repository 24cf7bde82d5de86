"""End-to-end experiment plumbing: synthetic data, calibration runs and summaries.

File formats (all CSV with a header row):

* quotes: ``maturity, strike, mid, role``
* truth: ``T, K, sigma`` on the reporting grid
* volatility summary: ``T, K, mean, median, q025, q975``
* price summary: ``T, K, observed, pred_mean, q025, q975, role``
"""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from .config import RunConfig
from .errors import EmptyChain, MissingColumn, UnknownCase
from .fem_pricer import (
    REFERENCE,
    MeshLevel,
    PdeCoefficients,
    build_mesh,
    extract_price,
    price_surface,
    stretched_nodes,
)
from .kl_prior import build_basis
from .market_data import (
    DomainMap,
    MarketParams,
    OptionQuote,
    Role,
    SplitRule,
    atm_implied_vol_level,
    bs_call_price,
    load_quotes,
    split_train_validate,
    write_quotes,
)
from .posterior import CalibrationPosterior, Fidelity, Hyperparams, KLVolatility, ParameterState
from .tsam import (
    ChainRecord,
    TsamConfig,
    default_c0,
    diagnostics,
    load_checkpoint,
    run_chain,
    save_checkpoint,
)

log = logging.getLogger(__name__)

VOL_COLUMNS = ["T", "K", "mean", "median", "q025", "q975"]
PRICE_COLUMNS = ["T", "K", "observed", "pred_mean", "q025", "q975", "role"]
TRUTH_COLUMNS = ["T", "K", "sigma"]
DEFAULT_MU_Y = math.log(0.2)
DEFAULT_NOISE_FRACTION = 1e-3


# ---------------------------------------------------------------------------
# synthetic cases


@dataclass(frozen=True)
class SyntheticCase:
    """Market, quote layout and generating volatility of one synthetic experiment."""

    name: str
    market: MarketParams
    maturities: tuple[float, ...]
    strikes_per_maturity: int
    n_train_maturities: int
    vol: Callable[[np.ndarray, np.ndarray], np.ndarray]
    description: str = ""

    def layout(self) -> tuple[np.ndarray, np.ndarray]:
        """(T, K) pairs: strikes cluster around the spot like the solver mesh."""
        m = self.market
        edges = stretched_nodes(m.k_min, m.k_max, m.spot, self.strikes_per_maturity + 1, 3.0)
        strikes = np.round(edges[2:-2:2], 4)
        t, k = np.meshgrid(self.maturities, strikes, indexing="ij")
        return t.ravel(), k.ravel()


def _case1(_seed):
    return SyntheticCase(
        "1", MarketParams(100.0, 0.05, 0.02, 1.5, 60.0, 140.0), (0.5, 1.0, 1.5), 15, 2,
        lambda t, k: np.broadcast_to(np.asarray(k, float) / 15.0, np.broadcast(t, k).shape),
        "sigma = K/15",
    )


def _case1_inverse(_seed):
    return SyntheticCase(
        "1-inv", MarketParams(100.0, 0.05, 0.02, 1.5, 60.0, 140.0), (0.5, 1.0, 1.5), 15, 2,
        lambda t, k: np.broadcast_to(15.0 / np.asarray(k, float), np.broadcast(t, k).shape),
        "sigma = 15/K",
    )


_CASE23_MARKET = MarketParams(100.0, 0.05, 0.02, 2.0, 65.0, 135.0)
_CASE23_MATURITIES = tuple(np.round(np.linspace(0.25, 2.0, 10), 6))


def _case2(_seed):
    return SyntheticCase(
        "2", _CASE23_MARKET, _CASE23_MATURITIES, 12, 6,
        lambda t, k: 0.3 * np.exp(-np.asarray(t, float)) * (100.0 / np.asarray(k, float)) ** 0.2,
        "sigma = 0.3 exp(-T) (100/K)^0.2",
    )


def case3_truth(seed: int, market: MarketParams = _CASE23_MARKET) -> KLVolatility:
    """Gaussian-process truth with l1=0.5, l2=0.7, sigma^2=1, 90% truncation."""
    basis = build_basis(0.5, 0.7, threshold=0.90, sigma_y=1.0, mu_y=DEFAULT_MU_Y)
    theta = np.random.default_rng(seed).standard_normal(basis.n_kl)
    return KLVolatility(basis, theta, DomainMap.from_market(market))


def _case3(seed):
    return SyntheticCase(
        "3", _CASE23_MARKET, _CASE23_MATURITIES, 12, 6, case3_truth(seed),
        "K-L sample, l1=0.5, l2=0.7, sigma_Y=1",
    )


CASES = {"1": _case1, "1-inv": _case1_inverse, "2": _case2, "3": _case3}


def synthetic_case(case: str | int, seed: int = 0) -> SyntheticCase:
    try:
        return CASES[str(case)](seed)
    except KeyError:
        raise UnknownCase(f"unknown synthetic case {case!r}; choose from {sorted(CASES)}") from None


def reporting_grid(market: MarketParams, n: int = 41) -> tuple[np.ndarray, np.ndarray]:
    return np.linspace(0.0, market.t_max, n), np.linspace(market.k_min, market.k_max, n)


def reference_prices(case: SyntheticCase, level: MeshLevel = REFERENCE, left_boundary="forward"):
    t, k = case.layout()
    m = case.market
    mesh, grid = build_mesh(m, level, sorted(set(t)))
    coeffs = PdeCoefficients(m.rate, m.dividend, m.spot, case.vol, left_boundary)
    return t, k, extract_price(price_surface(mesh, grid, coeffs), t, k)


def generate_synthetic(
    case: str | int,
    out_dir: str | Path,
    noise_sd: float | None = None,
    seed: int = 0,
    grid: int = 41,
    left_boundary: str = "forward",
) -> dict:
    """Write ``quotes.csv``, ``truth.csv`` and ``synthetic.json`` into ``out_dir``.

    ``noise_sd=None`` uses 0.1% of the mean clean price.
    """
    spec = synthetic_case(case, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t, k, clean = reference_prices(spec, left_boundary=left_boundary)
    if noise_sd is None:
        noise_sd = DEFAULT_NOISE_FRACTION * float(np.mean(clean))
    rng = np.random.default_rng([seed, 7])
    noisy = clean + noise_sd * rng.standard_normal(clean.size)
    train_t = set(sorted(set(t))[: spec.n_train_maturities])
    quotes = [
        OptionQuote(float(a), float(b), float(p), Role.TRAIN if a in train_t else Role.VALIDATE)
        for a, b, p in zip(t, k, noisy)
    ]
    write_quotes(out / "quotes.csv", quotes)
    tg, kg = reporting_grid(spec.market, grid)
    tt, kk = np.meshgrid(tg, kg, indexing="ij")
    sig = np.asarray(spec.vol(tt, kk), dtype=float)
    pd.DataFrame({"T": tt.ravel(), "K": kk.ravel(), "sigma": sig.ravel()}).to_csv(
        out / "truth.csv", index=False, columns=TRUTH_COLUMNS
    )
    meta = {
        "case": spec.name,
        "description": spec.description,
        "seed": seed,
        "noise_sd": noise_sd,
        "market": asdict(spec.market),
        "n_quotes": len(quotes),
        "n_train": sum(q.role is Role.TRAIN for q in quotes),
        "clean_prices": clean.tolist(),
    }
    (out / "synthetic.json").write_text(json.dumps(meta, indent=2))
    return meta


def case5_fixture(seed: int = 0) -> tuple[MarketParams, list[OptionQuote]]:
    """Market-shaped fixture: 155 quotes on 8 maturities around spot 2772.70.

    Prices come from Black-Scholes with a skewed smile, so they are
    arbitrage-free; the last two maturities are held out.
    """
    spot, r, q = 2772.70, 0.01, 0.034
    mats = (0.1, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0)
    counts = (25, 24, 22, 20, 19, 17, 15, 13)
    market = MarketParams(spot, r, q, 3.0, 0.5 * spot, 1.6 * spot)
    rng = np.random.default_rng(seed)
    quotes = []
    for i, (t, n) in enumerate(zip(mats, counts)):
        width = 0.12 + 0.18 * min(1.0, t)
        ks = np.round(spot * np.linspace(1 - width, 1 + width, n) / 5.0) * 5.0
        fwd = spot * math.exp((r - q) * t)
        iv = np.maximum(0.05, 0.17 - 0.25 * np.log(ks / fwd) / math.sqrt(1 + t) + 0.01 * t)
        px = bs_call_price(spot, ks, t, r, q, iv)
        px = px * (1 + 2e-4 * rng.standard_normal(n))
        role = Role.TRAIN if i < 6 else Role.VALIDATE
        quotes.extend(OptionQuote(t, float(k), float(p), role) for k, p in zip(ks, px))
    return market, quotes


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationSetup:
    config: RunConfig
    train: list[OptionQuote]
    validate: list[OptionQuote]
    posterior: CalibrationPosterior
    tsam: TsamConfig
    mu_y: float
    n_kl: int


def _split_rule(cfg: RunConfig) -> SplitRule:
    return SplitRule(cfg.data.maturity_cutoff, cfg.data.n_train_maturities)


def quotes_path(cfg: RunConfig) -> Path:
    if cfg.data.quotes is not None:
        return cfg.resolve(cfg.data.quotes)
    return Path(cfg.resolve(cfg.output)) / "data" / "quotes.csv"


def ensure_data(cfg: RunConfig) -> Path:
    """Path of the quote file, generating the synthetic case first if needed."""
    path = quotes_path(cfg)
    if cfg.data.quotes is None and not path.exists():
        generate_synthetic(
            cfg.data.synthetic_case, path.parent, cfg.data.noise_sd, cfg.data.seed,
            cfg.report.grid, cfg.mesh.left_boundary,
        )
    return path


def setup(cfg: RunConfig, seed: int | None = None) -> CalibrationSetup:
    path = ensure_data(cfg)
    quotes = load_quotes(path, market=cfg.market)
    train, validate = split_train_validate(quotes, _split_rule(cfg))
    kl = cfg.kl
    if kl.mu_y == "auto":
        level = atm_implied_vol_level(train, cfg.market)
        mu_y = math.log(level) if math.isfinite(level) and level > 0 else DEFAULT_MU_Y
    else:
        mu_y = float(kl.mu_y)
    h = cfg.hyper
    lo_hi = dict(a_s=h.a_s, b_s=h.b_s, l_lo=h.l_lo, l_hi=h.l_hi)
    if h.b_eps is None:
        hyper = Hyperparams.scaled_to_prices(
            [q.mid_price for q in train], h.noise_fraction, h.a_eps, **lo_hi
        )
    else:
        hyper = Hyperparams(a_eps=h.a_eps, b_eps=h.b_eps, **lo_hi)
    dmap = DomainMap.from_market(cfg.market)
    centers = tuple(float(c) for c in dmap.to_unit(0.5 * cfg.market.t_max, cfg.market.spot))
    ls = kl.truncation_lengthscales or (0.5 * (h.l_lo + h.l_hi),) * 2
    template = build_basis(
        ls[0], ls[1], sigma_mu=kl.sigma_mu, centers=centers, max_per_dim=kl.max_per_dim,
        threshold=kl.threshold, n_kl=kl.n_kl, mu_y=mu_y,
    )
    post = CalibrationPosterior(
        train, cfg.market, template, hyper, cfg.mesh.level("coarse"), cfg.mesh.level("fine"),
        cfg.mesh.left_boundary, extra_maturities=[q.maturity for q in validate],
    )
    s = cfg.sampler
    tsam = TsamConfig(
        total_iters=s.total_iters, burn_in=s.burn_in, thin=s.thin, t0=s.t0,
        c0=default_c0(template.n_kl, s.theta_sd, s.lengthscale_sd, s.sigma_sd),
        s_d=s.s_d, eps_reg=s.eps_reg, rng_seed=s.seed if seed is None else seed,
    )
    return CalibrationSetup(cfg, train, validate, post, tsam, mu_y, template.n_kl)


def chain_seeds(cfg: RunConfig, chains: int | None = None) -> list[int]:
    n = chains or cfg.sampler.chains
    return [cfg.sampler.seed + i for i in range(n)]


def checkpoint_path(out: Path, i: int) -> Path:
    return out / f"chain{i}.npz"


def _run_one(cfg: RunConfig, seed: int, ckpt: Path, resume: bool) -> ChainRecord:
    st = setup(cfg, seed)
    record = load_checkpoint(ckpt) if resume and ckpt.exists() else None
    x0 = st.posterior.initial_state().to_vector()
    post = st.posterior

    def progress(rec: ChainRecord):
        if rec.iteration % 5000 == 0:
            log.info("seed %d: iteration %d, %d fine solves", seed, rec.iteration, rec.fine_evals)

    record = run_chain(
        st.tsam, post.log_density_fn(Fidelity.COARSE), post.log_density_fn(Fidelity.FINE), x0,
        record=record, checkpoint=ckpt, checkpoint_every=cfg.sampler.checkpoint_every,
        progress=progress,
    )
    save_checkpoint(record, ckpt)
    return record


def run_chains(cfg: RunConfig, out: Path, chains: int | None = None,
               resume: bool = False) -> list[ChainRecord]:
    seeds = chain_seeds(cfg, chains)
    out.mkdir(parents=True, exist_ok=True)
    paths = [checkpoint_path(out, i) for i in range(len(seeds))]
    if len(seeds) == 1:
        return [_run_one(cfg, seeds[0], paths[0], resume)]
    with ProcessPoolExecutor(max_workers=len(seeds)) as pool:
        futs = [pool.submit(_run_one, cfg, s, p, resume) for s, p in zip(seeds, paths)]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# summaries


@dataclass
class PosteriorSummary:
    vol: pd.DataFrame
    prices: pd.DataFrame
    manifest: dict


def _quantiles(x: np.ndarray) -> dict[str, np.ndarray]:
    q = np.quantile(x, [0.025, 0.5, 0.975], axis=0)
    return {"mean": x.mean(axis=0), "median": q[1], "q025": q[0], "q975": q[2]}


def summarize_samples(st: CalibrationSetup, states: np.ndarray, seed: int = 0) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Pointwise volatility quantiles on the reporting grid and predictive price bands."""
    if states.shape[0] == 0:
        raise EmptyChain("no stored samples to summarize")
    cfg, post = st.config, st.posterior
    tg, kg = reporting_grid(cfg.market, cfg.report.grid)
    all_quotes = st.train + st.validate
    qt = np.array([q.maturity for q in all_quotes])
    qk = np.array([q.strike for q in all_quotes])
    n_train = len(st.train)
    rng = np.random.default_rng([seed, 11])
    vols = np.empty((states.shape[0], tg.size, kg.size))
    preds = np.empty((states.shape[0], qt.size))
    h = post.hyper
    for s, x in enumerate(states):
        state = ParameterState.from_vector(x)
        vol = post.volatility(state)
        vols[s] = vol(tg[:, None], kg[None, :])
        model = extract_price(post.solve(state, Fidelity.FINE), qt, qk)
        if cfg.report.predictive_noise:
            resid = post.v_obs - model[:n_train]
            shape = h.a_eps + 0.5 * n_train
            scale = h.b_eps + 0.5 * float(resid @ resid)
            var = scale / rng.gamma(shape)
            model = model + math.sqrt(var) * rng.standard_normal(model.size)
        preds[s] = model
    vq = _quantiles(vols.reshape(states.shape[0], -1))
    tt, kk = np.meshgrid(tg, kg, indexing="ij")
    vol_df = pd.DataFrame({"T": tt.ravel(), "K": kk.ravel(), **vq})[VOL_COLUMNS]
    pq = _quantiles(preds)
    price_df = pd.DataFrame({
        "T": qt, "K": qk, "observed": [q.mid_price for q in all_quotes],
        "pred_mean": pq["mean"], "q025": pq["q025"], "q975": pq["q975"],
        "role": [q.role.value for q in all_quotes],
    })[PRICE_COLUMNS]
    return vol_df, price_df


def _jsonable_diag(d: dict) -> dict:
    d = dict(d)
    d.pop("trace", None)
    return d


def summarize(cfg: RunConfig, records: Sequence[ChainRecord], out: str | Path,
              extra: dict | None = None) -> PosteriorSummary:
    """Write ``vol_summary.csv``, ``price_summary.csv`` and ``manifest.json``."""
    cfg, out = bind_output(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    if not records or all(r.states.shape[0] == 0 for r in records):
        raise EmptyChain("no stored samples to summarize")
    st = setup(cfg)
    states = np.concatenate([r.states for r in records if r.states.shape[0]])
    vol_df, price_df = summarize_samples(st, states, cfg.sampler.seed)
    vol_df.to_csv(out / "vol_summary.csv", index=False)
    price_df.to_csv(out / "price_summary.csv", index=False)
    manifest = {
        "version": 1,
        "config": cfg.to_dict(),
        "seeds": chain_seeds(cfg, len(records)),
        "quotes": str(quotes_path(cfg)),
        "n_kl": st.n_kl,
        "mu_y": st.mu_y,
        "b_eps": st.posterior.hyper.b_eps,
        "n_train": len(st.train),
        "n_validate": len(st.validate),
        "chains": [_jsonable_diag(diagnostics(r)) for r in records],
        "outputs": ["vol_summary.csv", "price_summary.csv"]
        + [checkpoint_path(out, i).name for i in range(len(records))],
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default))
    return PosteriorSummary(vol_df, price_df, manifest)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def bind_output(cfg: RunConfig, out: str | Path | None) -> tuple[RunConfig, Path]:
    """Fix the run directory so generated data and outputs land together."""
    path = Path(out) if out is not None else cfg.resolve(cfg.output)
    path = path.resolve()
    return replace(cfg, output=str(path)), path


def calibrate(cfg: RunConfig, out: str | Path | None = None, chains: int | None = None,
              seed: int | None = None) -> PosteriorSummary:
    """Run the configured chains and write their summaries."""
    if seed is not None:
        cfg = replace(cfg, sampler=replace(cfg.sampler, seed=seed))
    cfg, out = bind_output(cfg, out)
    start = time.perf_counter()
    records = run_chains(cfg, out, chains)
    elapsed = time.perf_counter() - start
    return summarize(cfg, records, out, {"sampling_seconds": elapsed})


def resume(cfg: RunConfig, out: str | Path | None = None) -> PosteriorSummary:
    cfg, out = bind_output(cfg, out)
    n = len(sorted(out.glob("chain*.npz")))
    if n == 0:
        raise FileNotFoundError(f"no checkpoints in {out}")
    records = run_chains(cfg, out, n, resume=True)
    return summarize(cfg, records, out)


def load_records(out: str | Path) -> list[ChainRecord]:
    paths = sorted(Path(out).glob("chain*.npz"))
    if not paths:
        raise EmptyChain(f"no chain checkpoints in {out}")
    return [load_checkpoint(p) for p in paths]


# ---------------------------------------------------------------------------
# standalone pricing


def load_surface(path: str | Path) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Bilinear interpolant of a ``T, K, sigma`` grid file, flat outside the grid."""
    df = pd.read_csv(path)
    missing = {"T", "K", "sigma"} - set(df.columns)
    if missing:
        raise MissingColumn(f"surface file lacks {sorted(missing)}")
    tg, kg = np.unique(df["T"]), np.unique(df["K"])
    table = df.pivot_table(index="T", columns="K", values="sigma").reindex(index=tg, columns=kg)
    if table.isna().any().any():
        raise ValueError("surface file is not a full tensor grid")
    values = table.to_numpy()
    if tg.size == 1:
        tg, values = np.array([tg[0], tg[0] + 1.0]), np.vstack([values, values])
    interp = RegularGridInterpolator((tg, kg), values, bounds_error=False, fill_value=None)

    def vol(t, k):
        t, k = np.broadcast_arrays(np.asarray(t, float), np.asarray(k, float))
        pts = np.column_stack([np.clip(t.ravel(), tg[0], tg[-1]), np.clip(k.ravel(), kg[0], kg[-1])])
        return interp(pts).reshape(t.shape)

    return vol


def price_requests(cfg: RunConfig, vol, maturities, strikes, level: str = "fine"):
    """One forward solve extracted at the requested ``(T, K)`` pairs.

    Returns the prices and the full :class:`PriceField`.
    """
    m = cfg.market
    t = np.asarray(maturities, float)
    k = np.asarray(strikes, float)
    mesh, grid = build_mesh(m, cfg.mesh.level(level), sorted({x for x in t if x > 0}))
    coeffs = PdeCoefficients(m.rate, m.dividend, m.spot, vol, cfg.mesh.left_boundary)
    field_ = price_surface(mesh, grid, coeffs)
    return extract_price(field_, t, k), field_


# ---------------------------------------------------------------------------
# checks against a known truth


def truth_metrics(vol_df: pd.DataFrame, truth_df: pd.DataFrame, k_range=(80.0, 120.0)) -> dict:
    """Posterior-mean error and band coverage of the true surface on a strike window."""
    merged = vol_df.merge(truth_df, on=["T", "K"], validate="one_to_one")
    sel = merged[(merged["K"] >= k_range[0] - 1e-9) & (merged["K"] <= k_range[1] + 1e-9)]
    rel = np.abs(sel["mean"] - sel["sigma"]) / sel["sigma"]
    inside = (sel["q025"] <= sel["sigma"]) & (sel["sigma"] <= sel["q975"])
    return {
        "n_points": int(len(sel)),
        "max_rel_error": float(rel.max()),
        "mean_rel_error": float(rel.mean()),
        "coverage": float(inside.mean()),
    }


def predictive_metrics(price_df: pd.DataFrame) -> dict:
    """Share of predictive means and observations inside their 95% bands, per role."""
    out = {}
    for role, g in price_df.groupby("role"):
        out[role] = {
            "n": int(len(g)),
            "mean_inside": float(((g["q025"] <= g["pred_mean"]) & (g["pred_mean"] <= g["q975"])).mean()),
            "observed_inside": float(((g["q025"] <= g["observed"]) & (g["observed"] <= g["q975"])).mean()),
            "max_abs_error": float(np.abs(g["pred_mean"] - g["observed"]).max()),
        }
    return out
