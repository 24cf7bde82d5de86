"""Two-stage adaptive Metropolis sampler.

Each iteration draws a Gaussian candidate around the current state with an
adaptive covariance, screens it against a cheap approximate log target and
only evaluates the expensive target for candidates that pass the screen.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import CovarianceFactorizationFailure, EmptyChain

log = logging.getLogger(__name__)

LogTarget = Callable[[np.ndarray], float]
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TsamConfig:
    """Sampler settings.

    ``c0`` is the diagonal of the initial proposal covariance; ``s_d=None``
    means the usual ``2.38**2 / d``.
    """

    total_iters: int = 10_000
    burn_in: int = 1_000
    thin: int = 10
    t0: int = 1_000
    c0: tuple[float, ...] | None = None
    s_d: float | None = None
    eps_reg: float = 1e-6
    rng_seed: int = 0
    adapt: bool = True

    def __post_init__(self):
        if self.t0 < 1 or self.thin < 1 or self.eps_reg <= 0:
            raise ValueError("need t0 >= 1, thin >= 1 and eps_reg > 0")
        if self.total_iters > 0 and self.burn_in >= self.total_iters:
            raise ValueError("burn_in must be smaller than total_iters")
        if self.s_d is not None and self.s_d <= 0:
            raise ValueError("s_d must be positive")

    def scale(self, dim: int) -> float:
        return self.s_d if self.s_d is not None else 2.38**2 / dim


def default_c0(n_kl: int, theta_sd=0.1, lengthscale_sd=0.05, sigma_sd=0.1) -> tuple[float, ...]:
    """Per-block proposal variances for ``(theta, l1, l2, sigma_y)``."""
    return (theta_sd**2,) * n_kl + (lengthscale_sd**2,) * 2 + (sigma_sd**2,)


class RunningMoments:
    """Welford mean and covariance of every state visited so far."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def update(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += np.outer(delta, x - self.mean)

    @property
    def cov(self) -> np.ndarray:
        if self.n < 2:
            return np.zeros_like(self.m2)
        c = self.m2 / (self.n - 1)
        return 0.5 * (c + c.T)


@dataclass
class ChainRecord:
    """Stored samples plus adaptation state and counters of one chain."""

    dim: int
    samples: list = field(default_factory=list)
    sample_logpost: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    moments: RunningMoments = None
    iteration: int = 0
    stage1_proposals: int = 0
    stage1_passes: int = 0
    stage2_accepts: int = 0
    coarse_evals: int = 0
    fine_evals: int = 0
    eps_bumps: int = 0
    current: np.ndarray = None
    current_coarse: float = -math.inf
    current_fine: float = -math.inf
    rng_state: dict | None = None

    def __post_init__(self):
        if self.moments is None:
            self.moments = RunningMoments(self.dim)

    @property
    def states(self) -> np.ndarray:
        return np.asarray(self.samples, dtype=float).reshape(-1, self.dim)

    def check_counters(self) -> None:
        assert self.stage2_accepts <= self.stage1_passes <= self.stage1_proposals, (
            self.stage2_accepts, self.stage1_passes, self.stage1_proposals)

    def snapshot(self) -> "ChainRecord":
        """Independent copy safe to hand to other threads."""
        return copy.deepcopy(self)


def proposal_covariance(record: ChainRecord, config: TsamConfig, t: int) -> np.ndarray:
    """Covariance used at iteration ``t`` (1-based): ``C0`` before ``t0``, then
    ``s_d * cov(history) + s_d * eps * I``."""
    d = record.dim
    if t < config.t0 or not config.adapt:
        c0 = config.c0 if config.c0 is not None else (0.01,) * d
        return np.diag(np.asarray(c0, dtype=float))
    s_d = config.scale(d)
    return s_d * record.moments.cov + s_d * config.eps_reg * np.eye(d)


def _factor(cov: np.ndarray, config: TsamConfig, record: ChainRecord) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    # one retry with a larger ridge
    record.eps_bumps += 1
    s_d = config.scale(record.dim)
    bumped = cov + 9.0 * s_d * config.eps_reg * np.eye(record.dim)
    try:
        return np.linalg.cholesky(bumped)
    except np.linalg.LinAlgError as exc:
        raise CovarianceFactorizationFailure("proposal covariance is not positive definite") from exc


def propose(record: ChainRecord, current: np.ndarray, config: TsamConfig, rng, t: int) -> np.ndarray:
    chol = _factor(proposal_covariance(record, config, t), config, record)
    return current + chol @ rng.standard_normal(record.dim)


def stage1_screen(cand_coarse: float, cur_coarse: float, rng) -> bool:
    """Pass with probability ``min(1, pi*(cand) / pi*(current))``."""
    u = rng.random()
    if cand_coarse == -math.inf:
        return False
    return math.log(u) < cand_coarse - cur_coarse if u > 0 else True


def stage2_log_ratio(prop_fine, cur_fine, prop_coarse, cur_coarse) -> float:
    return (prop_fine - cur_fine) - (prop_coarse - cur_coarse)


def stage2_accept(log_ratio: float, rng) -> bool:
    """Accept with probability ``min(1, exp(log_ratio))``; no draw when it is 1."""
    if log_ratio >= 0:
        return True
    if log_ratio == -math.inf or math.isnan(log_ratio):
        return False
    return math.log(rng.random()) < log_ratio


def _rng_from(record: ChainRecord, config: TsamConfig) -> np.random.Generator:
    rng = np.random.default_rng(config.rng_seed)
    if record.rng_state is not None:
        rng.bit_generator.state = record.rng_state
    return rng


def run_chain(
    config: TsamConfig,
    coarse: LogTarget,
    fine: LogTarget,
    initial,
    record: ChainRecord | None = None,
    checkpoint: str | Path | None = None,
    checkpoint_every: int = 0,
    progress: Callable[[ChainRecord], None] | None = None,
) -> ChainRecord:
    """Run (or continue) a two-stage adaptive Metropolis chain.

    ``coarse`` and ``fine`` map a flat state vector to an unnormalized log
    density (``-inf`` outside the support). Passing a ``record`` resumes it.
    """
    x0 = np.asarray(initial, dtype=float)
    if record is None:
        record = ChainRecord(dim=x0.size)
    if config.total_iters == 0:
        return record
    rng = _rng_from(record, config)
    if record.current is None:
        record.current = x0.copy()
        record.current_coarse = coarse(record.current)
        record.current_fine = fine(record.current)
        record.coarse_evals += 1
        record.fine_evals += 1
        if not (math.isfinite(record.current_coarse) and math.isfinite(record.current_fine)):
            raise ValueError("initial state has zero posterior mass")
        record.moments.update(record.current)

    try:
        for t in range(record.iteration + 1, config.total_iters + 1):
            cand = propose(record, record.current, config, rng, t)
            record.stage1_proposals += 1
            cand_coarse = coarse(cand)
            record.coarse_evals += 1
            accepted = False
            if stage1_screen(cand_coarse, record.current_coarse, rng):
                record.stage1_passes += 1
                if np.array_equal(cand, record.current):
                    # degenerate proposal: accepted trivially, no fine solve
                    record.stage2_accepts += 1
                    accepted = True
                else:
                    cand_fine = fine(cand)
                    record.fine_evals += 1
                    ratio = stage2_log_ratio(cand_fine, record.current_fine, cand_coarse,
                                             record.current_coarse)
                    if stage2_accept(ratio, rng):
                        record.stage2_accepts += 1
                        record.current = cand
                        record.current_coarse, record.current_fine = cand_coarse, cand_fine
                        accepted = True
            record.decisions.append(accepted)
            if config.adapt:
                record.moments.update(record.current)
            record.iteration = t
            if t > config.burn_in and (t - config.burn_in) % config.thin == 0:
                record.samples.append(record.current.copy())
                record.sample_logpost.append(record.current_fine)
            if t % 1000 == 0:
                record.check_counters()
                if progress is not None:
                    progress(record)
            if checkpoint and checkpoint_every and t % checkpoint_every == 0:
                record.rng_state = rng.bit_generator.state
                save_checkpoint(record, checkpoint)
    except KeyboardInterrupt:
        if checkpoint:
            record.rng_state = rng.bit_generator.state
            save_checkpoint(record, checkpoint)
        raise
    record.rng_state = rng.bit_generator.state
    record.check_counters()
    return record


def run_adaptive_metropolis(config: TsamConfig, target: LogTarget, initial) -> ChainRecord:
    """Single-stage adaptive Metropolis with the same proposal and RNG usage.

    Baseline for comparisons: with identical coarse and fine targets the
    two-stage chain reproduces this one decision for decision.
    """
    x = np.asarray(initial, dtype=float).copy()
    record = ChainRecord(dim=x.size)
    rng = np.random.default_rng(config.rng_seed)
    lp = target(x)
    record.fine_evals += 1
    record.moments.update(x)
    for t in range(1, config.total_iters + 1):
        cand = propose(record, x, config, rng, t)
        record.stage1_proposals += 1
        lp_cand = target(cand)
        record.fine_evals += 1
        u = rng.random()
        accepted = lp_cand != -math.inf and (u == 0 or math.log(u) < lp_cand - lp)
        if accepted:
            x, lp = cand, lp_cand
            record.stage1_passes += 1
            record.stage2_accepts += 1
        record.decisions.append(accepted)
        if config.adapt:
            record.moments.update(x)
        record.iteration = t
        if t > config.burn_in and (t - config.burn_in) % config.thin == 0:
            record.samples.append(x.copy())
            record.sample_logpost.append(lp)
    record.current, record.current_fine = x, lp
    return record


def effective_sample_size(x: np.ndarray) -> float:
    """ESS of a 1D chain by Geyer's initial monotone sequence estimator."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        return float(n)
    xc = x - x.mean()
    if np.allclose(xc, 0.0):
        return 1.0
    nfft = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:n] / n
    rho = acov / acov[0]
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    keep = np.argmax(pairs <= 0) if np.any(pairs <= 0) else pairs.size
    pairs = np.minimum.accumulate(pairs[:keep]) if keep else pairs[:0]
    tau = -1.0 + 2.0 * pairs.sum()
    return float(max(1.0, n / max(tau, 1e-12)))


def diagnostics(record: ChainRecord, trace_len: int = 200) -> dict:
    states = record.states
    if states.shape[0] == 0:
        raise EmptyChain("chain has no stored samples")
    p = max(record.stage1_proposals, 1)
    step = max(1, states.shape[0] // trace_len)
    return {
        "iterations": record.iteration,
        "stored_samples": int(states.shape[0]),
        "stage1_pass_rate": record.stage1_passes / p,
        "stage2_accept_rate": record.stage2_accepts / max(record.stage1_passes, 1),
        "overall_accept_rate": record.stage2_accepts / p,
        "stage1_proposals": record.stage1_proposals,
        "stage1_passes": record.stage1_passes,
        "stage2_accepts": record.stage2_accepts,
        "coarse_evals": record.coarse_evals,
        "fine_evals": record.fine_evals,
        "ess": [effective_sample_size(states[:, j]) for j in range(states.shape[1])],
        "trace": states[::step].tolist(),
    }


def save_checkpoint(record: ChainRecord, path: str | Path) -> None:
    """Write a versioned ``.npz`` holding everything needed to resume."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "dim": record.dim,
        "iteration": record.iteration,
        "stage1_proposals": record.stage1_proposals,
        "stage1_passes": record.stage1_passes,
        "stage2_accepts": record.stage2_accepts,
        "coarse_evals": record.coarse_evals,
        "fine_evals": record.fine_evals,
        "eps_bumps": record.eps_bumps,
        "moments_n": record.moments.n,
        "current_coarse": record.current_coarse,
        "current_fine": record.current_fine,
        "rng_state": record.rng_state,
    }
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(
        tmp,
        meta=np.array(json.dumps(meta)),
        samples=record.states,
        sample_logpost=np.asarray(record.sample_logpost, dtype=float),
        decisions=np.asarray(record.decisions, dtype=bool),
        mean=record.moments.mean,
        m2=record.moments.m2,
        current=record.current if record.current is not None else np.zeros(0),
    )
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> ChainRecord:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        rec = ChainRecord(dim=meta["dim"])
        rec.samples = [row for row in data["samples"]]
        rec.sample_logpost = data["sample_logpost"].tolist()
        rec.decisions = data["decisions"].tolist()
        rec.moments.n = meta["moments_n"]
        rec.moments.mean = data["mean"].copy()
        rec.moments.m2 = data["m2"].copy()
        cur = data["current"]
        rec.current = cur.copy() if cur.size else None
    for key in ("iteration", "stage1_proposals", "stage1_passes", "stage2_accepts",
                "coarse_evals", "fine_evals", "eps_bumps", "current_coarse", "current_fine",
                "rng_state"):
        setattr(rec, key, meta[key])
    return rec
