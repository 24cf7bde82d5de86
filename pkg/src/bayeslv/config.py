"""Run configuration: nested dataclasses loaded from a YAML (or JSON) file.

A minimal file::

    version: 1
    market: {spot: 100, rate: 0.05, dividend: 0.02, t_max: 1.5, k_min: 60, k_max: 140}
    data: {quotes: quotes.csv, maturity_cutoff: 1.0}
    kl: {n_kl: 14}
    sampler: {total_iters: 20000, burn_in: 2000, thin: 10}

Relative paths are resolved against the configuration file's directory. A run
manifest written by ``calibrate`` carries the full configuration under its
``config`` key and can be passed back as ``--config``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .fem_pricer import MeshLevel
from .market_data import MarketParams

CONFIG_VERSION = 1


@dataclass
class DataConfig:
    quotes: str | None = None
    synthetic_case: str | None = None
    maturity_cutoff: float | None = None
    n_train_maturities: int | None = None
    noise_sd: float | None = None
    seed: int = 0


@dataclass
class KLConfig:
    sigma_mu: float = 0.68
    threshold: float = 0.90
    max_per_dim: int = 24
    n_kl: int | None = None
    truncation_lengthscales: tuple[float, float] | None = None
    mu_y: float | str = "auto"


@dataclass
class HyperConfig:
    a_eps: float = 2.5
    b_eps: float | None = None
    noise_fraction: float = 0.005
    a_s: float = 3.0
    b_s: float = 2.0
    l_lo: float = 0.5
    l_hi: float = 1.0


@dataclass
class MeshConfig:
    coarse: tuple[int, int] = (5, 10)
    fine: tuple[int, int] = (25, 50)
    stretch: float = 3.0
    left_boundary: str = "forward"

    def level(self, which: str) -> MeshLevel:
        n_el, n_steps = getattr(self, which)
        return MeshLevel(int(n_el), int(n_steps), self.stretch)


@dataclass
class SamplerConfig:
    total_iters: int = 20_000
    burn_in: int = 2_000
    thin: int = 10
    t0: int = 1_000
    s_d: float | None = None
    eps_reg: float = 1e-6
    theta_sd: float = 0.1
    lengthscale_sd: float = 0.05
    sigma_sd: float = 0.1
    seed: int = 0
    chains: int = 1
    checkpoint_every: int = 5_000


@dataclass
class ReportConfig:
    grid: int = 41
    predictive_noise: bool = True


@dataclass
class RunConfig:
    market: MarketParams
    data: DataConfig = field(default_factory=DataConfig)
    kl: KLConfig = field(default_factory=KLConfig)
    hyper: HyperConfig = field(default_factory=HyperConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    output: str = "runs/out"
    version: int = CONFIG_VERSION
    base_dir: str = "."

    def __post_init__(self):
        c, f = self.mesh.level("coarse"), self.mesh.level("fine")
        if not (c.n_nodes < f.n_nodes or c.n_steps < f.n_steps):
            raise ConfigError("coarse mesh must be strictly smaller than the fine mesh")
        if self.data.quotes is None and self.data.synthetic_case is None:
            raise ConfigError("data needs either a quotes file or a synthetic case")

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


_SECTIONS = {
    "data": DataConfig,
    "kl": KLConfig,
    "hyper": HyperConfig,
    "mesh": MeshConfig,
    "sampler": SamplerConfig,
    "report": ReportConfig,
}


def _build(cls, raw: dict, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**vals)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where!r} section: {exc}") from exc


def config_from_dict(raw: dict, base_dir: str | Path = ".") -> RunConfig:
    if "config" in raw and "market" not in raw:
        raw = raw["config"]
    raw = dict(raw)
    version = raw.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    if "market" not in raw:
        raise ConfigError("config needs a 'market' section")
    try:
        market = MarketParams(**raw.pop("market"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid market section: {exc}") from exc
    sections = {name: _build(cls, raw.pop(name, None), name) for name, cls in _SECTIONS.items()}
    output = raw.pop("output", "runs/out")
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")
    return RunConfig(market=market, output=output, base_dir=str(base_dir), **sections)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} does not hold a mapping")
    return config_from_dict(raw, path.parent)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(_plain(cfg.to_dict()), sort_keys=False))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
