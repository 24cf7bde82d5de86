"""Command line entry point: ``bayeslv <subcommand> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import experiments as ex
from .config import RunConfig, load_config
from .errors import BayesLVError, ConfigError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

log = logging.getLogger("bayeslv")


def _with_overrides(cfg: RunConfig, args) -> RunConfig:
    sampler = cfg.sampler
    if getattr(args, "seed", None) is not None:
        sampler = replace(sampler, seed=args.seed)
    if getattr(args, "chains", None) is not None:
        sampler = replace(sampler, chains=args.chains)
    return replace(cfg, sampler=sampler)


def _out(cfg: RunConfig, args) -> Path:
    return Path(args.out) if args.out else cfg.resolve(cfg.output)


def cmd_generate(args) -> int:
    meta = ex.generate_synthetic(
        args.case, args.out, noise_sd=args.noise_sd, seed=args.seed or 0, grid=args.grid
    )
    print(f"wrote {meta['n_quotes']} quotes for case {meta['case']} to {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    out = _out(cfg, args)
    summary = ex.calibrate(cfg, out)
    for i, d in enumerate(summary.manifest["chains"]):
        print(
            f"chain {i}: stage-1 pass {d['stage1_pass_rate']:.3f}, "
            f"stage-2 accept {d['stage2_accept_rate']:.3f}, "
            f"min ESS {min(d['ess']):.0f}"
        )
    print(f"summaries written to {out}")
    return EXIT_OK


def cmd_summarize(args) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    out = _out(cfg, args)
    ex.summarize(cfg, ex.load_records(out), out)
    print(f"summaries written to {out}")
    return EXIT_OK


def cmd_resume(args) -> int:
    cfg = _with_overrides(load_config(args.config), args)
    out = _out(cfg, args)
    ex.resume(cfg, out)
    print(f"resumed chains in {out}")
    return EXIT_OK


def cmd_price(args) -> int:
    cfg = load_config(args.config)
    vol = ex.load_surface(args.surface)
    req = pd.read_csv(args.requests)
    if not {"maturity", "strike"} <= set(req.columns):
        raise ConfigError("request file needs 'maturity' and 'strike' columns")
    prices, field_ = ex.price_requests(cfg, vol, req["maturity"], req["strike"], args.level)
    out = Path(args.out) if args.out else cfg.resolve(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"maturity": req["maturity"], "strike": req["strike"], "price": prices}).to_csv(
        out / "prices.csv", index=False
    )
    if args.dump_solution:
        tt, kk = np.meshgrid(field_.grid.times, field_.mesh.nodes, indexing="ij")
        pd.DataFrame({"T": tt.ravel(), "K": kk.ravel(), "price": field_.values.ravel()}).to_csv(
            out / "solution.csv", index=False
        )
    print(f"priced {len(prices)} options into {out / 'prices.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayeslv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-synthetic", help="write synthetic quotes and the true surface")
    g.add_argument("--case", required=True, choices=sorted(ex.CASES))
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-sd", type=float, default=None,
                   help="absolute price noise (default 0.1%% of the mean price)")
    g.add_argument("--grid", type=int, default=41, help="truth grid points per axis")
    g.set_defaults(func=cmd_generate)

    for name, func, text in (
        ("calibrate", cmd_calibrate, "run the sampler and write summaries"),
        ("summarize", cmd_summarize, "rebuild summaries from saved chains"),
        ("resume", cmd_resume, "continue saved chains to the configured length"),
    ):
        c = sub.add_parser(name, help=text)
        c.add_argument("--config", required=True)
        c.add_argument("--out")
        c.add_argument("--seed", type=int)
        c.add_argument("--chains", type=int)
        c.set_defaults(func=func)

    pr = sub.add_parser("price", help="price options under a gridded volatility surface")
    pr.add_argument("--config", required=True)
    pr.add_argument("--surface", required=True, help="CSV with columns T, K, sigma")
    pr.add_argument("--requests", required=True, help="CSV with columns maturity, strike")
    pr.add_argument("--out")
    pr.add_argument("--level", default="fine", choices=("coarse", "fine"))
    pr.add_argument("--dump-solution", action="store_true",
                    help="also write the nodal price field")
    pr.set_defaults(func=cmd_price)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, BayesLVError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
