"""Write the market-shaped fixture quotes used by configs/case5_fixture.yaml."""
import argparse
from pathlib import Path

from bayeslv.experiments import case5_fixture
from bayeslv.market_data import write_quotes


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "runs/case5/data/quotes.csv"))
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    market, quotes = case5_fixture(args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_quotes(out, quotes)
    print(f"wrote {len(quotes)} quotes to {out}; market {market}")


if __name__ == "__main__":
    main()
