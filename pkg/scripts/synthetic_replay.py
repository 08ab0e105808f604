"""Generate an epoch CSV from a known instance, then ingest and replay it.

    python3 scripts/synthetic_replay.py --out results/replay-demo
"""

import argparse
import csv
import json
from pathlib import Path

import numpy as np

from metapricing.experiment.cli import main


def write_dataset(path: Path, n_epochs: int, dim: int, seed: int, sigma: float) -> None:
    rng = np.random.default_rng(seed)
    mean = 0.5 * np.r_[np.ones(dim), -np.ones(dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", *(f"x{k}" for k in range(dim)), "price", "demand"])
        for e in range(n_epochs):
            theta = mean + 0.05 * rng.normal(size=2 * dim)
            for _ in range(int(rng.integers(80, 200))):
                x = rng.uniform(0, 1 / np.sqrt(dim), dim)
                p = rng.uniform(0.1, 1.0)
                y = theta @ np.r_[x, p * x] + sigma * rng.normal()
                w.writerow([f"seg{e:04d}", *map(repr, x.tolist()), repr(p), repr(float(y))])


def run() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/replay-demo")
    ap.add_argument("--epochs", type=int, default=120)
    ap.add_argument("--dim", type=int, default=2)
    ap.add_argument("--sigma", type=float, default=0.3)
    ap.add_argument("--permutations", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out / "epochs.csv", args.epochs, args.dim, args.seed, args.sigma)
    schema = {"epoch_key": ["segment"], "features": [f"x{k}" for k in range(args.dim)],
              "price": "price", "outcome": "demand", "price_bounds": [0.1, 1.0]}
    (out / "schema.json").write_text(json.dumps(schema, indent=2) + "\n")
    code = main(["ingest", "--csv", str(out / "epochs.csv"), "--schema", str(out / "schema.json"),
                 "--out", str(out / "fitted")])
    if code:
        return code
    return main(["replay", "--fitted", str(out / "fitted"), "--permutations",
                 str(args.permutations), "--seed", str(args.seed), "--out", str(out)])


if __name__ == "__main__":
    raise SystemExit(run())
