"""Train the four ablation variants for a few epochs each and print their loss columns.

    python3 scripts/ablations.py --out runs/ablate [--epochs 5] [--n-train 20]
"""

import argparse
import json
import logging
import os

from reladiff.harness.config import load_config
from reladiff.harness.study import ablation_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/ablate")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--n-train", type=int, default=20)
    ap.add_argument("--n-test", type=int, default=2)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config, seed=args.seed, n_train=args.n_train, n_test=args.n_test,
                      out_dir=os.path.join(args.out, "runs"), manifest=os.path.join(args.out, "data", "manifest.json"))
    res = ablation_study(cfg, epochs=args.epochs)
    print(json.dumps(res, indent=1))
    return 0 if all(r["completed"] for r in res.values()) else 3


if __name__ == "__main__":
    raise SystemExit(main())
