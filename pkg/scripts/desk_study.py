"""Train the default desk-scale model on phantoms and compare it with the lookup baseline.

    python3 scripts/desk_study.py --out runs/desk [--config cfg.json] [--seed 0]
"""

import argparse
import json
import logging
import os

from reladiff.harness.config import load_config
from reladiff.harness.study import desk_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config, seed=args.seed, out_dir=os.path.join(args.out, "run"),
                      manifest=os.path.join(args.out, "data", "manifest.json"))
    out = desk_study(cfg)
    print(json.dumps({k: v for k, v in out.items() if k != "config"}, indent=1))
    return 0 if all(out.get("passed", {"nan": False}).values()) else 3


if __name__ == "__main__":
    raise SystemExit(main())
