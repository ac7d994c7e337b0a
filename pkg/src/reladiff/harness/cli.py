"""Command line entry point: ``reladiff {phantom-gen,train,sample,eval,check}``.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error (missing or
malformed inputs, non-finite training loss), 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from ..errors import ConfigError, FormatError, LoadError
from .config import ENV_PREFIX, load_config, save_config
from .train import NonFiniteLoss

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p):
    p.add_argument("--config", help="JSON run config (fields may also come from "
                                    f"{ENV_PREFIX}<FIELD> environment variables)")
    p.add_argument("--seed", type=int, help="overrides the config seed")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="reladiff", description="Relativistic-adversarial conditional diffusion toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom-gen", help="write a synthetic phantom dataset and its manifest")
    _common(p)
    p.add_argument("--out", help="dataset directory (default: the manifest's directory)")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty directory")

    p = sub.add_parser("train", help="train generator and discriminator")
    _common(p)
    p.add_argument("--out", help="run directory (overrides out_dir)")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", nargs="?", const="latest", help="checkpoint path, or latest in the run dir")

    p = sub.add_parser("sample", help="synthesize every test subject and tracer")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, help="only the first N subjects")

    p = sub.add_parser("eval", help="score synthesized volumes against ground truth")
    _common(p)
    p.add_argument("--pred", required=True, help="directory written by `sample`")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--report", help="report path (default <pred>/report.json)")

    p = sub.add_parser("check", help="gradient, oracle and round-trip self-checks")
    _common(p)
    p.add_argument("--only", nargs="*", help="run checks whose names start with these prefixes")
    p.add_argument("--quick", action="store_true", help="fewer sampled coordinates for model gradients")
    p.add_argument("--report", help="write the JSON report here as well as to stdout")
    return ap


def _config(args, **extra):
    return load_config(args.config, seed=args.seed, **extra)


def cmd_phantom_gen(args) -> int:
    from ..phantom import make_dataset

    cfg = _config(args, n_train=args.n_train, n_test=args.n_test)
    out = args.out or os.path.dirname(os.path.abspath(cfg.manifest))
    m = make_dataset(out, cfg.seed, cfg.n_train, cfg.n_test, cfg.dims, cfg.num_regions, force=args.force)
    print(json.dumps({"manifest": os.path.join(out, "manifest.json"), "train": len(m["train"]),
                      "test": len(m["test"])}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _config(args, out_dir=args.out, manifest=args.manifest, epochs=args.epochs)
    os.makedirs(cfg.out_dir, exist_ok=True)
    save_config(cfg, os.path.join(cfg.out_dir, "config.json"))
    st = train(cfg, resume=args.resume)
    print(json.dumps({"out_dir": cfg.out_dir, "epochs": st.epoch, "steps": st.step}))
    return EXIT_OK


def cmd_sample(args) -> int:
    from .sample import sample_split

    cfg = _config(args, manifest=args.manifest)
    index = sample_split(args.checkpoint, cfg.manifest, args.out, cfg.seed, args.split, limit=args.limit)
    print(json.dumps({"out": args.out, "volumes": len(index["volumes"])}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import evaluate_dir

    cfg = _config(args, manifest=args.manifest)
    report_path = args.report or os.path.join(args.pred, "report.json")
    rep = evaluate_dir(args.pred, cfg.manifest, args.split, out_path=report_path)
    summary = {name: {m: sec["summary"][m]["mean"] for m in ("psnr", "ssim", "mae")} | {"n": sec["n"]}
               for name, sec in rep["tracers"].items()}
    print(json.dumps({"report": report_path, "missing": len(rep["missing"]), "tracers": summary}))
    if not any(sec["n"] for sec in rep["tracers"].values()):
        print("data error: no prediction could be evaluated", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_check(args) -> int:
    from .check import run_checks

    if args.config or args.seed is not None:
        _config(args)  # validated for uniformity; the suite itself is fixed
    rep = run_checks(args.only, quick=args.quick)
    text = json.dumps(rep, indent=1)
    if args.report:
        from ..volume import atomic_write_bytes

        atomic_write_bytes(args.report, text.encode("utf-8"))
    print(text)
    return EXIT_OK if rep["passed"] else EXIT_CHECK


COMMANDS = {"phantom-gen": cmd_phantom_gen, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "check": cmd_check}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LoadError, FormatError, FileNotFoundError, FileExistsError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLoss as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
