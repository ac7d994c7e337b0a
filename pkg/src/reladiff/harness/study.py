"""Desk-scale training study and ablation sweep on synthetic phantoms."""

from __future__ import annotations

import json
import os
import time

import numpy as np

from ..metrics import mae
from ..phantom import TRACERS, fit_region_lut, load_split, make_dataset, predict_region_lut
from ..volume import atomic_write_bytes
from .config import RunConfig
from .evaluate import evaluate_dir
from .sample import sample_split
from .train import NonFiniteLoss, checkpoint_path, load_checkpoint, read_log, train


ABLATIONS = {
    "w/oRA": {"use_relativistic": False},
    "w/oGP": {"use_gp": False},
    "w/oT1w": {"use_t1": False},
    "w/oT2F": {"use_t2f": False},
}


def ensure_dataset(cfg: RunConfig) -> str:
    """Generate the phantom set named by ``cfg.manifest`` unless it already exists."""
    if not os.path.exists(cfg.manifest):
        make_dataset(os.path.dirname(os.path.abspath(cfg.manifest)), cfg.seed, cfg.n_train, cfg.n_test,
                     dims=cfg.dims, num_regions=cfg.num_regions)
    return cfg.manifest


def noise_loss_drop(rows, steps: int = 200, window: int = 10) -> float:
    """Relative drop of the trailing ``window``-step mean of l_noise at ``steps``
    against the mean over the first ``window`` steps."""
    vals = np.array([r["l_noise"] for r in rows[:steps]], dtype=np.float64)
    if len(vals) < steps:
        raise ValueError(f"need {steps} logged steps, have {len(vals)}")
    first, last = vals[:window].mean(), vals[-window:].mean()
    return float(1.0 - last / first)


def lut_baseline(manifest_path: str, num_regions: int) -> dict:
    """Held-out MAE per tracer of the per-region mean lookup fitted on the train split."""
    lut = fit_region_lut(load_split(manifest_path, "train"), num_regions)
    test = load_split(manifest_path, "test")
    return {name: float(np.mean([mae(predict_region_lut(lut, s, k), s.target(k)) for s in test]))
            for k, name in enumerate(TRACERS)}


def desk_study(cfg: RunConfig, min_gain: float = 0.10, min_drop: float = 0.20) -> dict:
    """Train with ``cfg``, sample the test split, and score against the lookup baseline."""
    t0 = time.perf_counter()
    ensure_dataset(cfg)
    out = {"config": cfg.to_dict(), "nan_free": True}
    try:
        train(cfg)
    except NonFiniteLoss as exc:
        out.update(nan_free=False, error=str(exc))
        return out
    out["train_seconds"] = round(time.perf_counter() - t0, 1)
    rows = read_log(cfg.out_dir)
    out["noise_drop_200"] = noise_loss_drop(rows)

    pred_dir = os.path.join(cfg.out_dir, "samples")
    sample_split(checkpoint_path(cfg.out_dir, cfg.epochs), cfg.manifest, pred_dir, seed=cfg.seed)
    report = evaluate_dir(pred_dir, cfg.manifest, out_path=os.path.join(pred_dir, "report.json"))
    base = lut_baseline(cfg.manifest, cfg.num_regions)
    out["tracers"] = {}
    for name in TRACERS:
        model = report["tracers"][name]["summary"]["mae"]["mean"]
        gain = 1.0 - model / base[name]
        out["tracers"][name] = {"model_mae": model, "baseline_mae": base[name], "gain": gain,
                                "psnr": report["tracers"][name]["summary"]["psnr"]["mean"],
                                "ssim": report["tracers"][name]["summary"]["ssim"]["mean"]}
    out["seconds"] = round(time.perf_counter() - t0, 1)
    out["passed"] = {
        "no_nan": out["nan_free"],
        "noise_drop": out["noise_drop_200"] >= min_drop,
        "beats_baseline": all(v["gain"] >= min_gain for v in out["tracers"].values()),
    }
    atomic_write_bytes(os.path.join(cfg.out_dir, "study.json"), json.dumps(out, indent=1).encode("utf-8"))
    return out


def ablation_study(cfg: RunConfig, epochs: int = 5) -> dict:
    """Train each ablation variant for ``epochs`` and summarise its logged loss columns."""
    ensure_dataset(cfg)
    results = {}
    for name, flags in ABLATIONS.items():
        sub = os.path.join(cfg.out_dir, name.replace("/", "_"))
        vcfg = RunConfig.from_dict({**cfg.to_dict(), **flags, "epochs": epochs, "out_dir": sub})
        rec = {"flags": flags, "in_channels": vcfg.generator_config(len(TRACERS)).in_channels}
        try:
            train(vcfg)
            rows = read_log(sub)
            rec["completed"] = True
            rec["steps"] = len(rows)
            rec["l_gp_max"] = max(abs(r["l_gp"]) for r in rows)
            rec["columns"] = {k: float(np.mean([r[k] for r in rows]))
                              for k in ("l_noise", "l_image", "l_rel_g", "l_rel_d", "l_gp")}
            _, st = load_checkpoint(checkpoint_path(sub, epochs))
            rec["saved_in_channels"] = int(st.gen["stem.w"].shape[1])
        except Exception as exc:  # a crashing variant is reported, not raised
            rec.update(completed=False, error=f"{type(exc).__name__}: {exc}")
        results[name] = rec
    return results

