"""Score synthesized volumes against phantom ground truth, per tracer."""

from __future__ import annotations

import json
import logging
import math
import os

import numpy as np

from .. import metrics as M
from ..errors import FormatError
from ..phantom import TRACERS, load_manifest, read_sample
from ..volume import Volume, atomic_write_bytes, read_volume, write_volume

log = logging.getLogger(__name__)

REPORT_VERSION = 1


def _num(x):
    """JSON-safe float: infinities and NaN become strings."""
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (float, np.floating)):
        return _num(d)
    return d


def _summary(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": None, "std": None}
    if np.isinf(v).any():
        # a perfect reconstruction makes the mean infinite; std is undefined
        return {"mean": _num(np.mean(v)), "std": None}
    return {"mean": _num(v.mean()), "std": _num(v.std())}


def evaluate_dir(pred_dir: str, manifest_path: str, split: str = "test", diff_dir: str | None = None,
                 out_path: str | None = None) -> dict:
    """Metrics report for ``pred_dir`` laid out as ``<subject>/<TRACER>.rdvf``.

    Missing or unreadable predictions are listed under ``missing`` and the
    report covers whatever was found. Absolute difference maps go to
    ``diff_dir`` (default ``<pred_dir>/diff``).
    """
    manifest, root = load_manifest(manifest_path)
    diff_dir = diff_dir or os.path.join(pred_dir, "diff")
    per_tracer = {name: {"subjects": [], "regions": {}} for name in TRACERS}
    missing, warnings = [], []
    for e in manifest[split]:
        truth = read_sample(os.path.join(root, e["path"]))
        for k, name in enumerate(TRACERS):
            rel = os.path.join(e["path"], f"{name}.rdvf")
            try:
                pred = read_volume(os.path.join(pred_dir, rel))
            except (OSError, FormatError) as exc:
                missing.append({"subject": e["path"], "tracer": name, "reason": str(exc)})
                continue
            ref = truth.targets[k]
            if pred.data.shape != ref.data.shape:
                missing.append({"subject": e["path"], "tracer": name,
                                "reason": f"shape {pred.data.shape} != {ref.data.shape}"})
                continue
            rep = M.evaluate(pred.data, ref.data, truth.labels.data)
            per_region = {str(rid): {**r, "masked_ssim": rep.masked_ssim.get(rid)}
                          for rid, r in rep.per_region.items()}
            per_tracer[name]["subjects"].append({"id": e["path"], "psnr": rep.psnr, "ssim": rep.ssim,
                                                 "mae": rep.mae, "per_region": per_region})
            for rid, r in per_region.items():
                acc = per_tracer[name]["regions"].setdefault(rid, {"abs_err": [], "masked_ssim": []})
                for key in ("abs_err", "masked_ssim"):
                    if r[key] is not None:
                        acc[key].append(r[key])
            diff = np.abs(pred.data - ref.data).astype(np.float32)
            write_volume(os.path.join(diff_dir, rel),
                         Volume(diff, {"kind": "abs_difference", "subject": e["path"], "tracer": name}))

    if missing:
        warnings.append(f"{len(missing)} prediction(s) missing or unreadable; report is partial")
        log.warning(warnings[-1])
    report = {"version": REPORT_VERSION, "split": split, "pred_dir": os.path.abspath(pred_dir),
              "missing": missing, "warnings": warnings, "tracers": {}}
    for name, acc in per_tracer.items():
        subs = acc["subjects"]
        report["tracers"][name] = {
            "n": len(subs),
            "summary": {m: _summary([v[m] for v in subs]) for m in ("psnr", "ssim", "mae")},
            "regions": {rid: {k: _summary(vals) for k, vals in r.items()}
                        for rid, r in sorted(acc["regions"].items(), key=lambda kv: int(kv[0]))},
            "per_volume": [_jsonable(v) for v in subs],
        }
    if out_path:
        atomic_write_bytes(out_path, json.dumps(report, indent=1).encode("utf-8"))
    return report
