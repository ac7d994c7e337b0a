"""Synthesize every (test subject, tracer) target from a trained checkpoint."""

from __future__ import annotations

import json
import os

import numpy as np

from .. import diffusion as D
from ..errors import LoadError
from ..phantom import TRACERS, load_manifest, read_sample
from ..volume import atomic_write_bytes, to_model_range, write_volume
from .train import load_checkpoint

INDEX_NAME = "index.json"
INDEX_VERSION = 1


def sample_split(checkpoint: str, manifest_path: str, out_dir: str, seed: int, split: str = "test",
                 batch: int | None = None, limit: int | None = None) -> dict:
    """Write ``<out_dir>/<subject>/<TRACER>.rdvf`` plus an index; return the index.

    Chains are run ``batch`` at a time; chunk k uses seed ``seed + k``.
    """
    cfg, st = load_checkpoint(checkpoint)
    manifest, root = load_manifest(manifest_path)
    if tuple(manifest["dims"]) != tuple(cfg.dims):
        raise LoadError(f"checkpoint dims {list(cfg.dims)} do not match manifest dims {manifest['dims']}")
    entries = manifest[split][:limit]
    keep = [{"t1": 0, "t2f": 1}[n] for n in cfg.cond_channels]
    jobs = []
    for e in entries:
        s = read_sample(os.path.join(root, e["path"]))
        cond = to_model_range(s.condition()[keep])
        jobs.extend((e["path"], k, cond) for k in range(len(TRACERS)))

    gcfg = cfg.generator_config(len(TRACERS))
    sched = cfg.schedule()
    batch = batch or cfg.sample_batch
    index = {"version": INDEX_VERSION, "checkpoint": os.path.abspath(checkpoint),
             "manifest": os.path.abspath(manifest_path), "split": split, "seed": int(seed),
             "value_range": [0.0, 1.0], "volumes": []}
    for chunk, start in enumerate(range(0, len(jobs), batch)):
        part = jobs[start:start + batch]
        cond = np.stack([j[2] for j in part])
        c = np.array([j[1] for j in part])
        vols = D.sample(st.gen, cond, c, sched, seed + chunk, gcfg)
        for (subject, k, _), v in zip(part, vols):
            rel = os.path.join(subject, f"{TRACERS[k]}.rdvf")
            v.meta.update(subject=subject, tracer_name=TRACERS[k])
            write_volume(os.path.join(out_dir, rel), v)
            index["volumes"].append({"subject": subject, "tracer": TRACERS[k], "path": rel})
    os.makedirs(out_dir, exist_ok=True)
    atomic_write_bytes(os.path.join(out_dir, INDEX_NAME), json.dumps(index, indent=1).encode("utf-8"))
    return index
