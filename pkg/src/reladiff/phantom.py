"""Procedural paired phantoms: two structural condition images, one target per
tracer, and the region label mask they were all drawn from.

Anatomy is an ellipse (ellipsoid in 3D) split into K regions by quantile
thresholds of a smoothed random field, so region k is always the k-th band of
the field and the lookup tables mean the same thing for every subject.
Each tracer has its own intensity table and a preferred region; the tracer's
hotspots sit at the deepest interior point of each connected piece of that
region (up to three pieces). Their placement is therefore readable from the
condition images, while a per-region average cannot express them.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, UnsupportedVersionError
from .volume import Volume, atomic_write_bytes, read_volume, write_volume

TRACERS = ("TAU", "PBR", "PIB")

# index 0 is background
LUT_T1 = np.array([0.0, 0.85, 0.55, 0.70, 0.40, 0.95, 0.62, 0.30, 0.78])
LUT_T2F = np.array([0.0, 0.35, 0.80, 0.50, 0.65, 0.25, 0.90, 0.45, 0.58])
LUT_TRACER = np.array([
    [0.0, 0.30, 0.45, 0.60, 0.35, 0.50, 0.40, 0.55, 0.25],
    [0.0, 0.55, 0.30, 0.40, 0.65, 0.35, 0.50, 0.28, 0.45],
    [0.0, 0.40, 0.60, 0.30, 0.50, 0.25, 0.35, 0.65, 0.45],
])

COND_NOISE = 0.02
TARGET_NOISE = 0.01
HOTSPOT_AMPLITUDE = 0.3
TARGET_BLUR = 0.55
MAX_HOTSPOTS = 3
MANIFEST_VERSION = 1


@dataclass(eq=False)
class PhantomSample:
    cond_t1: Volume
    cond_t2f: Volume
    targets: list
    labels: Volume
    tracer_count: int = len(TRACERS)
    seed: int = 0

    def condition(self) -> np.ndarray:
        """[2, *dims] stack of the T1-like and T2F-like channels."""
        return np.concatenate([self.cond_t1.data, self.cond_t2f.data], axis=0)

    def target(self, tracer: int) -> np.ndarray:
        return self.targets[tracer].data


def preferred_region(tracer: int, num_regions: int) -> int:
    return 1 + tracer % num_regions


def _check_dims(dims, num_regions):
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3):
        raise ConfigError("dims", f"need 2 or 3 extents, got {dims}")
    if min(dims) < 16:
        raise ConfigError("dims", f"every extent must be >= 16, got {dims}")
    if not 2 <= num_regions <= 8:
        raise ConfigError("num_regions", f"must be in [2, 8], got {num_regions}")
    return dims


def brain_mask(rng: np.random.Generator, dims) -> np.ndarray:
    semi = rng.uniform(0.35, 0.45, size=len(dims)) * np.asarray(dims)
    grids = np.meshgrid(*[np.arange(n) + 0.5 - n / 2 for n in dims], indexing="ij")
    r2 = sum((g / a) ** 2 for g, a in zip(grids, semi))
    return r2 <= 1.0


def region_labels(rng: np.random.Generator, mask: np.ndarray, num_regions: int) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(mask.shape), sigma=min(mask.shape) / 8)
    inside = field[mask]
    edges = np.quantile(inside, np.linspace(0, 1, num_regions + 1)[1:-1])
    labels = np.zeros(mask.shape, dtype=np.int64)
    labels[mask] = 1 + np.searchsorted(edges, inside, side="right")
    return labels


def hotspot_map(labels: np.ndarray, region: int, sigma: float) -> np.ndarray:
    """Sum of unit Gaussian blobs at the deepest point of each piece of ``region``."""
    pieces, n = ndimage.label(labels == region)
    out = np.zeros(labels.shape)
    if n == 0:
        return out
    depth = ndimage.distance_transform_edt(labels == region)
    sizes = ndimage.sum_labels(np.ones_like(depth), pieces, index=np.arange(1, n + 1))
    order = np.argsort(-sizes, kind="stable")[:MAX_HOTSPOTS]
    grids = np.meshgrid(*[np.arange(s) for s in labels.shape], indexing="ij")
    for k in order:
        d = np.where(pieces == k + 1, depth, -1.0)
        center = np.unravel_index(int(np.argmax(d)), d.shape)
        r2 = sum((g - c) ** 2 for g, c in zip(grids, center))
        out += np.exp(-r2 / (2 * sigma**2))
    return out


def gen_phantom(seed: int, dims=(32, 32), num_regions: int = 5) -> PhantomSample:
    """Deterministic paired sample for ``seed``. Intensities lie in [0, 1]."""
    dims = _check_dims(dims, num_regions)
    rng = np.random.default_rng(seed)
    mask = brain_mask(rng, dims)
    labels = region_labels(rng, mask, num_regions)
    scale = min(dims) / 32.0

    def noisy(base, level):
        return np.clip(base + level * rng.standard_normal(dims), 0.0, 1.0)

    t1 = noisy(LUT_T1[labels], COND_NOISE)
    t2f = noisy(LUT_T2F[labels], COND_NOISE)
    targets = []
    for tau in range(len(TRACERS)):
        base = LUT_TRACER[tau][labels]
        base = base + HOTSPOT_AMPLITUDE * hotspot_map(
            labels, preferred_region(tau, num_regions), 1.5 * scale) * mask
        base = ndimage.gaussian_filter(base, sigma=TARGET_BLUR * scale)
        targets.append(noisy(base, TARGET_NOISE))

    def vol(arr, kind, **extra):
        return Volume(arr[None], meta={"value_range": "unit", "seed": int(seed), "kind": kind, **extra})

    return PhantomSample(
        cond_t1=vol(t1, "t1"),
        cond_t2f=vol(t2f, "t2f"),
        targets=[vol(x, "target", tracer=TRACERS[i]) for i, x in enumerate(targets)],
        labels=vol(labels.astype(np.float32), "labels", value_range="labels"),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# on-disk dataset

_FILES = ("t1.rdvf", "t2f.rdvf", "labels.rdvf")


def write_sample(directory, s: PhantomSample):
    os.makedirs(directory, exist_ok=True)
    write_volume(os.path.join(directory, "t1.rdvf"), s.cond_t1)
    write_volume(os.path.join(directory, "t2f.rdvf"), s.cond_t2f)
    write_volume(os.path.join(directory, "labels.rdvf"), s.labels)
    for i, v in enumerate(s.targets):
        write_volume(os.path.join(directory, f"target_{TRACERS[i]}.rdvf"), v)


def read_sample(directory) -> PhantomSample:
    t1, t2f, labels = (read_volume(os.path.join(directory, f)) for f in _FILES)
    targets = [read_volume(os.path.join(directory, f"target_{n}.rdvf")) for n in TRACERS]
    return PhantomSample(t1, t2f, targets, labels, seed=int(t1.meta.get("seed", 0)))


def split_seeds(top_seed: int, n_train: int, n_test: int):
    rng = np.random.default_rng(top_seed)
    seeds = rng.choice(2**31 - 1, size=n_train + n_test, replace=False)
    return [int(s) for s in seeds[:n_train]], [int(s) for s in seeds[n_train:]]


def make_dataset(out_dir, seed: int, n_train: int, n_test: int, dims=(32, 32),
                 num_regions: int = 5, force: bool = False) -> dict:
    """Write train/test phantoms under ``out_dir`` plus ``manifest.json``.

    Refuses a non-empty ``out_dir`` unless ``force``. Returns the manifest.
    """
    if n_train < 1 or n_test < 1:
        raise ConfigError("n_train/n_test", f"both must be >= 1, got {n_train}, {n_test}")
    dims = _check_dims(dims, num_regions)
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"{out_dir} is not empty (use force to overwrite)")
    os.makedirs(out_dir, exist_ok=True)
    train, test = split_seeds(seed, n_train, n_test)
    manifest = {
        "version": MANIFEST_VERSION,
        "top_seed": int(seed),
        "dims": list(dims),
        "num_regions": int(num_regions),
        "tracers": list(TRACERS),
        "train": [],
        "test": [],
    }
    for split, seeds in (("train", train), ("test", test)):
        for i, s in enumerate(seeds):
            rel = os.path.join(split, f"{i:05d}")
            write_sample(os.path.join(out_dir, rel), gen_phantom(s, dims, num_regions))
            manifest[split].append({"path": rel, "seed": s})
    atomic_write_bytes(os.path.join(out_dir, "manifest.json"),
                       json.dumps(manifest, indent=1).encode("utf-8"))
    return manifest


def load_manifest(path) -> tuple[dict, str]:
    """Return (manifest, root directory the entry paths are relative to)."""
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise UnsupportedVersionError(f"unsupported manifest version {manifest.get('version')}", 0)
    return manifest, os.path.dirname(os.path.abspath(path))


def load_split(manifest_path, split: str) -> list[PhantomSample]:
    manifest, root = load_manifest(manifest_path)
    return [read_sample(os.path.join(root, e["path"])) for e in manifest[split]]


# ---------------------------------------------------------------------------
# per-region mean baseline


def fit_region_lut(samples, num_regions: int) -> np.ndarray:
    """[tracers, K+1] table of mean target intensity per region label."""
    sums = np.zeros((len(TRACERS), num_regions + 1))
    counts = np.zeros(num_regions + 1)
    for s in samples:
        lab = s.labels.data[0].astype(np.int64).ravel()
        counts += np.bincount(lab, minlength=num_regions + 1)
        for tau in range(len(TRACERS)):
            sums[tau] += np.bincount(lab, weights=s.target(tau)[0].ravel().astype(np.float64),
                                     minlength=num_regions + 1)
    return sums / np.maximum(counts, 1)


def predict_region_lut(lut: np.ndarray, s: PhantomSample, tracer: int) -> np.ndarray:
    return lut[tracer][s.labels.data[0].astype(np.int64)][None].astype(np.float32)
