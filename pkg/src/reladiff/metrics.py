"""Image-quality metrics and region-level evaluation.

All metrics are computed in float64 on inputs in the [0, 1] range. SSIM uses
an 11-tap Gaussian window (sigma 1.5) applied separably along every spatial
axis, with K1 = 0.01 and K2 = 0.03; only windows that fit entirely inside the
image are scored ("valid" border policy). Masked SSIM averages the SSIM map
over windows whose centre voxel carries the region label, so voxels within
``window // 2`` of the border never contribute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, ShapeError


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    mae: float
    per_region: dict = field(default_factory=dict)
    masked_ssim: dict = field(default_factory=dict)


def _arr(v) -> np.ndarray:
    data = getattr(v, "data", v)
    return np.asarray(data, dtype=np.float64)


def _pair(a, b, what):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def mae(a, b) -> float:
    a, b = _pair(a, b, "mae")
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, data_range: float = 1.0) -> float:
    """10 log10(range^2 / MSE); ``inf`` for identical inputs."""
    a, b = _pair(a, b, "psnr")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _spatial(x: np.ndarray) -> np.ndarray:
    """Drop a leading channel axis of extent 1, as stored in volumes."""
    if x.ndim in (3, 4) and x.shape[0] == 1:
        return x[0]
    return x


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    w = np.exp(-(r**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(x, w):
    r = len(w) // 2
    for ax in range(x.ndim):
        x = ndimage.correlate1d(x, w, axis=ax, mode="constant")
    return x[(slice(r, -r if r else None),) * x.ndim]


def ssim_map(a, b, window: int = 11, sigma: float = 1.5, K1: float = 0.01, K2: float = 0.03,
             data_range: float = 1.0) -> np.ndarray:
    """Local SSIM for every window that fits inside the image."""
    a, b = _pair(a, b, "ssim")
    a, b = _spatial(a), _spatial(b)
    if min(a.shape) < window:
        raise ContractError(f"ssim: image {a.shape} smaller than the {window}-wide window")
    w = gaussian_window(window, sigma)
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    s_aa = _filter_valid(a * a, w) - mu_a**2
    s_bb = _filter_valid(b * b, w) - mu_b**2
    s_ab = _filter_valid(a * b, w) - mu_a * mu_b
    c1, c2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return num / den


def ssim(a, b, window: int = 11, sigma: float = 1.5, K1: float = 0.01, K2: float = 0.03,
         data_range: float = 1.0) -> float:
    return float(np.mean(ssim_map(a, b, window, sigma, K1, K2, data_range)))


def region_eval(pred, truth, labels, regions=None, window: int = 11) -> dict:
    """Per-region mean intensities, their absolute error and masked SSIM.

    ``regions`` defaults to every non-zero label present. A requested region
    with no voxels is reported with ``None`` means rather than raising.
    """
    p, t = _pair(pred, truth, "region_eval")
    p, t = _spatial(p), _spatial(t)
    lab = _spatial(_arr(labels)).astype(np.int64)
    if lab.shape != p.shape:
        raise ShapeError(f"region_eval: labels {lab.shape} do not match images {p.shape}")
    if regions is None:
        regions = [int(r) for r in np.unique(lab) if r != 0]
    smap = ssim_map(p, t, window=window) if min(p.shape) >= window else None
    r = window // 2
    inner = lab[(slice(r, -r if r else None),) * lab.ndim]
    out = {}
    for rid in regions:
        mask = lab == rid
        entry = {"mean_pred": None, "mean_true": None, "abs_err": None, "masked_ssim": None}
        if mask.any():
            mp, mt = float(np.mean(p[mask])), float(np.mean(t[mask]))
            entry.update(mean_pred=mp, mean_true=mt, abs_err=abs(mp - mt))
            if smap is not None:
                centres = inner == rid
                if centres.any():
                    entry["masked_ssim"] = float(np.mean(smap[centres]))
        out[int(rid)] = entry
    return out


def evaluate(pred, truth, labels=None) -> MetricsReport:
    regions = region_eval(pred, truth, labels) if labels is not None else {}
    return MetricsReport(
        psnr=psnr(pred, truth),
        ssim=ssim(pred, truth),
        mae=mae(pred, truth),
        per_region={k: {kk: v[kk] for kk in ("mean_pred", "mean_true", "abs_err")}
                    for k, v in regions.items()},
        masked_ssim={k: v["masked_ssim"] for k, v in regions.items()},
    )
