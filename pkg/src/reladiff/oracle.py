"""Closed-form references used to verify the diffusion maths and the tape.

* :func:`oracle_eps` is the Bayes-optimal noise predictor when the data are
  isotropic Gaussian, x0 ~ N(mu, sigma2 I). Plugging it into the sampler
  must reproduce the data distribution without any training.
* :func:`finite_diff_check` compares tape gradients (float32, the production
  path) with central differences evaluated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .diffusion import Schedule, ancestral_sample
from .errors import ConfigError


class NonFiniteLossError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GaussianTarget:
    mu: float = 0.0
    sigma2: float = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.sigma2) < 0):
            raise ConfigError("sigma2", f"must be >= 0, got {self.sigma2}")


def posterior_mean(x_t, t, sched: Schedule, target: GaussianTarget) -> np.ndarray:
    """E[x0 | x_t] under the Gaussian prior."""
    x = np.asarray(getattr(x_t, "data", x_t), dtype=np.float64)
    ab = sched.alpha_bar[sched.index(t)]
    s2, mu = np.asarray(target.sigma2, dtype=np.float64), np.asarray(target.mu, dtype=np.float64)
    return (np.sqrt(ab) * s2 * x + (1.0 - ab) * mu) / (ab * s2 + 1.0 - ab)


def oracle_eps(x_t, t, sched: Schedule, target: GaussianTarget):
    """Optimal noise prediction (x_t - sqrt(abar) E[x0|x_t]) / sqrt(1 - abar).

    Returns the same kind of object it was given (Tensor or ndarray).
    """
    x = np.asarray(getattr(x_t, "data", x_t), dtype=np.float64)
    ab = sched.alpha_bar[sched.index(t)]
    eps = (x - np.sqrt(ab) * posterior_mean(x, t, sched, target)) / np.sqrt(1.0 - ab)
    if isinstance(x_t, T.Tensor):
        return T.Tensor(eps)
    return eps.astype(getattr(x_t, "dtype", np.float64))


def oracle_sample(target: GaussianTarget, sched: Schedule, n_chains: int, voxel_shape=(8, 8),
                  seed: int = 0, start: str = "noise") -> np.ndarray:
    """Run the ancestral sampler with :func:`oracle_eps` as the predictor.

    Each chain is one image of ``voxel_shape`` i.i.d. voxels. ``start="noise"``
    begins at N(0, I) as inference does; ``start="marginal"`` begins at the
    exact forward marginal q(x_T), isolating the reverse-step arithmetic.
    """
    shape = (n_chains,) + tuple(voxel_shape)
    rng = np.random.default_rng(seed)
    eps_fn = lambda x, t: oracle_eps(x, t, sched, target)  # noqa: E731
    if start == "noise":
        return ancestral_sample(eps_fn, shape, sched, rng)
    if start != "marginal":
        raise ValueError(f"unknown start {start!r}")
    ab = sched.alpha_bar[-1]
    sd = np.sqrt(ab * target.sigma2 + 1.0 - ab)
    mean = np.sqrt(ab) * target.mu

    class _Shifted:
        # ancestral_sample draws x_T first; rescale that draw to q(x_T)
        def __init__(self, inner):
            self.inner, self.first = inner, True

        def standard_normal(self, size):
            z = self.inner.standard_normal(size)
            if self.first:
                self.first = False
                return mean + sd * z
            return z

    return ancestral_sample(eps_fn, shape, sched, _Shifted(rng))


def linear_gaussian_moments(target: GaussianTarget, sched: Schedule, mean0: float = 0.0,
                            var0: float = 1.0) -> tuple[float, float]:
    """Exact mean and variance of the oracle sampler's output.

    With the oracle predictor every reverse step is affine in x_t, so moments
    propagate in closed form from x_T ~ N(mean0, var0).
    """
    m, v = mean0, var0
    mu, s2 = float(target.mu), float(target.sigma2)
    for t in range(sched.T, 0, -1):
        i = t - 1
        ab, a, b = sched.alpha_bar[i], sched.alpha[i], sched.beta[i]
        den = ab * s2 + 1.0 - ab
        gain = np.sqrt(ab) * s2 / den
        offset = (1.0 - ab) * mu / den
        e_x = (1.0 - np.sqrt(ab) * gain) / np.sqrt(1.0 - ab)
        e_0 = -np.sqrt(ab) * offset / np.sqrt(1.0 - ab)
        k = b / np.sqrt(1.0 - ab)
        A = (1.0 - k * e_x) / np.sqrt(a)
        B = -k * e_0 / np.sqrt(a)
        m = A * m + B
        v = A * A * v + (sched.sigma[i] ** 2 if t > 1 else 0.0)
    return float(m), float(v)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FDReport:
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    worst: tuple
    rtol: float
    atol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.rtol


def _pick_coords(params: dict, max_coords, rng):
    total = sum(np.size(v) for v in params.values())
    out = []
    for name, v in params.items():
        size = np.size(v)
        if max_coords is None or total <= max_coords:
            flat = np.arange(size)
        else:
            k = min(size, max(1, int(round(max_coords * size / total))))
            flat = np.sort(rng.choice(size, size=k, replace=False))
        out.extend((name, int(i)) for i in flat)
    return out


def finite_diff_check(loss_fn, params: dict, step: float = 1e-3, rtol: float = 1e-3,
                      atol: float = 1e-5, max_coords: int | None = None, seed: int = 0) -> FDReport:
    """Compare tape gradients of ``loss_fn`` with central differences.

    ``loss_fn(tensors)`` takes a dict name -> Tensor and returns a scalar
    Tensor. ``params`` maps names to arrays. Analytic gradients come from one
    float32 backward pass; each checked coordinate is perturbed by +-``step``
    and the loss re-evaluated in float64. A coordinate passes when
    |analytic - numeric| <= max(rtol |numeric|, atol); the reported relative
    error is |analytic - numeric| / max(|numeric|, atol / rtol).
    """
    arrays = {k: np.asarray(v, dtype=np.float32) for k, v in params.items()}
    leaves = {k: T.Tensor.parameter(v) for k, v in arrays.items()}
    loss = loss_fn(leaves)
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteLossError(f"loss is not finite: {loss.data}")
    gmap = T.backward(loss)
    analytic = {k: (gmap[v].data if v in gmap else np.zeros_like(v.data)) for k, v in leaves.items()}

    coords = _pick_coords(arrays, max_coords, np.random.default_rng(seed))
    base64 = {k: v.astype(np.float64) for k, v in arrays.items()}
    floor = atol / rtol
    worst, max_rel, max_abs = None, 0.0, 0.0
    with T.precision(np.float64):
        for name, flat in coords:
            vals = []
            for sign in (1.0, -1.0):
                p = {k: v for k, v in base64.items()}
                arr = base64[name].copy()
                arr.reshape(-1)[flat] += sign * step
                p[name] = arr
                val = loss_fn({k: T.Tensor(v) for k, v in p.items()}).data
                if not np.all(np.isfinite(val)):
                    raise NonFiniteLossError(f"loss not finite when perturbing {name}[{flat}]")
                vals.append(float(np.asarray(val).reshape(-1)[0]))
            numeric = (vals[0] - vals[1]) / (2 * step)
            a = float(analytic[name].reshape(-1)[flat])
            err = abs(a - numeric)
            rel = err / max(abs(numeric), floor)
            max_abs = max(max_abs, err)
            if rel > max_rel or worst is None:
                max_rel, worst = max(max_rel, rel), (name, flat)
    return FDReport(max_rel, max_abs, len(coords), worst, rtol, atol)
