"""Noise schedule, forward noising, clean-image estimate and ancestral sampler.

Timesteps are 1-based at every public entry point (t in 1..T); the arrays
stored on :class:`Schedule` are 0-based, so the constants for step t live at
index t - 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError

SIGMA_KINDS = ("sqrt_beta", "posterior")


@dataclass(frozen=True, eq=False)
class Schedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    sigma_kind: str = "sqrt_beta"

    def index(self, t):
        """Validate 1-based ``t`` (int or int array) and return 0-based indices."""
        arr = np.asarray(t)
        if arr.size == 0 or not np.issubdtype(arr.dtype, np.integer):
            raise ContractError(f"timestep must be integer, got {t!r}")
        if arr.min() < 1 or arr.max() > self.T:
            raise ContractError(f"timestep {t!r} outside [1, {self.T}]")
        return arr - 1


def make_schedule(T: int, beta_1: float = 0.0005, beta_T: float = 0.0195,
                  sigma_kind: str = "sqrt_beta") -> Schedule:
    """Linear beta schedule from ``beta_1`` to ``beta_T`` inclusive.

    ``sigma_kind="sqrt_beta"`` gives sigma_t = sqrt(beta_t); ``"posterior"``
    gives sqrt(beta_t (1 - abar_{t-1}) / (1 - abar_t)), which is 0 at t = 1.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError("T", f"must be an integer >= 1, got {T!r}")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ConfigError("beta_1/beta_T", f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    if sigma_kind not in SIGMA_KINDS:
        raise ConfigError("sigma_kind", f"must be one of {SIGMA_KINDS}, got {sigma_kind!r}")
    beta = np.linspace(beta_1, beta_T, int(T), dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if sigma_kind == "sqrt_beta":
        sigma = np.sqrt(beta)
    else:
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma = np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return Schedule(int(T), beta, alpha, alpha_bar, sigma, sigma_kind)



def scaled_schedule(T: int, beta_1: float = 0.0005, beta_T: float = 0.0195, ref_steps: int = 1000,
                    sigma_kind: str = "sqrt_beta") -> Schedule:
    """Endpoints quoted for a ``ref_steps`` chain, rescaled by ref_steps / T.

    The summed noise, and so abar_T, stays close to the reference; with the
    default endpoints abar_T is about 4.5e-5 for any T, so x_T is nearly N(0, I).
    """
    k = ref_steps / T
    if beta_T * k >= 1.0:
        raise ConfigError("beta_ref_steps", f"beta_T {beta_T} scaled by {ref_steps}/{T} reaches 1; use a larger T")
    return make_schedule(T, beta_1 * k, beta_T * k, sigma_kind)


def _coef(values: np.ndarray, idx, ndim: int):
    """Per-step constant as a scalar, or as [N, 1, ...] for per-sample steps."""
    c = values[idx]
    if np.ndim(c) == 0:
        return float(c)
    return np.asarray(c).reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0, t, eps, sched: Schedule) -> T.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0, eps = T._t(x0), T._t(eps)
    if x0.shape != eps.shape:
        raise ShapeError(f"q_sample: x0 {x0.shape} and eps {eps.shape} differ")
    i = sched.index(t)
    ab = sched.alpha_bar
    return x0 * _coef(np.sqrt(ab), i, x0.ndim) + eps * _coef(np.sqrt(1.0 - ab), i, x0.ndim)


def estimate_x0(x_t, eps_hat, t, sched: Schedule) -> T.Tensor:
    """Clean-image estimate implied by a noise prediction; differentiable in eps_hat."""
    x_t, eps_hat = T._t(x_t), T._t(eps_hat)
    i = sched.index(t)
    ab = sched.alpha_bar
    return (x_t - eps_hat * _coef(np.sqrt(1.0 - ab), i, x_t.ndim)) / _coef(np.sqrt(ab), i, x_t.ndim)


def p_sample_step(x_t, eps_hat, t: int, z, sched: Schedule) -> T.Tensor:
    """One reverse step: (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t z.

    ``z`` may be None (treated as zero). At t = 1 it must be zero.
    """
    x_t, eps_hat = T._t(x_t), T._t(eps_hat)
    i = int(sched.index(t))
    mean = (x_t - eps_hat * float(sched.beta[i] / np.sqrt(1.0 - sched.alpha_bar[i]))) / float(
        np.sqrt(sched.alpha[i])
    )
    if z is None:
        return mean
    z = T._t(z)
    if t == 1:
        if np.any(z.data != 0):
            raise ContractError("p_sample_step: z must be zero at t = 1")
        return mean
    return mean + z * float(sched.sigma[i])


EpsFn = Callable[[np.ndarray, int], "np.ndarray | T.Tensor"]


def ancestral_sample(eps_fn: EpsFn, shape, sched: Schedule, rng: np.random.Generator) -> np.ndarray:
    """Run the reverse chain from x_T ~ N(0, I) down to x_0.

    ``eps_fn(x_t, t)`` is any noise predictor (the generator, or the analytic
    oracle). Draw order from ``rng``: x_T first, then one z per step t > 1.
    """
    dtype = T.default_dtype()
    x = rng.standard_normal(shape).astype(dtype)
    with T.no_grad():
        for t in range(sched.T, 0, -1):
            eps_hat = eps_fn(x, t)
            eps_hat = eps_hat.data if isinstance(eps_hat, T.Tensor) else np.asarray(eps_hat, dtype)
            z = rng.standard_normal(shape).astype(dtype) if t > 1 else None
            x = p_sample_step(x, eps_hat, t, z, sched).data
    return x


def sample(gen_params, cond, c, sched: Schedule, seed: int, cfg):
    """Synthesize one target volume per condition with the generator.

    ``cond`` is [Cc, *S] for one subject (returns a Volume) or [N, Cc, *S]
    (returns a list of Volumes). Intensities are mapped back to [0, 1].
    """
    from .nn import ConditionInfo, generator_forward
    from .volume import Volume, from_model_range

    cond = np.asarray(cond, dtype=np.float32)
    single = cond.ndim == cfg.spatial_dims + 1
    if single:
        cond = cond[None]
    n = cond.shape[0]
    labels = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()
    cond_t = T.Tensor(cond)

    def eps_fn(x, t):
        info = ConditionInfo(t=np.full(n, t, dtype=np.int64), c=labels)
        return generator_forward(gen_params, T.Tensor(x), cond_t, info, cfg)

    shape = (n, 1) + cond.shape[2:]
    x0 = ancestral_sample(eps_fn, shape, sched, np.random.default_rng(seed))
    vols = [
        Volume(from_model_range(x0[i]), meta={"value_range": "unit", "seed": int(seed),
                                              "kind": "synthetic", "tracer": int(labels[i])})
        for i in range(n)
    ]
    return vols[0] if single else vols
