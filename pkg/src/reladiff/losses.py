"""Training losses and their combination into per-player objectives.

Role assignment for the relativistic pair: the discriminator minimises
softplus(D(fake) - D(real)) and the generator minimises
softplus(D(real) - D(fake)), both averaged over positionally paired batch
elements. softplus(u) = log(1 + e^u) = -f(-u) with f(y) = -log(1 + e^-y).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import CapabilityError, ConfigError, ContractError, ShapeError


@dataclass
class LossWeights:
    lambda_adv: float = 0.1
    use_relativistic: bool = True
    use_gp: bool = True
    gp_weight: float = 1.0

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ConfigError("lambda_adv", f"must be >= 0, got {self.lambda_adv}")
        if self.gp_weight < 0:
            raise ConfigError("gp_weight", f"must be >= 0, got {self.gp_weight}")


@dataclass
class LossReport:
    """Per-step losses. Fields hold tensors during the step; see :meth:`to_record`."""

    l_noise: object
    l_image: object
    l_rel_g: object
    l_rel_d: object
    l_gp: object
    total_g: object
    total_d: object

    def to_record(self) -> dict:
        return {f.name: _scalar(getattr(self, f.name)) for f in fields(self)}


def _scalar(v) -> float:
    return float(v.item()) if isinstance(v, T.Tensor) else float(v)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def noise_loss(eps, eps_hat) -> T.Tensor:
    """Mean squared error over every element of the batch."""
    eps, eps_hat = T._t(eps), T._t(eps_hat)
    _same_shape(eps, eps_hat, "noise_loss")
    d = eps_hat - eps
    return T.mean(d * d)


def image_loss(x0, x0_hat) -> T.Tensor:
    """Mean absolute error between the clean image and its estimate."""
    x0, x0_hat = T._t(x0), T._t(x0_hat)
    _same_shape(x0, x0_hat, "image_loss")
    return T.mean(T.absolute(x0_hat - x0))


def _paired(d_real, d_fake):
    d_real, d_fake = T._t(d_real), T._t(d_fake)
    _same_shape(d_real, d_fake, "adversarial loss")
    if d_real.size == 0:
        raise ContractError("adversarial loss needs a non-empty batch")
    return d_real, d_fake


def rel_adv_losses(d_real, d_fake) -> tuple[T.Tensor, T.Tensor]:
    """(l_rel_g, l_rel_d) for paired realism scores."""
    d_real, d_fake = _paired(d_real, d_fake)
    l_g = T.mean(T.softplus(d_real - d_fake))
    l_d = T.mean(T.softplus(d_fake - d_real))
    return l_g, l_d


def standard_adv_losses(d_real, d_fake) -> tuple[T.Tensor, T.Tensor]:
    """Non-saturating pair used when the relativistic comparison is switched off."""
    d_real, d_fake = _paired(d_real, d_fake)
    l_g = T.mean(T.softplus(-d_fake))
    l_d = T.mean(T.softplus(-d_real)) + T.mean(T.softplus(d_fake))
    return l_g, l_d


def adversarial_losses(d_real, d_fake, weights: LossWeights):
    if weights.use_relativistic:
        return rel_adv_losses(d_real, d_fake)
    return standard_adv_losses(d_real, d_fake)


def gradient_penalty(d_params, x_real, x_fake, d_forward) -> T.Tensor:
    """Zero-centred penalty on both real and generated inputs.

    mean_i ||grad_x D(real_i)||^2 + mean_i ||grad_x D(fake_i)||^2, differentiable
    in ``d_params``. ``d_forward(params, x)`` returns one score per element.
    Both inputs are detached from whatever produced them.
    """
    if not T.is_recording():
        raise CapabilityError("gradient_penalty needs a recording tape (called under no_grad)")
    total = None
    for x in (x_real, x_fake):
        x = T.Tensor(T._t(x).data).requires_grad_()
        scores = d_forward(d_params, x)
        (gx,) = T.grad(T.sum(scores), [x], retain_graph=True)
        per_sample = T.sum(gx * gx, axis=tuple(range(1, gx.ndim)))
        term = T.mean(per_sample)
        total = term if total is None else total + term
    return total


def combine(parts: dict, weights: LossWeights) -> LossReport:
    """Totals for both players.

    ``parts`` has l_noise, l_image, l_rel_g, l_rel_d and (optionally) l_gp.
    total_g = l_noise + l_image + lambda_adv * l_rel_g
    total_d = lambda_adv * (l_rel_d + gp_weight * l_gp), with l_gp = 0 when
    the penalty is switched off.
    """
    lam = weights.lambda_adv
    l_gp = parts.get("l_gp", 0.0) if weights.use_gp else 0.0
    total_g = parts["l_noise"] + parts["l_image"] + lam * parts["l_rel_g"]
    total_d = lam * (parts["l_rel_d"] + weights.gp_weight * l_gp)
    if not isinstance(l_gp, T.Tensor):
        l_gp = float(l_gp)
    report = LossReport(parts["l_noise"], parts["l_image"], parts["l_rel_g"], parts["l_rel_d"],
                        l_gp, total_g, total_d)
    return report


def check_finite(report: LossReport) -> list[str]:
    """Names of report fields that are not finite."""
    return [k for k, v in report.to_record().items() if not np.isfinite(v)]
