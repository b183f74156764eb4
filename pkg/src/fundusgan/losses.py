"""Adversarial, cycle-consistency and identity losses and their weighted totals."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import ConfigError

PROB_LO = 1e-7
PROB_HI = 1.0 - 1e-7


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{f.name} must be finite and nonnegative, got {v}")


@dataclass
class LossReport:
    adv_d_l: float
    adv_d_h: float
    adv_g_l: float
    adv_g_h: float
    cycle_l: float
    cycle_h: float
    id_l: float
    id_h: float
    total_g: float
    total_d: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _prob(logits: Tensor) -> Tensor:
    return ad.clip(ad.sigmoid(logits), PROB_LO, PROB_HI)


def adversarial_d_loss(d_real_logits: Tensor, d_fake_logits: Tensor) -> Tensor:
    """-(E[log D(real)] + E[log(1 - D(fake))]); the discriminator minimizes this."""
    if d_real_logits.shape != d_fake_logits.shape:
        raise ShapeError(
            f"real logits {d_real_logits.shape} and fake logits {d_fake_logits.shape} differ"
        )
    real = ad.mean(ad.log(_prob(d_real_logits)))
    fake = ad.mean(ad.log(1.0 - _prob(d_fake_logits)))
    return ad.neg(real + fake)


def adversarial_g_loss(d_fake_logits: Tensor) -> Tensor:
    """Non-saturating generator loss -E[log D(G(x))]."""
    return ad.neg(ad.mean(ad.log(_prob(d_fake_logits))))


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"L1 loss operands differ in shape: {a.shape} vs {b.shape}")
    return ad.mean(ad.abs(a - b))


def cycle_loss(regenerated: Tensor, original: Tensor) -> Tensor:
    return l1_loss(regenerated, original)


def identity_loss(same_domain_output: Tensor, x: Tensor) -> Tensor:
    return l1_loss(same_domain_output, x)


def generator_total(adv_g_l, adv_g_h, cycle_l, cycle_h, id_l, id_h, w: LossWeights):
    """Weighted generator objective; works on Tensors and on plain floats."""
    return (
        adv_g_l + adv_g_h
        + (cycle_l + cycle_h) * w.lambda_cycle
        + (id_l + id_h) * w.lambda_identity
    )


def total_losses(
    *,
    adv_d_l: float,
    adv_d_h: float,
    adv_g_l: float,
    adv_g_h: float,
    cycle_l: float,
    cycle_h: float,
    id_l: float,
    id_h: float,
    w: LossWeights,
) -> LossReport:
    terms = dict(adv_d_l=adv_d_l, adv_d_h=adv_d_h, adv_g_l=adv_g_l, adv_g_h=adv_g_h,
                 cycle_l=cycle_l, cycle_h=cycle_h, id_l=id_l, id_h=id_h)
    terms = {k: float(v.item() if isinstance(v, Tensor) else v) for k, v in terms.items()}
    for k, v in terms.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"loss term {k} is not finite ({v})")
    total_g = generator_total(terms["adv_g_l"], terms["adv_g_h"], terms["cycle_l"],
                              terms["cycle_h"], terms["id_l"], terms["id_h"], w)
    return LossReport(**terms, total_g=total_g, total_d=terms["adv_d_l"] + terms["adv_d_h"])
