"""Training objectives.

The SR net minimizes reconstruction error plus a high-frequency weighted
term; the degradation net minimizes LR fidelity while maximizing SR error,
with an adversarial realism term from a patch discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .image_ops import minmax_normalize, sobel_map
from .tensor import ContractError


@dataclass
class LossConfig:
    """Loss hyperparameters: p-norm order and the three trade-off weights."""

    p: int = 1
    omega: float = 0.5
    beta: float = 1.0
    gamma: float = 0.5
    detach_hf_mask: bool = False

    def __post_init__(self):
        if self.p not in (1, 2):
            raise ContractError(f"p must be 1 or 2, got {self.p}")
        if min(self.omega, self.beta, self.gamma) < 0:
            raise ContractError("omega, beta and gamma must be >= 0")


def pnorm_mean(a, b, p):
    """Mean of |a - b|^p over all elements (MAE for p=1, MSE for p=2)."""
    if p == 1:
        return T.mean(T.abs_(T.sub(a, b)))
    if p == 2:
        return T.mean(T.square(T.sub(a, b)))
    raise ContractError(f"pnorm_mean: p must be 1 or 2, got {p}")


def loss_rec(sr, hr, cfg):
    """Pixel-wise reconstruction error."""
    return pnorm_mean(sr, hr, cfg.p)


def loss_hfso(sr, hr, cfg):
    """High-frequency selective objective.

    Each image is weighted by its own normalized Sobel-magnitude mask before
    the p-norm, so edge-heavy regions dominate the error. By default the SR
    mask stays differentiable; ``cfg.detach_hf_mask`` freezes it into a
    constant weight map instead.
    """
    mask_hr = minmax_normalize(sobel_map(hr))
    mask_sr = minmax_normalize(sobel_map(sr))
    if getattr(cfg, "detach_hf_mask", False):
        mask_sr = mask_sr.detach()
    return pnorm_mean(T.mul(mask_hr, hr), T.mul(mask_sr, sr), cfg.p)


def loss_sr(sr, hr, cfg):
    """Reconstruction plus omega times the high-frequency term."""
    rec = loss_rec(sr, hr, cfg)
    if cfg.omega == 0:
        return rec
    return T.add(rec, T.scalar_mul(loss_hfso(sr, hr, cfg), cfg.omega))


def bce_with_logits_mean(logits, target):
    """Mean binary cross-entropy against a constant 0/1 target, from logits."""
    sp = T.softplus(logits)
    if target == 0:
        return T.mean(sp)
    return T.mean(T.sub(sp, T.scalar_mul(logits, float(target))))


def generator_term(disc, fake_lr):
    """Non-saturating generator loss: push fake logits toward 'real'."""
    return bce_with_logits_mean(disc(fake_lr), 1.0)


def loss_disc(disc, real_lr, fake_lr):
    """Critic and generator sides of the real/fake objective.

    Returns ``(critic_loss, gen_term)``. The critic term sees the fake batch
    detached; the generator term keeps gradients flowing into ``fake_lr``
    (and from there into the degradation net) only.
    """
    if real_lr.shape != fake_lr.shape:
        raise T.DimensionError(
            f"loss_disc: shape mismatch {real_lr.shape} vs {fake_lr.shape}"
        )
    critic = T.add(
        bce_with_logits_mean(disc(real_lr), 1.0),
        bce_with_logits_mean(disc(fake_lr.detach()), 0.0),
    )
    return critic, generator_term(disc, fake_lr)


def loss_kans(fake_lr, real_lr, sr, hr, gen_term, cfg):
    """Degradation-net objective: LR fidelity - beta * SR error + gamma * L_d.

    The subtracted term makes the value signed by construction; it rewards
    degradations that are faithful to the real LR yet hard to super-resolve.
    """
    total = pnorm_mean(fake_lr, real_lr, cfg.p)
    if cfg.beta != 0:
        total = T.sub(total, T.scalar_mul(pnorm_mean(sr, hr, cfg.p), cfg.beta))
    if cfg.gamma != 0 and gen_term is not None:
        total = T.add(total, T.scalar_mul(gen_term, cfg.gamma))
    return total
