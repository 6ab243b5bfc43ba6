"""Soft Dice, per-pixel Bernoulli KL self-distillation and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError, InputError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    dice_smooth: float = 1e-6
    kl_epsilon: float = 1e-6
    # teacher is always the later pass, gradient-stopped
    distill_direction: str = "later-teaches-earlier"
    # extension, not part of the base objective: also supervise the first pass with Dice
    aux_first_pass_dice: bool = False

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.dice_smooth <= 0:
            raise ConfigError("dice_smooth must be > 0")
        if not 0 < self.kl_epsilon < 0.5:
            raise ConfigError("kl_epsilon must lie in (0, 0.5)")
        if self.distill_direction != "later-teaches-earlier":
            raise ConfigError(f"unsupported distill_direction {self.distill_direction!r}")


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(pred_prob, target, smooth: float = 1e-6):
    """``1 - (2 sum(p g) + eps) / (sum p + sum g + eps)`` over the last two axes.

    Leading (batch) axes are averaged.
    """
    p = _as_tensor(pred_prob)
    g = _as_tensor(target, like=p).to(p.dtype)
    _check_shapes(p, g)
    inter = (p * g).sum(dim=(-2, -1))
    denom = p.sum(dim=(-2, -1)) + g.sum(dim=(-2, -1))
    return (1 - (2 * inter + smooth) / (denom + smooth)).mean()


def kl_self_distill(student_prob, teacher_prob, clamp: float = 1e-6):
    """Mean per-pixel KL(teacher || student) between Bernoulli maps.

    The teacher is detached, so no gradient ever reaches it through this term.
    """
    p = _as_tensor(student_prob)
    q = _as_tensor(teacher_prob, like=p).detach().to(p.dtype)
    _check_shapes(p, q)
    p = p.clamp(clamp, 1 - clamp)
    q = q.clamp(clamp, 1 - clamp)
    kl = q * torch.log(q / p) + (1 - q) * torch.log((1 - q) / (1 - p))
    return kl.mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    dice_term: torch.Tensor
    kl_term: torch.Tensor
    alpha: float

    def record(self) -> dict:
        return {"dice_term": self.dice_term.item(), "kl_term": self.kl_term.item(),
                "alpha": self.alpha, "total": self.total.item()}


def total_loss(y0, y1, target, cfg: LossConfig | None = None) -> LossBreakdown:
    """Dice on the self-prompted pass plus ``alpha`` times the distillation term.

    ``y0`` and ``y1`` are :class:`MaskPrediction` objects (or probability maps).
    """
    cfg = cfg or LossConfig()
    p0 = getattr(y0, "prob_map", y0)
    p1 = getattr(y1, "prob_map", y1)
    dice = dice_loss(p1, target, cfg.dice_smooth)
    if cfg.aux_first_pass_dice:
        dice = dice + dice_loss(p0, target, cfg.dice_smooth)
    kl = kl_self_distill(p0, p1, cfg.kl_epsilon)
    total = dice + cfg.alpha * kl if cfg.alpha else dice
    return LossBreakdown(total, dice, kl, cfg.alpha)
