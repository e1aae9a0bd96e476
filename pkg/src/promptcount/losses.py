"""L2, infinity, finite and fixed-point losses.

The per-sample functions mirror the definitions one-to-one. ``batch_loss``
is the vectorised form the trainer uses; it follows the same gradient
contract: iterates before the last are computed without gradient tracking,
and the one-step target ``g = F(d_gt)`` is computed once and shared by both
fixed-point terms (with gradients).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import EPS, CountingError, CountingModel, _as_tensor, fixed_point_step

VARIANTS = ("L2", "FixedPoint", "InfinityOnly", "FiniteOnly_Tprime", "Infinity_plus_Tprime")


@dataclass(frozen=True)
class LossConfig:
    variant: str = "FixedPoint"
    T: int = 2
    reduction: str = "sum"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")

    @property
    def eval_T(self) -> int:
        """Iterations used at inference; the vanilla L2 model is a single pass."""
        return 1 if self.variant == "L2" else self.T


def l2_loss(d, d_gt, reduction: str = "sum") -> torch.Tensor:
    d, d_gt = _as_tensor(d), _as_tensor(d_gt)
    if d.shape != d_gt.shape:
        raise ValueError(f"shape mismatch {tuple(d.shape)} vs {tuple(d_gt.shape)}")
    sq = (d - d_gt.to(d.dtype)) ** 2
    return sq.sum() if reduction == "sum" else sq.mean()


def last_iterate(mask, feats, model: CountingModel, T: int) -> torch.Tensor:
    """d(T) with gradients through the final application only."""
    feats = _as_tensor(feats)
    d = _as_tensor(mask, like=feats)
    with torch.no_grad():
        for _ in range(T - 1):
            d = fixed_point_step(d, feats, model)
    return fixed_point_step(d.detach(), feats, model)


def loss_infinity(d_gt, feats, model: CountingModel, reduction: str = "sum") -> torch.Tensor:
    """Distance between one re-prompting of the ground truth and the ground truth.

    Returns ``None`` for an empty ground truth (the step is undefined there).
    """
    feats = _as_tensor(feats)
    d_gt = _as_tensor(d_gt, like=feats)
    if float(d_gt.sum()) <= EPS:
        return None
    return l2_loss(fixed_point_step(d_gt, feats, model), d_gt, reduction)


def loss_T(d_T, g, reduction: str = "sum") -> torch.Tensor:
    return l2_loss(d_T, g, reduction)


def fixed_point_loss(mask, feats, d_gt, model: CountingModel, T: int,
                     reduction: str = "sum") -> torch.Tensor:
    feats = _as_tensor(feats)
    d_gt = _as_tensor(d_gt, like=feats)
    d_T = last_iterate(mask, feats, model, T)
    if float(d_gt.sum()) <= EPS:
        return l2_loss(d_T, d_gt, reduction)
    g = fixed_point_step(d_gt, feats, model)
    return loss_T(d_T, g, reduction) + l2_loss(g, d_gt, reduction)


def loss_T_prime(mask, feats, d_gt, model: CountingModel, T: int,
                 reduction: str = "sum") -> torch.Tensor:
    return l2_loss(last_iterate(mask, feats, model, T), d_gt, reduction)


# ---------------------------------------------------------------------------
# Batched
# ---------------------------------------------------------------------------


def _batched_last_iterate(model, feats, masks, T):
    d = masks
    with torch.no_grad():
        for _ in range(T - 1):
            nxt = model.step(d, feats)
            # a vanished iterate cannot be re-aggregated: re-prompt with the mask
            d = torch.where((nxt.sum((-2, -1)) > EPS)[:, None, None], nxt, masks)
    return model.step(d.detach(), feats)


def batch_loss(model: CountingModel, feats: torch.Tensor, masks: torch.Tensor,
               targets: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    """Loss summed over pixels and averaged over the batch (``sum`` reduction)
    or averaged over all elements (``mean``)."""
    B = feats.shape[0]

    def L(a, b):
        sq = (a - b) ** 2
        return sq.sum() / B if cfg.reduction == "sum" else sq.mean()

    if cfg.variant == "L2":
        return L(model.step(masks, feats), targets)

    has_gt = targets.sum((-2, -1)) > EPS
    g = None
    if cfg.variant != "FiniteOnly_Tprime":
        g = model.step(targets, feats)
        # empty ground truth: no infinity term, finite term targets the zero map
        g = torch.where(has_gt[:, None, None], g, targets)
    if cfg.variant == "InfinityOnly":
        return L(g, targets)

    d_T = _batched_last_iterate(model, feats, masks, cfg.T)
    if cfg.variant == "FixedPoint":
        return L(d_T, g) + L(g, targets)
    if cfg.variant == "FiniteOnly_Tprime":
        return L(d_T, targets)
    return L(g, targets) + L(d_T, targets)


def sample_loss(cfg: LossConfig, mask, feats, d_gt, model: CountingModel) -> torch.Tensor:
    """Single-sample dispatch over the loss variants."""
    if cfg.variant == "L2":
        return loss_T_prime(mask, feats, d_gt, model, 1, cfg.reduction)
    if cfg.variant == "FixedPoint":
        return fixed_point_loss(mask, feats, d_gt, model, cfg.T, cfg.reduction)
    if cfg.variant == "FiniteOnly_Tprime":
        return loss_T_prime(mask, feats, d_gt, model, cfg.T, cfg.reduction)
    inf = loss_infinity(d_gt, feats, model, cfg.reduction)
    if inf is None:
        raise CountingError("infinity loss needs a non-empty ground truth")
    if cfg.variant == "InfinityOnly":
        return inf
    return inf + loss_T_prime(mask, feats, d_gt, model, cfg.T, cfg.reduction)
