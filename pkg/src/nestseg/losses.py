"""Dice / BCE losses and the weighted brain + TICV + PFV objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

SMOOTH = 1e-5
BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """TICV/PFV weights before and after the switch iteration.

    ``beta1``/``beta2`` hold the pre-switch pair so a bare ``LossWeights(beta1=..,
    beta2=..)`` reads naturally; the post-switch pair is separate.
    """

    beta1: float = 0.8
    beta2: float = 1.0
    switch_iteration: int = 20_000
    post_beta1: float = 0.08
    post_beta2: float = 0.1

    def __post_init__(self):
        values = (self.beta1, self.beta2, self.post_beta1, self.post_beta2)
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ValueError(f"loss weights must be finite and non-negative, got {values}")
        if self.switch_iteration < 0:
            raise ValueError(f"switch_iteration must be >= 0, got {self.switch_iteration}")

    @property
    def pre_switch(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    @property
    def post_switch(self) -> tuple[float, float]:
        return (self.post_beta1, self.post_beta2)


def beta_schedule(iteration: int, w: LossWeights) -> tuple[float, float]:
    """Pre-switch weights up to and including ``switch_iteration``, post-switch after."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return w.pre_switch if iteration <= w.switch_iteration else w.post_switch


@dataclass(frozen=True)
class LossBreakdown:
    l_brain: float
    l_ticv: float
    l_pfv: float
    total: float
    beta1: float
    beta2: float

    def to_dict(self) -> dict:
        return {
            "l_brain": self.l_brain,
            "l_ticv": self.l_ticv,
            "l_pfv": self.l_pfv,
            "total": self.total,
            "beta1": self.beta1,
            "beta2": self.beta2,
        }


def dice_loss(
    probs: torch.Tensor,
    target: torch.Tensor,
    smooth: float = SMOOTH,
    include_background: bool = True,
    check: bool = False,
) -> torch.Tensor:
    """1 - mean over classes of (2 sum(p t) + s) / (sum(p) + sum(t) + s).

    ``probs`` and ``target`` are ``(B, C, *spatial)``; sums run over the batch
    and all voxels so each class contributes one ratio.
    """
    if probs.shape != target.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    if check and (probs.min() < 0 or probs.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    if not include_background:
        probs, target = probs[:, 1:], target[:, 1:]
    dims = [0] + list(range(2, probs.ndim))
    inter = (probs * target).sum(dims)
    denom = probs.sum(dims) + target.sum(dims)
    return 1.0 - ((2.0 * inter + smooth) / (denom + smooth)).mean()


def bce_loss(prob: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy with the probability clamped to [eps, 1 - eps]."""
    if prob.shape != target.shape:
        raise ValueError(f"shape mismatch: prob {tuple(prob.shape)} vs target {tuple(target.shape)}")
    p = prob.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


def one_hot_torch(labels: torch.Tensor, num_classes: int, dtype=None) -> torch.Tensor:
    """(B, *spatial) integer labels -> (B, C, *spatial) one-hot."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label ids must lie in [0, {num_classes})")
    out = F.one_hot(labels.long(), num_classes)
    out = out.movedim(-1, 1)
    return out.to(dtype or torch.float32)


def structure_loss(logit: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Dice + BCE on one sigmoid channel (unit-weighted sum)."""
    prob = torch.sigmoid(logit)
    mask = mask.to(prob.dtype)
    return dice_loss(prob, mask) + bce_loss(prob, mask)


def composite_loss(
    out,
    labels: torch.Tensor,
    ticv: torch.Tensor | None,
    pfv: torch.Tensor | None,
    w: LossWeights,
    iteration: int,
    include_background: bool = True,
    brain_only: bool = False,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Brain Dice plus scheduled TICV and PFV terms.

    ``out`` is a ``ModelOutput``; labels is ``(B, *spatial)`` and the masks are
    ``(B, 1, *spatial)`` or ``(B, *spatial)``. With ``brain_only`` (pretraining)
    the TICV/PFV terms are skipped and reported as zero.
    """
    logits = out.brain_logits
    probs = torch.softmax(logits, dim=1)
    target = one_hot_torch(labels, logits.shape[1], dtype=probs.dtype)
    l_brain = dice_loss(probs, target, include_background=include_background)
    if brain_only:
        return l_brain, LossBreakdown(l_brain.item(), 0.0, 0.0, l_brain.item(), 0.0, 0.0)
    if out.ticv_logit is None or out.pfv_logit is None:
        raise ValueError("composite loss needs finetune-mode output with TICV and PFV logits")
    if ticv is None or pfv is None:
        raise ValueError("composite loss needs TICV and PFV target masks")
    if ticv.ndim == out.ticv_logit.ndim - 1:
        ticv, pfv = ticv.unsqueeze(1), pfv.unsqueeze(1)
    b1, b2 = beta_schedule(iteration, w)
    l_ticv = structure_loss(out.ticv_logit, ticv)
    l_pfv = structure_loss(out.pfv_logit, pfv)
    total = l_brain + b1 * l_ticv + b2 * l_pfv
    return total, LossBreakdown(l_brain.item(), l_ticv.item(), l_pfv.item(), total.item(), b1, b2)
