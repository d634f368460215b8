"""Distillation and segmentation losses.

All functions operate on 4-d tensors (batch, channels, height, width) and stay
inside torch's autograd graph, so gradients w.r.t. the student / prediction
inputs come for free. Returned values are wrapped in :class:`LossValue` so the
combined loss can carry its per-term breakdown.

Conventions pinned here (and relied on by the oracle tests):

- feature MSE averages over every element of the feature map;
- the perceptual term normalizes each layer by channels*height*width, sums
  over the batch, then divides by batch size, and finally sums over layers,
  so its magnitude is independent of batch size;
- soft dice adds ``smooth`` (default 1e-6) to numerator and denominator, with
  the sums running over the whole batch;
- the dice *metric* binarizes at a threshold (strictly greater-than), scores
  each image separately with 2|P∩G|/(|P|+|G|), treats empty-vs-empty as 1.0,
  and averages over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import ConfigError, DomainError, NumericsError, ShapeError

DICE_SMOOTH = 1e-6


@dataclass
class LossValue:
    """A scalar loss plus optional named components that sum to it."""

    total: Tensor
    components: dict[str, Tensor] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.total.detach())

    def component_items(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.components.items()}


def _require_feature_map(name: str, t: Tensor) -> None:
    if t.dim() != 4:
        raise ShapeError(f"{name} must be a 4-d (B, C, H, W) tensor, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise NumericsError(f"{name} contains non-finite values")


def _require_same_shape(a_name: str, a: Tensor, b_name: str, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f"{a_name} shape {tuple(a.shape)} does not match {b_name} shape {tuple(b.shape)}"
        )


def _require_mask(name: str, t: Tensor, kind: str) -> None:
    if t.dim() != 4 or t.shape[1] != 1:
        raise ShapeError(f"{name} must be a (B, 1, H, W) tensor, got shape {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise NumericsError(f"{name} contains non-finite values")
    if kind == "probability":
        if bool((t < 0).any()) or bool((t > 1).any()):
            raise DomainError(f"{name} has values outside [0, 1]")
    elif kind == "binary":
        if not bool(((t == 0) | (t == 1)).all()):
            raise DomainError(f"{name} must be binary (values in {{0, 1}})")


def mse_loss(teacher: Tensor, student: Tensor) -> LossValue:
    """Mean squared error between teacher and student feature maps.

    Averages over every element (batch included), i.e. (1/N) * sum of squared
    differences with N = B*C*H*W.
    """
    _require_feature_map("teacher", teacher)
    _require_feature_map("student", student)
    _require_same_shape("teacher", teacher, "student", student)
    return LossValue(total=torch.mean((teacher - student) ** 2))


def perceptual_loss(
    teacher_feats: list[Tensor] | tuple[Tensor, ...],
    student_feats: list[Tensor] | tuple[Tensor, ...],
) -> LossValue:
    """Feature-space distance summed over extractor layers.

    Per layer l: (1 / (C_l * H_l * W_l)) * sum over (c, h, w) of squared
    differences, summed over the batch and divided by batch size; the final
    loss is the sum over layers.
    """
    if len(teacher_feats) == 0 or len(student_feats) == 0:
        raise ConfigError("perceptual_loss needs at least one feature layer")
    if len(teacher_feats) != len(student_feats):
        raise ShapeError(
            f"feature list lengths differ: {len(teacher_feats)} vs {len(student_feats)}"
        )
    total = None
    for i, (t, s) in enumerate(zip(teacher_feats, student_feats)):
        _require_feature_map(f"teacher_feats[{i}]", t)
        _require_feature_map(f"student_feats[{i}]", s)
        _require_same_shape(f"teacher_feats[{i}]", t, f"student_feats[{i}]", s)
        # mean over (B, C, H, W) == sum over batch of the per-layer
        # CHW-normalized squared error, divided by batch size
        layer = torch.mean((t - s) ** 2)
        total = layer if total is None else total + layer
    return LossValue(total=total)


def combined_loss(
    teacher: Tensor,
    student: Tensor,
    teacher_feats: list[Tensor] | tuple[Tensor, ...],
    student_feats: list[Tensor] | tuple[Tensor, ...],
    mse_weight: float = 1.0,
    perceptual_weight: float = 1.0,
) -> LossValue:
    """Distillation objective: weighted sum of feature MSE and perceptual loss.

    Default weights (1, 1) give the plain unweighted sum. Components are
    stored post-weighting so they always sum to the total.
    """
    mse_term = mse_weight * mse_loss(teacher, student).total
    perc_term = perceptual_weight * perceptual_loss(teacher_feats, student_feats).total
    return LossValue(
        total=mse_term + perc_term,
        components={"mse": mse_term, "perceptual": perc_term},
    )


def dice_loss(pred: Tensor, truth: Tensor, smooth: float = DICE_SMOOTH) -> LossValue:
    """Soft dice loss: 1 - (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth).

    ``pred`` is a probability mask in [0, 1], ``truth`` a binary mask; the
    sums run over the whole batch.
    """
    _require_mask("pred", pred, "probability")
    _require_mask("truth", truth, "binary")
    _require_same_shape("pred", pred, "truth", truth)
    intersection = torch.sum(pred * truth)
    denom = torch.sum(pred) + torch.sum(truth)
    return LossValue(total=1.0 - (2.0 * intersection + smooth) / (denom + smooth))


def dice_metric(pred: Tensor, truth: Tensor, threshold: float = 0.5) -> float:
    """Hard dice coefficient, per image, averaged over the batch.

    ``pred`` is binarized at ``threshold`` (strictly greater-than). An image
    where both the binarized prediction and the truth are empty scores 1.0.
    """
    _require_mask("pred", pred, "probability")
    _require_mask("truth", truth, "binary")
    _require_same_shape("pred", pred, "truth", truth)
    hard = (pred > threshold).to(torch.float64)
    gt = truth.to(torch.float64)
    inter = torch.sum(hard * gt, dim=(1, 2, 3))
    sizes = torch.sum(hard, dim=(1, 2, 3)) + torch.sum(gt, dim=(1, 2, 3))
    scores = torch.where(
        sizes > 0,
        2.0 * inter / sizes.clamp(min=1.0),
        torch.ones_like(sizes),
    )
    # clamp only guards the masked-out branch of torch.where from 0/0
    return float(scores.mean())
