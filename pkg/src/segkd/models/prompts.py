"""Prompt primitives and the deterministic prompt policies.

Coordinates live in mask pixel space: x is the column, y the row. The default
training/eval policy is one point at the ground-truth centroid snapped to the
nearest foreground pixel; the alternative is the tight bounding box. Both are
pure functions of the mask, so prompting is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from ..errors import ConfigError

POINT_POLICY = "centroid_point"
BOX_POLICY = "box"


@dataclass(frozen=True)
class PointPrompt:
    x: float
    y: float


@dataclass(frozen=True)
class BoxPrompt:
    x0: float
    y0: float
    x1: float
    y1: float


def _foreground_yx(mask: Tensor) -> Tensor:
    m = mask.reshape(mask.shape[-2], mask.shape[-1])
    return torch.nonzero(m > 0.5)


def centroid_point(mask: Tensor) -> PointPrompt | None:
    """Centroid of the foreground, snapped to the nearest foreground pixel.

    Returns None for an empty mask. Ties in the snap distance resolve to the
    first pixel in row-major order, keeping the policy deterministic.
    """
    yx = _foreground_yx(mask)
    if yx.shape[0] == 0:
        return None
    centroid = yx.to(torch.float64).mean(dim=0)
    d2 = ((yx.to(torch.float64) - centroid) ** 2).sum(dim=1)
    best = yx[int(torch.argmin(d2))]
    return PointPrompt(x=float(best[1]), y=float(best[0]))


def bounding_box(mask: Tensor) -> BoxPrompt | None:
    """Tight axis-aligned box around the foreground (inclusive corners)."""
    yx = _foreground_yx(mask)
    if yx.shape[0] == 0:
        return None
    y0, x0 = yx.min(dim=0).values
    y1, x1 = yx.max(dim=0).values
    return BoxPrompt(x0=float(x0), y0=float(y0), x1=float(x1), y1=float(y1))


def prompts_for_mask(mask: Tensor, policy: str) -> list[PointPrompt | BoxPrompt] | None:
    """Apply a prompt policy; None signals an empty mask (caller decides)."""
    if policy == POINT_POLICY:
        p = centroid_point(mask)
    elif policy == BOX_POLICY:
        p = bounding_box(mask)
    else:
        raise ConfigError(f"unknown prompt policy {policy!r}")
    return None if p is None else [p]
