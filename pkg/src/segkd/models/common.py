"""Shared model utilities: parameter counting, weight fingerprints, seeding."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ..errors import ShapeError


def count_parameters(model: nn.Module) -> int:
    """Exact count of trainable scalar parameters."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def weights_fingerprint(module: nn.Module) -> str:
    """sha256 over all parameters and buffers (names, dtypes, shapes, bytes).

    Bit-exact: any single-bit weight change flips the digest. Used to assert
    the freeze invariants (teacher/extractor untouched by phase 1, encoder
    untouched by phase 2).
    """
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@contextmanager
def seeded_init(seed: int):
    """Run module construction under a seeded, restored global torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def freeze(module: nn.Module) -> nn.Module:
    module.requires_grad_(False)
    module.eval()
    return module


def spatial_resize(x: Tensor, size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Resize a (B, C, H, W) map to ``size``.

    nearest maps output pixel (i, j) to source pixel (floor(i*H/h), floor(j*W/w)),
    which the index-arithmetic oracle in the tests relies on.
    """
    if x.dim() != 4:
        raise ShapeError(f"expected a 4-d tensor, got shape {tuple(x.shape)}")
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    if mode == "nearest":
        return F.interpolate(x, size=size, mode="nearest")
    return F.interpolate(x, size=size, mode=mode, align_corners=False)
