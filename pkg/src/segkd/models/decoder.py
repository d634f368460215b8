"""Prompt-guided mask decoders.

The decoder consumes an image embedding plus per-image prompts and emits a
probability mask. The toy variant rasterizes prompts into two extra planes on
the embedding grid (a gaussian disc for points, a filled rectangle for boxes)
and decodes with a small transposed-conv head ending in a sigmoid. The
full-scale decoder is external pretrained weights behind the same surface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor, nn

from .. import telemetry
from ..errors import ConfigError, PromptError, ShapeError, WeightsError
from .common import seeded_init, spatial_resize
from .prompts import BoxPrompt, PointPrompt

Prompt = PointPrompt | BoxPrompt


@dataclass
class DecoderSpec:
    family: str = "toy"  # toy | external
    prompt_types: tuple[str, ...] = ("point", "box")
    embed_channels: int = 32
    hidden_channels: int = 32
    output_size: tuple[int, int] = (64, 64)
    weights_source: str = "random_seeded"
    weights_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        bad = set(self.prompt_types) - {"point", "box"}
        if bad:
            raise ConfigError(f"unknown prompt types {sorted(bad)}")
        if not self.prompt_types:
            raise ConfigError("at least one prompt type must be enabled")


def _check_prompts(prompts: list[list[Prompt]], batch: int,
                   allowed: tuple[str, ...]) -> None:
    if len(prompts) != batch:
        raise PromptError(f"got prompts for {len(prompts)} images, batch has {batch}")
    for i, plist in enumerate(prompts):
        if len(plist) == 0:
            raise PromptError(f"image {i} has an empty prompt set")
        for p in plist:
            if isinstance(p, PointPrompt) and "point" not in allowed:
                raise PromptError("point prompts are disabled for this decoder")
            if isinstance(p, BoxPrompt) and "box" not in allowed:
                raise PromptError("box prompts are disabled for this decoder")


class ToyPromptDecoder(nn.Module):
    """Two transposed convs + refinement convs, sigmoid probability output."""

    POINT_SIGMA = 1.5  # gaussian radius of a point prompt, in embedding cells

    def __init__(self, spec: DecoderSpec):
        super().__init__()
        self.spec = spec
        self.embed_channels = spec.embed_channels
        self.output_size = tuple(spec.output_size)
        hidden = spec.hidden_channels
        with seeded_init(spec.seed):
            self.up1 = nn.ConvTranspose2d(spec.embed_channels + 2, hidden, 4, stride=2, padding=1)
            self.up2 = nn.ConvTranspose2d(hidden, hidden, 4, stride=2, padding=1)
            self.refine = nn.Conv2d(hidden, hidden // 2, 3, padding=1)
            self.out = nn.Conv2d(hidden // 2, 1, 3, padding=1)
        self.act = nn.GELU()

    def _rasterize(self, prompts: list[list[Prompt]], grid: tuple[int, int],
                   dtype: torch.dtype) -> Tensor:
        """Two planes per image on the embedding grid: points and boxes."""
        ge_h, ge_w = grid
        out_h, out_w = self.output_size
        sy, sx = ge_h / out_h, ge_w / out_w
        ys = torch.arange(ge_h, dtype=dtype).view(-1, 1)
        xs = torch.arange(ge_w, dtype=dtype).view(1, -1)
        maps = torch.zeros(len(prompts), 2, ge_h, ge_w, dtype=dtype)
        for i, plist in enumerate(prompts):
            for p in plist:
                if isinstance(p, PointPrompt):
                    cy, cx = p.y * sy, p.x * sx
                    d2 = (ys - cy) ** 2 + (xs - cx) ** 2
                    bump = torch.exp(-d2 / (2 * self.POINT_SIGMA**2))
                    maps[i, 0] = torch.maximum(maps[i, 0], bump)
                else:
                    y0, y1 = int(math.floor(p.y0 * sy)), int(math.ceil(p.y1 * sy))
                    x0, x1 = int(math.floor(p.x0 * sx)), int(math.ceil(p.x1 * sx))
                    y0, x0 = max(y0, 0), max(x0, 0)
                    y1, x1 = min(y1, ge_h - 1), min(x1, ge_w - 1)
                    maps[i, 1, y0 : y1 + 1, x0 : x1 + 1] = 1.0
        return maps

    def forward(self, embedding: Tensor, prompts: list[list[Prompt]]) -> Tensor:
        if embedding.dim() != 4 or embedding.shape[1] != self.embed_channels:
            raise ShapeError(
                f"expected (B, {self.embed_channels}, H, W) embedding, "
                f"got shape {tuple(embedding.shape)}"
            )
        _check_prompts(prompts, embedding.shape[0], self.spec.prompt_types)
        telemetry.count("forward.decoder")
        grid = (embedding.shape[-2], embedding.shape[-1])
        maps = self._rasterize(prompts, grid, embedding.dtype).to(embedding.device)
        x = torch.cat([embedding, maps], dim=1)
        x = self.act(self.up1(x))
        x = self.act(self.up2(x))
        x = self.act(self.refine(x))
        logits = spatial_resize(self.out(x), self.output_size, "bilinear")
        return torch.sigmoid(logits)


class ExternalDecoderAdapter(nn.Module):
    """Loader boundary for a pretrained prompt decoder.

    The serialized module must accept (embedding, prompts) with the same
    conventions as ToyPromptDecoder and return a probability mask. It stays
    trainable: phase 2 fine-tunes it.
    """

    def __init__(self, spec: DecoderSpec):
        super().__init__()
        if not spec.weights_path or not Path(spec.weights_path).is_file():
            raise WeightsError(f"external decoder weights not found: {spec.weights_path}")
        try:
            module = torch.load(spec.weights_path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise WeightsError(f"cannot load decoder from {spec.weights_path}: {exc}") from exc
        if not isinstance(module, nn.Module):
            raise WeightsError(f"{spec.weights_path} does not contain an nn.Module")
        self.spec = spec
        self.inner = module
        self.embed_channels = spec.embed_channels
        self.output_size = tuple(spec.output_size)

    def forward(self, embedding: Tensor, prompts: list[list[Prompt]]) -> Tensor:
        _check_prompts(prompts, embedding.shape[0], self.spec.prompt_types)
        telemetry.count("forward.decoder")
        return self.inner(embedding, prompts)


def build_decoder(spec: DecoderSpec) -> nn.Module:
    if spec.family == "toy":
        return ToyPromptDecoder(spec)
    if spec.family == "external":
        return ExternalDecoderAdapter(spec)
    raise ConfigError(f"unknown decoder family {spec.family!r}")
