"""Frozen feature extractor for the perceptual loss term.

The extractor is a fixed (never trained) conv network; the loss compares
teacher and student embeddings through its activations at selected layers.
Embeddings have many channels, classification backbones expect 3, so an input
adapter bridges the gap: either a fixed seeded 1x1 projection to 3 channels
(default) or channel-mean replication ("replicate_gray"). The adapter is part
of the extractor and equally frozen — its weights participate in the
freeze-invariant fingerprint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import Tensor, nn
from torchvision.models import vgg16

from .. import telemetry
from ..errors import ConfigError, WeightsError
from .common import freeze, seeded_init

# relu1_2 / relu2_2 / relu3_3 in torchvision's vgg16().features indexing
VGG16_DEFAULT_TAPS = (3, 8, 15)
TOY_DEFAULT_TAPS = (1, 3, 5)


@dataclass
class PerceptualExtractorSpec:
    base: str = "toy"  # toy | vgg16
    layer_ids: tuple[int, ...] = ()  # empty -> base default
    input_adapter: str = "fixed_projection_to_3ch"  # or replicate_gray
    weights_source: str = "random_seeded"
    weights_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.input_adapter not in ("fixed_projection_to_3ch", "replicate_gray"):
            raise ConfigError(f"unknown input_adapter {self.input_adapter!r}")
        if self.weights_source not in ("random_seeded", "external_file"):
            raise ConfigError(f"unknown weights_source {self.weights_source!r}")


class ReplicateGray(nn.Module):
    """Channel mean, replicated to 3 channels."""

    def forward(self, x: Tensor) -> Tensor:
        return x.mean(dim=1, keepdim=True).expand(-1, 3, -1, -1)


class PerceptualExtractor(nn.Module):
    """Sequential feature stack with taps; all weights frozen at construction.

    forward returns one activation map per layer_id, in order. layer_ids index
    into ``layers`` and must be strictly increasing.
    """

    def __init__(self, layers: nn.Sequential, layer_ids: tuple[int, ...],
                 adapter: nn.Module | None = None):
        super().__init__()
        if len(layer_ids) == 0:
            raise ConfigError("layer_ids must be nonempty")
        if list(layer_ids) != sorted(set(layer_ids)):
            raise ConfigError(f"layer_ids must be strictly increasing, got {layer_ids}")
        if layer_ids[0] < 0 or layer_ids[-1] >= len(layers):
            raise ConfigError(
                f"unknown layer id in {layer_ids}: extractor has {len(layers)} layers"
            )
        self.layers = layers
        self.layer_ids = tuple(int(i) for i in layer_ids)
        self.adapter = adapter
        freeze(self)

    def forward(self, x: Tensor) -> list[Tensor]:
        telemetry.count("forward.extractor")
        if self.adapter is not None:
            x = self.adapter(x)
        taps = []
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i in self.layer_ids:
                taps.append(x)
            if i == self.layer_ids[-1]:
                break
        return taps


def _toy_layers() -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1),
        nn.GELU(),
        nn.Conv2d(8, 12, 3, padding=1),
        nn.GELU(),
        nn.Conv2d(12, 16, 3, padding=1),
        nn.GELU(),
    )


def build_perceptual_extractor(spec: PerceptualExtractorSpec,
                               input_channels: int = 3) -> PerceptualExtractor:
    """Build the frozen extractor, with an input adapter when channels != 3."""
    with seeded_init(spec.seed):
        if spec.base == "toy":
            layers = _toy_layers()
            default_taps = TOY_DEFAULT_TAPS
        elif spec.base == "vgg16":
            layers = vgg16(weights=None).features
            default_taps = VGG16_DEFAULT_TAPS
        else:
            raise ConfigError(f"unknown extractor base {spec.base!r}")

        if spec.weights_source == "external_file":
            if not spec.weights_path or not Path(spec.weights_path).is_file():
                raise WeightsError(f"extractor weights not found: {spec.weights_path}")
            state = torch.load(spec.weights_path, map_location="cpu", weights_only=True)
            layers.load_state_dict(state)

        adapter: nn.Module | None = None
        if input_channels != 3:
            if spec.input_adapter == "replicate_gray":
                adapter = ReplicateGray()
            else:
                adapter = nn.Conv2d(input_channels, 3, 1, bias=False)

    taps = tuple(spec.layer_ids) if spec.layer_ids else default_taps
    return PerceptualExtractor(layers, taps, adapter)
