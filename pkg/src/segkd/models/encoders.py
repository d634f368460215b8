"""Teacher and student image encoders.

Every encoder reports its own geometry (`embed_channels`, `embed_spatial`,
`input_size`) and produces a (B, embed_channels, H_e, W_e) embedding. The
student is a backbone followed by a channel-projection + upsampling head so
its output shape always equals the teacher's; distillation (feature matching)
depends on that.

Full-scale variants: the teacher is an external pretrained module consumed
through a loader boundary (a missing weight file is an explicit WeightsError,
never a silent random init); the student wraps a torchvision ResNet-50 whose
2048-channel stage-5 output is reduced to 256 channels and upsampled 2x.
Toy variants are small seeded conv nets with the identical surface, sized for
CPU-minutes tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import Tensor, nn
from torchvision.models import resnet50

from .. import telemetry
from ..errors import ConfigError, ShapeError, WeightsError
from .common import freeze, seeded_init, spatial_resize


@dataclass
class EncoderSpec:
    """Declarative encoder description, buildable at toy or full scale."""

    family: str = "toy_conv"  # teacher_vit | student_resnet | toy_conv | toy_student
    embed_channels: int = 32
    input_size: tuple[int, int] = (64, 64)
    backbone_out_channels: int = 48  # student families only
    weights_source: str = "random_seeded"  # random_seeded | external_file
    weights_path: str | None = None
    seed: int = 0
    upsample_mode: str = "bilinear"

    def __post_init__(self):
        if self.embed_channels < 1:
            raise ConfigError("embed_channels must be >= 1")
        if self.weights_source not in ("random_seeded", "external_file"):
            raise ConfigError(f"unknown weights_source {self.weights_source!r}")


def _check_input(module: nn.Module, x: Tensor) -> None:
    if x.dim() != 4 or x.shape[1] != module.in_channels:
        raise ShapeError(
            f"expected (B, {module.in_channels}, H, W) input, got shape {tuple(x.shape)}"
        )
    if tuple(x.shape[-2:]) != tuple(module.input_size):
        raise ShapeError(
            f"expected input resolution {tuple(module.input_size)}, got {tuple(x.shape[-2:])}"
        )


class ToyConvEncoder(nn.Module):
    """3-layer conv encoder; stands in for the large teacher in tests.

    Two strided stages then one plain conv: embed_spatial = input_size / 4.
    """

    def __init__(self, embed_channels: int = 32, input_size: tuple[int, int] = (64, 64),
                 in_channels: int = 3, seed: int = 0):
        super().__init__()
        if input_size[0] % 8 or input_size[1] % 8:
            raise ConfigError(f"toy encoder input size must be divisible by 8, got {input_size}")
        self.in_channels = in_channels
        self.embed_channels = embed_channels
        self.input_size = tuple(input_size)
        self.embed_spatial = (input_size[0] // 4, input_size[1] // 4)
        with seeded_init(seed):
            self.net = nn.Sequential(
                nn.Conv2d(in_channels, 16, 3, stride=2, padding=1),
                nn.GELU(),
                nn.Conv2d(16, 24, 3, stride=2, padding=1),
                nn.GELU(),
                nn.Conv2d(24, embed_channels, 3, stride=1, padding=1),
            )

    def forward(self, x: Tensor) -> Tensor:
        _check_input(self, x)
        telemetry.count("forward.encoder")
        return self.net(x)


class ToyBackbone(nn.Module):
    """Small conv stack: final features at 1/8, lateral tap at 1/4."""

    def __init__(self, out_channels: int = 96, in_channels: int = 3):
        super().__init__()
        self.out_channels = out_channels
        self.stride = 8
        w = max(out_channels // 4, 8)
        self.lateral_channels = 2 * w
        self.stage1 = nn.Sequential(nn.Conv2d(in_channels, w, 3, stride=2, padding=1), nn.GELU())
        self.stage2 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.GELU())
        self.stage3 = nn.Sequential(
            nn.Conv2d(2 * w, 3 * w, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(3 * w, out_channels, 3, stride=1, padding=1),
        )

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = self.stage1(x)
        lateral = self.stage2(x)
        return self.stage3(lateral), lateral


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50: stage-5 output (2048 at 1/32), lateral at stage 4."""

    def __init__(self):
        super().__init__()
        net = resnet50(weights=None)
        self.out_channels = 2048
        self.stride = 32
        self.lateral_channels = 1024
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        lateral = self.layer3(x)
        return self.layer4(lateral), lateral


class ProjectionUpsampleHead(nn.Module):
    """Channel reduction plus a learned 2x upsample with a lateral skip.

    Feature-pyramid style: the deepest features are reduced to the embedding
    width, refined, and transposed-conv upsampled; the backbone's half-stride
    stage joins through a 1x1 lateral projection; one linear 3x3 output conv
    fuses the sum. Keeping the output conv linear (no activation, no norm)
    matters: the embedding must be able to reproduce the teacher's per-sample
    statistics and scale exactly.
    """

    def __init__(self, in_channels: int, lateral_channels: int, embed_channels: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, embed_channels, 1)
        self.refine = nn.Sequential(
            nn.Conv2d(embed_channels, embed_channels, 3, padding=1),
            nn.GELU(),
            nn.Conv2d(embed_channels, embed_channels, 3, padding=1),
            nn.GELU(),
        )
        self.up = nn.ConvTranspose2d(embed_channels, embed_channels, 2, stride=2)
        self.lateral = nn.Conv2d(lateral_channels, embed_channels, 1)
        self.out = nn.Conv2d(embed_channels, embed_channels, 3, padding=1)

    def forward(self, x: Tensor, lateral: Tensor) -> Tensor:
        x = self.up(self.refine(self.proj(x)))
        skip = self.lateral(lateral)
        if skip.shape[-2:] != x.shape[-2:]:
            skip = spatial_resize(skip, tuple(x.shape[-2:]), "bilinear")
        return self.out(x + skip)


class StudentEncoder(nn.Module):
    """Backbone + projection/upsampling head matching the teacher's geometry."""

    def __init__(self, backbone: nn.Module, embed_channels: int,
                 input_size: tuple[int, int], embed_spatial: tuple[int, int],
                 upsample_mode: str = "bilinear", in_channels: int = 3, seed: int = 0):
        super().__init__()
        self.in_channels = in_channels
        self.embed_channels = embed_channels
        self.input_size = tuple(input_size)
        self.embed_spatial = tuple(embed_spatial)
        self.upsample_mode = upsample_mode
        with seeded_init(seed):
            self.backbone = backbone
            self.head = ProjectionUpsampleHead(
                backbone.out_channels, backbone.lateral_channels, embed_channels
            )

    def forward(self, x: Tensor) -> Tensor:
        _check_input(self, x)
        telemetry.count("forward.encoder")
        top, lateral = self.backbone(x)
        out = self.head(top, lateral)
        # the head's learned 2x upsample covers the common stride gap; any
        # residual mismatch against the teacher-reported grid is interpolated
        return spatial_resize(out, self.embed_spatial, self.upsample_mode)


class ExternalEncoderAdapter(nn.Module):
    """Loader boundary for an externally trained teacher encoder.

    Expects a torch-serialized nn.Module (e.g. TorchScript or pickled) that
    maps (B, 3, H, W) images to (B, C, H_e, W_e) embeddings and carries
    embed_channels / embed_spatial / input_size attributes (overridable here).
    """

    def __init__(self, path: str | Path, embed_channels: int | None = None,
                 embed_spatial: tuple[int, int] | None = None,
                 input_size: tuple[int, int] | None = None):
        super().__init__()
        path = Path(path)
        if not path.is_file():
            raise WeightsError(f"external encoder weights not found: {path}")
        try:
            module = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise WeightsError(f"cannot load external encoder from {path}: {exc}") from exc
        if not isinstance(module, nn.Module):
            raise WeightsError(f"{path} does not contain an nn.Module")
        self.inner = freeze(module)
        self.in_channels = 3
        self.embed_channels = embed_channels or getattr(module, "embed_channels")
        self.embed_spatial = tuple(embed_spatial or getattr(module, "embed_spatial"))
        self.input_size = tuple(input_size or getattr(module, "input_size"))

    def forward(self, x: Tensor) -> Tensor:
        _check_input(self, x)
        telemetry.count("forward.encoder")
        return self.inner(x)


def build_teacher(spec: EncoderSpec) -> nn.Module:
    """Instantiate a frozen teacher encoder from a spec."""
    if spec.family == "toy_conv":
        teacher = ToyConvEncoder(spec.embed_channels, spec.input_size, seed=spec.seed)
        return freeze(teacher)
    if spec.family == "teacher_vit":
        if spec.weights_source != "external_file" or not spec.weights_path:
            raise WeightsError(
                "the full-scale teacher is only available from external weights; "
                "set weights_source=external_file and weights_path"
            )
        return ExternalEncoderAdapter(
            spec.weights_path,
            embed_channels=spec.embed_channels,
            input_size=spec.input_size,
        )
    raise ConfigError(f"unknown teacher family {spec.family!r}")


def build_student(spec: EncoderSpec, embed_spatial: tuple[int, int] | None = None) -> StudentEncoder:
    """Instantiate the trainable student encoder.

    ``embed_spatial`` defaults to the geometry implied by the backbone stride
    and the head's 2x upsample; pass the teacher-reported grid to force an
    exact match.
    """
    if spec.family == "student_resnet":
        backbone: nn.Module = ResNet50Backbone()
    elif spec.family in ("toy_student", "toy_conv"):
        backbone = ToyBackbone(spec.backbone_out_channels)
    else:
        raise ConfigError(f"unknown student family {spec.family!r}")
    if embed_spatial is None:
        out_stride = backbone.stride // 2  # head upsamples once
        embed_spatial = (spec.input_size[0] // out_stride, spec.input_size[1] // out_stride)
    student = StudentEncoder(
        backbone,
        embed_channels=spec.embed_channels,
        input_size=spec.input_size,
        embed_spatial=embed_spatial,
        upsample_mode=spec.upsample_mode,
        seed=spec.seed,
    )
    if spec.weights_source == "external_file":
        if not spec.weights_path or not Path(spec.weights_path).is_file():
            raise WeightsError(f"student weights not found: {spec.weights_path}")
        state = torch.load(spec.weights_path, map_location="cpu", weights_only=True)
        student.load_state_dict(state)
    return student


def paper_student_spec() -> EncoderSpec:
    """The full-scale configuration: ResNet-50, 2048 -> 256 channels, 2x upsample."""
    return EncoderSpec(
        family="student_resnet",
        embed_channels=256,
        input_size=(1024, 1024),
        backbone_out_channels=2048,
    )
