"""Student segmentation network, EMA teacher, and the Siamese contrastive heads.

The backbone is pluggable through ``BACKBONES``; ``tiny`` is a 4-stage
convolutional encoder (strides 4/8/16/32) small enough for CPU runs. A
pretrained mix-transformer can be registered under one of the reserved
``mit-b*`` names without touching the trainer.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from siamseg.core import ShapeSpec
from siamseg.errors import ParameterMismatchError, ShapeError

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------


DEEPEST_STRIDE = 32


def _conv_bn(in_ch: int, out_ch: int, stride: int = 1, kernel: int = 3) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class TinyBackbone(nn.Module):
    """Four conv stages at strides 4, 8, 16 and 32; returns the feature pyramid."""

    def __init__(self, in_channels: int = 3, widths: tuple[int, ...] = (16, 32, 64, 128)):
        super().__init__()
        self.widths = widths
        self.stages = nn.ModuleList()
        prev = in_channels
        for i, width in enumerate(widths):
            stride = 4 if i == 0 else 2
            self.stages.append(
                nn.Sequential(
                    _conv_bn(prev, width, stride=stride, kernel=7 if i == 0 else 3),
                    _conv_bn(width, width),
                )
            )
            prev = width

    @property
    def out_channels(self) -> tuple[int, ...]:
        return self.widths

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class SegFormerStyleHead(nn.Module):
    """Project every pyramid level to a shared width, upsample, fuse, classify."""

    def __init__(self, in_channels: tuple[int, ...], num_classes: int, embed_dim: int = 64):
        super().__init__()
        self.num_classes = num_classes
        # no bias: the fuse BatchNorm would cancel it
        self.proj = nn.ModuleList(nn.Conv2d(c, embed_dim, 1, bias=False) for c in in_channels)
        self.fuse = _conv_bn(embed_dim * len(in_channels), embed_dim, kernel=1)
        self.classifier = nn.Conv2d(embed_dim, num_classes, 1)

    def forward(self, features: list[torch.Tensor], out_size: tuple[int, int]) -> torch.Tensor:
        size = features[0].shape[-2:]
        projected = [
            F.interpolate(proj(f), size=size, mode="bilinear", align_corners=False)
            for proj, f in zip(self.proj, features)
        ]
        fused = self.fuse(torch.cat(projected, dim=1))
        logits = self.classifier(fused)
        return F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)


class SegmentationModel(nn.Module):
    """Backbone ``f`` plus decode head; ``forward`` returns per-pixel class scores."""

    def __init__(self, backbone: nn.Module, decode_head: nn.Module, shape: ShapeSpec, architecture: str):
        super().__init__()
        self.backbone = backbone
        self.decode_head = decode_head
        self.shape = shape
        self.architecture = architecture

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.shape.channels:
            raise ShapeError(
                f"expected N x {self.shape.channels} x H x W input, got {tuple(x.shape)}"
            )
        return self.decode_head(self.backbone(x), tuple(x.shape[-2:]))


# Teachers are SegmentationModels that only ever change through ema_update.
TeacherModel = SegmentationModel


def forward_segmentation(model: SegmentationModel, image: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the class scores, ``N x C x H x W``."""
    return torch.softmax(model(image), dim=1)


# ---------------------------------------------------------------------------
# Backbone registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "tiny"
    init_seed: int = 0
    embed_dim: int = 64
    proj_hidden: int = 256
    proj_dim: int = 128
    pred_hidden: int = 64


BackboneFactory = Callable[[ShapeSpec, ModelConfig], SegmentationModel]
BACKBONES: dict[str, BackboneFactory] = {}
RESERVED_BACKBONES = tuple(f"mit-b{i}" for i in range(6))


def register_backbone(name: str) -> Callable[[BackboneFactory], BackboneFactory]:
    def _register(factory: BackboneFactory) -> BackboneFactory:
        BACKBONES[name] = factory
        return factory

    return _register


@register_backbone("tiny")
def tiny_backbone(shape: ShapeSpec, config: ModelConfig | None = None) -> SegmentationModel:
    """Small conv encoder with a multi-scale fusion head; well under 2M parameters."""
    config = config or ModelConfig()
    backbone = TinyBackbone(shape.channels)
    head = SegFormerStyleHead(backbone.out_channels, shape.num_classes, config.embed_dim)
    return SegmentationModel(backbone, head, shape, "tiny")


def build_segmentor(shape: ShapeSpec, config: ModelConfig) -> SegmentationModel:
    """Construct a student from the registry with seeded initialization."""
    if config.backbone not in BACKBONES:
        if config.backbone in RESERVED_BACKBONES:
            raise NotImplementedError(
                f"backbone {config.backbone!r} is reserved but not bundled; "
                f"register a factory with @register_backbone({config.backbone!r})"
            )
        raise KeyError(f"unknown backbone {config.backbone!r}; available: {', '.join(BACKBONES)}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.init_seed)
        return BACKBONES[config.backbone](shape, config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Contrastive heads
# ---------------------------------------------------------------------------


def projection_mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden, bias=False),
        nn.BatchNorm1d(hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, hidden, bias=False),
        nn.BatchNorm1d(hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, out_dim, bias=False),
        nn.BatchNorm1d(out_dim),
    )


def prediction_mlp(dim: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(dim, hidden, bias=False),
        nn.BatchNorm1d(hidden),
        nn.ReLU(inplace=True),
        nn.Linear(hidden, dim),
    )


class ContrastiveHeads(nn.Module):
    """Projection head and prediction head ``h`` on top of the student's backbone.

    The backbone is held by reference and is not part of ``parameters()``:
    its weights are the student's own storage.
    """

    def __init__(
        self,
        backbone: nn.Module,
        feature_dim: int,
        crop_size: tuple[int, int],
        config: ModelConfig | None = None,
        predictor: nn.Module | None = None,
    ):
        super().__init__()
        config = config or ModelConfig()
        object.__setattr__(self, "backbone", backbone)
        self.crop_size = tuple(crop_size)
        self.projector = projection_mlp(feature_dim, config.proj_hidden, config.proj_dim)
        self.predictor = predictor if predictor is not None else prediction_mlp(config.proj_dim, config.pred_hidden)

    def encode(self, view: torch.Tensor) -> torch.Tensor:
        """Encoder E: backbone, global average pool of the last stage, projection."""
        if view.ndim != 4 or tuple(view.shape[-2:]) != self.crop_size:
            raise ShapeError(f"expected N x C x {self.crop_size[0]} x {self.crop_size[1]} views, got {tuple(view.shape)}")
        pooled = self.backbone(view)[-1].mean(dim=(2, 3))
        return self.projector(pooled)

    def forward(self, view: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.encode(view)
        return z, self.predictor(z)


def forward_contrastive(heads: ContrastiveHeads, view: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(z, p)`` with ``z = projection(pool(f(view)))`` and ``p = h(z)``."""
    return heads(view)


def build_heads(student: SegmentationModel, crop_size: tuple[int, int], config: ModelConfig) -> ContrastiveHeads:
    feature_dim = student.backbone.out_channels[-1]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.init_seed + 1)
        return ContrastiveHeads(student.backbone, feature_dim, crop_size, config)


# ---------------------------------------------------------------------------
# EMA teacher
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.99

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"EMA alpha must be in [0, 1], got {self.alpha}")


def init_teacher_from_student(student: SegmentationModel) -> TeacherModel:
    """Deep copy of the student with gradients disabled."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    teacher.eval()
    return teacher


def _check_names(teacher: nn.Module, student: nn.Module) -> None:
    t_names = {n for n, _ in teacher.named_parameters()}
    s_names = {n for n, _ in student.named_parameters()}
    if t_names != s_names:
        diff = sorted(t_names ^ s_names)
        raise ParameterMismatchError(f"teacher/student parameter names differ: {', '.join(diff)}")


@torch.no_grad()
def ema_update(teacher: TeacherModel, student: SegmentationModel, config: EmaConfig) -> TeacherModel:
    """``teacher = alpha * teacher + (1 - alpha) * student`` for every parameter.

    Normalization buffers (running statistics) are copied from the student.
    """
    _check_names(teacher, student)
    alpha = config.alpha
    student_params = dict(student.named_parameters())
    for name, t_param in teacher.named_parameters():
        s_param = student_params[name].detach()
        t_param.mul_(alpha).add_(s_param, alpha=1.0 - alpha)
    student_buffers = dict(student.named_buffers())
    for name, t_buf in teacher.named_buffers():
        t_buf.copy_(student_buffers[name])
    return teacher
