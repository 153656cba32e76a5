"""Training-time augmentation: cross-domain ClassMix and Siamese view pairs.

Every op is a pure function of ``(input, config, seed)``. Random parameters
are drawn first into small records (``ViewParams``, ``JitterParams``) and then
applied, so any view can be replayed from its provenance.

Images are float tensors ``C x H x W`` in [0, 1]; label maps are integer
tensors ``H x W``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any

import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from siamseg.core import IGNORE_INDEX
from siamseg.errors import AugmentationError, ShapeError

logger = logging.getLogger(__name__)

CROP_ATTEMPTS = 10
# Below this sigma the blur is the identity.
MIN_BLUR_SIGMA = 0.1
JITTER_OPS = ("brightness", "contrast", "saturation", "hue")


def derive_seed(global_seed: int, step: int, sample_index: int, branch_tag: str) -> int:
    """Stable per-sample seed, independent of worker scheduling."""
    key = f"{global_seed}:{step}:{sample_index}:{branch_tag}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") & ((1 << 63) - 1)


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def _uniform(g: torch.Generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * torch.rand(1, generator=g, dtype=torch.float64).item()


def _coin(g: torch.Generator, p: float) -> bool:
    return torch.rand(1, generator=g, dtype=torch.float64).item() < p


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JitterStrengths:
    brightness: float = 0.25
    contrast: float = 0.25
    saturation: float = 0.25
    hue: float = 0.25

    def __post_init__(self) -> None:
        for op in JITTER_OPS:
            if getattr(self, op) < 0:
                raise ValueError(f"jitter strength {op} must be >= 0")
        if self.hue > 0.5:
            raise ValueError("hue strength must be <= 0.5 turns")


@dataclass(frozen=True)
class SimAugConfig:
    """Siamese view pipeline: resized crop, flips, color jitter, grayscale, blur."""

    crop_size: tuple[int, int] = (512, 512)
    scale_range: tuple[float, float] = (0.6, 1.0)
    jitter: JitterStrengths = field(default_factory=JitterStrengths)
    jitter_prob: float = 0.6
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.15, 1.15)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5

    def __post_init__(self) -> None:
        for name in ("jitter_prob", "grayscale_prob", "blur_prob", "hflip_prob", "vflip_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"scale_range must satisfy 0 < low <= high <= 1, got {self.scale_range}")
        if self.blur_sigma[0] <= 0 or self.blur_sigma[0] > self.blur_sigma[1]:
            raise ValueError(f"invalid blur_sigma range {self.blur_sigma}")


@dataclass(frozen=True)
class GeometricAugConfig:
    """Random rescale, crop back to the tile size and horizontal flip for training tiles."""

    enabled: bool = False
    ratio_range: tuple[float, float] = (0.5, 2.0)
    hflip_prob: float = 0.5

    def __post_init__(self) -> None:
        lo, hi = self.ratio_range
        if not 0.0 < lo <= hi:
            raise ValueError(f"ratio_range must satisfy 0 < low <= high, got {self.ratio_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")


@dataclass(frozen=True)
class SelfTrainingAugConfig:
    """Strong augmentation applied to mixed images before the student sees them."""

    jitter_strength: float = 0.2
    jitter_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.15, 1.15)

    def __post_init__(self) -> None:
        if not 0.0 <= self.jitter_prob <= 1.0 or not 0.0 <= self.blur_prob <= 1.0:
            raise ValueError("augmentation probabilities must lie in [0, 1]")
        if self.jitter_strength < 0:
            raise ValueError("jitter_strength must be >= 0")


# ---------------------------------------------------------------------------
# Photometric primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JitterParams:
    """Drawn jitter factors; None means the op is skipped."""

    brightness: float | None = None
    contrast: float | None = None
    saturation: float | None = None
    hue: float | None = None
    order: tuple[str, ...] = JITTER_OPS


def sample_jitter(strengths: JitterStrengths, g: torch.Generator) -> JitterParams:
    factors: dict[str, float | None] = {}
    for op in ("brightness", "contrast", "saturation"):
        s = getattr(strengths, op)
        factors[op] = _uniform(g, max(0.0, 1.0 - s), 1.0 + s) if s > 0 else None
    factors["hue"] = _uniform(g, -strengths.hue, strengths.hue) if strengths.hue > 0 else None
    perm = torch.randperm(len(JITTER_OPS), generator=g).tolist()
    return JitterParams(**factors, order=tuple(JITTER_OPS[i] for i in perm))


def apply_jitter(image: torch.Tensor, params: JitterParams) -> torch.Tensor:
    out = image
    for op in params.order:
        factor = getattr(params, op)
        if factor is None:
            continue
        if op == "brightness":
            out = TF.adjust_brightness(out, factor)
        elif op == "contrast":
            out = TF.adjust_contrast(out, factor)
        elif op == "saturation":
            out = TF.adjust_saturation(out, factor)
        else:
            out = TF.adjust_hue(out, factor)
    return out.clamp(0.0, 1.0)


def photometric_jitter(image: torch.Tensor, strengths: JitterStrengths, rng_seed: int) -> torch.Tensor:
    """Brightness/contrast/saturation/hue perturbation in a random order, clamped to [0, 1]."""
    return apply_jitter(image, sample_jitter(strengths, _generator(rng_seed)))


def blur_kernel_size(sigma: float) -> int:
    return 2 * math.ceil(3.0 * sigma) + 1


def apply_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    if sigma < MIN_BLUR_SIGMA:
        return image
    k = blur_kernel_size(sigma)
    # reflect padding needs pad < size
    limit = 2 * (min(image.shape[-2:]) - 1) + 1
    k = min(k, limit if limit % 2 == 1 else limit - 1)
    if k < 3:
        return image
    return TF.gaussian_blur(image, kernel_size=[k, k], sigma=[sigma, sigma])


def gaussian_blur(image: torch.Tensor, sigma_range: tuple[float, float], rng_seed: int) -> torch.Tensor:
    """Separable Gaussian blur with reflect padding, sigma drawn from ``sigma_range``."""
    if sigma_range[0] <= 0 or sigma_range[0] > sigma_range[1]:
        raise ValueError(f"invalid sigma range {sigma_range}")
    sigma = _uniform(_generator(rng_seed), *sigma_range)
    return apply_blur(image, sigma)


# ---------------------------------------------------------------------------
# Siamese views
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ViewParams:
    """Everything needed to replay one view from its source image."""

    crop_top: int
    crop_left: int
    crop_side: int
    hflip: bool
    vflip: bool
    jitter: JitterParams | None
    grayscale: bool
    blur_sigma: float | None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class ViewPair:
    view1: torch.Tensor
    view2: torch.Tensor
    provenance: tuple[ViewParams, ViewParams]


def _sample_crop(height: int, width: int, scale_range: tuple[float, float], g: torch.Generator) -> tuple[int, int, int]:
    lo, hi = scale_range
    area = height * width
    for _ in range(CROP_ATTEMPTS):
        # square crops: the side never exceeds the short edge of a non-square image
        side = min(int(round(math.sqrt(_uniform(g, lo, hi) * area))), height, width)
        if side >= 1:
            top = int(torch.randint(0, height - side + 1, (1,), generator=g).item())
            left = int(torch.randint(0, width - side + 1, (1,), generator=g).item())
            return top, left, side
        lo = (lo + hi) / 2
    raise AugmentationError(
        f"no valid crop in a {height}x{width} image for scale range {scale_range} "
        f"after {CROP_ATTEMPTS} attempts"
    )


def sample_view_params(height: int, width: int, config: SimAugConfig, g: torch.Generator) -> ViewParams:
    top, left, side = _sample_crop(height, width, config.scale_range, g)
    hflip = _coin(g, config.hflip_prob)
    vflip = _coin(g, config.vflip_prob)
    jitter = sample_jitter(config.jitter, g) if _coin(g, config.jitter_prob) else None
    grayscale = _coin(g, config.grayscale_prob)
    blur_sigma = _uniform(g, *config.blur_sigma) if _coin(g, config.blur_prob) else None
    return ViewParams(top, left, side, hflip, vflip, jitter, grayscale, blur_sigma)


def replay_view(image: torch.Tensor, params: ViewParams, crop_size: tuple[int, int]) -> torch.Tensor:
    """Apply recorded view parameters: crop -> flips -> jitter -> grayscale -> blur."""
    out = image[:, params.crop_top : params.crop_top + params.crop_side,
                params.crop_left : params.crop_left + params.crop_side]
    if tuple(out.shape[-2:]) != tuple(crop_size):
        out = TF.resize(out, list(crop_size), antialias=True)
    if params.hflip:
        out = TF.hflip(out)
    if params.vflip:
        out = TF.vflip(out)
    if params.jitter is not None:
        out = apply_jitter(out, params.jitter)
    if params.grayscale:
        out = TF.rgb_to_grayscale(out, num_output_channels=out.shape[0])
    if params.blur_sigma is not None:
        out = apply_blur(out, params.blur_sigma)
    return out.clamp(0.0, 1.0)


def make_views(x_t: torch.Tensor, config: SimAugConfig, rng_seed: int) -> ViewPair:
    """Two independent augmentation draws of the same target image."""
    if x_t.ndim != 3:
        raise ShapeError(f"expected a C x H x W image, got {tuple(x_t.shape)}")
    g = _generator(rng_seed)
    h, w = x_t.shape[-2:]
    p1 = sample_view_params(h, w, config, g)
    p2 = sample_view_params(h, w, config, g)
    return ViewPair(
        view1=replay_view(x_t, p1, config.crop_size),
        view2=replay_view(x_t, p2, config.crop_size),
        provenance=(p1, p2),
    )


# ---------------------------------------------------------------------------
# Geometric training augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeometricParams:
    scale: float
    crop_top: int
    crop_left: int
    hflip: bool


def _scaled_size(height: int, width: int, scale: float) -> tuple[int, int]:
    return max(1, int(round(height * scale))), max(1, int(round(width * scale)))


def sample_geometric(height: int, width: int, config: GeometricAugConfig, g: torch.Generator) -> GeometricParams:
    scale = _uniform(g, *config.ratio_range)
    sh, sw = _scaled_size(height, width, scale)
    top = int(torch.randint(0, max(sh - height, 0) + 1, (1,), generator=g).item())
    left = int(torch.randint(0, max(sw - width, 0) + 1, (1,), generator=g).item())
    return GeometricParams(scale, top, left, _coin(g, config.hflip_prob))


def apply_geometric(
    image: torch.Tensor,
    label: torch.Tensor | None,
    params: GeometricParams,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Resize -> crop to the input size -> flip -> pad (image 0, label IGNORE_INDEX).

    Images resize bilinearly, labels with nearest neighbour.
    """
    height, width = image.shape[-2:]
    sh, sw = _scaled_size(height, width, params.scale)
    rows = slice(params.crop_top, params.crop_top + height)
    cols = slice(params.crop_left, params.crop_left + width)

    resized = TF.resize(image, [sh, sw], antialias=True)[:, rows, cols]
    if params.hflip:
        resized = TF.hflip(resized)
    out_image = torch.zeros_like(image)
    out_image[:, : resized.shape[-2], : resized.shape[-1]] = resized.clamp(0.0, 1.0)

    if label is None:
        return out_image, None
    scaled = TF.resize(label.unsqueeze(0).float(), [sh, sw], interpolation=InterpolationMode.NEAREST)
    scaled = scaled[0, rows, cols].round().to(label.dtype)
    if params.hflip:
        scaled = TF.hflip(scaled)
    out_label = torch.full_like(label, IGNORE_INDEX)
    out_label[: scaled.shape[-2], : scaled.shape[-1]] = scaled
    return out_image, out_label


def geometric_transform(
    image: torch.Tensor,
    label: torch.Tensor | None,
    config: GeometricAugConfig,
    rng_seed: int,
) -> tuple[torch.Tensor, torch.Tensor | None]:
    """Seeded rescale/crop/flip applied identically to a tile and its label map."""
    if image.ndim != 3:
        raise ShapeError(f"expected a C x H x W image, got {tuple(image.shape)}")
    if label is not None and tuple(label.shape) != tuple(image.shape[-2:]):
        raise ShapeError(f"label {tuple(label.shape)} does not match image {tuple(image.shape[-2:])}")
    params = sample_geometric(image.shape[-2], image.shape[-1], config, _generator(rng_seed))
    return apply_geometric(image, label, params)


# ---------------------------------------------------------------------------
# Cross-domain mixing
# ---------------------------------------------------------------------------


@dataclass
class MixResult:
    image: torch.Tensor
    label: torch.Tensor
    mask: torch.Tensor  # bool H x W, True = pixel taken from source


def class_mix(
    source_image: torch.Tensor,
    source_label: torch.Tensor,
    target_image: torch.Tensor,
    target_pseudo: torch.Tensor,
    rng_seed: int,
) -> MixResult:
    """Paste the pixels of ceil(k/2) of the k source classes onto the target image."""
    if source_image.shape != target_image.shape:
        raise ShapeError(f"source image {tuple(source_image.shape)} != target image {tuple(target_image.shape)}")
    if source_label.shape != source_image.shape[-2:] or target_pseudo.shape != source_label.shape:
        raise ShapeError("label maps must match the image spatial shape")

    classes = torch.unique(source_label)
    classes = classes[classes != IGNORE_INDEX]
    if classes.numel() == 0:
        empty = torch.zeros_like(source_label, dtype=torch.bool)
        return MixResult(target_image.clone(), target_pseudo.clone(), empty)

    g = _generator(rng_seed)
    n_pick = math.ceil(classes.numel() / 2)
    picked = classes[torch.randperm(classes.numel(), generator=g)[:n_pick]]
    mask = torch.isin(source_label, picked)

    image = torch.where(mask.unsqueeze(0), source_image, target_image)
    label = torch.where(mask, source_label, target_pseudo)
    return MixResult(image, label, mask)


def strong_transform(image: torch.Tensor, config: SelfTrainingAugConfig, rng_seed: int) -> torch.Tensor:
    """Color jitter then Gaussian blur, each applied with its configured probability."""
    g = _generator(rng_seed)
    out = image
    if _coin(g, config.jitter_prob) and config.jitter_strength > 0:
        s = config.jitter_strength
        out = apply_jitter(out, sample_jitter(JitterStrengths(s, s, s, min(s, 0.5)), g))
    if _coin(g, config.blur_prob):
        out = apply_blur(out, _uniform(g, *config.blur_sigma))
    return out
