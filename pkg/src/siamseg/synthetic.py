"""Synthetic paired-domain scenes for desk-scale adaptation runs.

Each scene is a textured background (class 0) with non-overlapping shapes.
Class ``k >= 1`` is always drawn with the same shape kind (rectangle, ellipse
or band, cycling) and the same base colour in both domains; the target domain
additionally gets a per-channel affine shift and an optional channel
permutation. Labels are painted from the very masks used to render the
shapes, so image and label agree exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from siamseg.core import Domain, ShapeSpec
from siamseg.data import DatasetManifest, ManifestEntry, MemoryStore, Split
from siamseg.dataset_registry import SYNTHETIC_CLASSES
from siamseg.errors import SynthesisError

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "ellipse", "band")
MAX_PLACEMENT_ATTEMPTS = 200


@dataclass(frozen=True)
class PhotometricShift:
    """``out = clip(gain * in[perm] + bias)`` per channel."""

    gains: tuple[float, ...] = (1.0, 1.0, 1.0)
    biases: tuple[float, ...] = (0.0, 0.0, 0.0)
    permutation: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if any(g <= 0 for g in self.gains):
            raise ValueError(f"gains must be positive, got {self.gains}")
        if len(self.gains) != len(self.biases):
            raise ValueError("gains and biases must have one entry per channel")
        if self.permutation is not None and sorted(self.permutation) != list(range(len(self.gains))):
            raise ValueError(f"{self.permutation} is not a permutation of the channels")

    @property
    def is_identity(self) -> bool:
        perm_identity = self.permutation is None or list(self.permutation) == list(range(len(self.gains)))
        return perm_identity and all(g == 1.0 for g in self.gains) and all(b == 0.0 for b in self.biases)

    def apply(self, image: np.ndarray) -> np.ndarray:
        if self.is_identity:
            return image
        out = image[:, :, list(self.permutation)] if self.permutation is not None else image
        out = out * np.asarray(self.gains, dtype=np.float64) + np.asarray(self.biases, dtype=np.float64)
        return np.clip(out, 0.0, 1.0)


# A shift resembling an RGB -> IRRG style modality change.
DEFAULT_SHIFT = PhotometricShift(gains=(1.15, 0.8, 0.9), biases=(0.05, -0.05, 0.1), permutation=(1, 2, 0))


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_images: int = 400
    shape: ShapeSpec = field(default_factory=lambda: ShapeSpec(64, 64, 3, 4))
    shift: PhotometricShift = DEFAULT_SHIFT
    shape_density: float = 0.35
    test_fraction: float = 0.25

    def __post_init__(self) -> None:
        if self.num_images < 1:
            raise ValueError(f"num_images must be >= 1, got {self.num_images}")
        if not 0.0 < self.shape_density <= 1.0:
            raise ValueError(f"shape_density must be in (0, 1], got {self.shape_density}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        if self.shape.channels != len(self.shift.gains):
            raise ValueError(
                f"shift has {len(self.shift.gains)} channels but shape has {self.shape.channels}"
            )

    @property
    def class_names(self) -> list[str]:
        c = self.shape.num_classes
        if c <= len(SYNTHETIC_CLASSES):
            return list(SYNTHETIC_CLASSES[:c])
        return ["background"] + [f"{SHAPE_KINDS[(k - 1) % 3]}_{k}" for k in range(1, c)]


@dataclass
class SyntheticDomain:
    manifest: DatasetManifest
    store: MemoryStore


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _class_colors(config: SynthConfig) -> np.ndarray:
    """Base colour per class; shared by both domains."""
    rng = np.random.default_rng([config.seed, 2])
    return rng.uniform(0.15, 0.85, size=(config.shape.num_classes, config.shape.channels))


def _shape_mask(kind: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    lo, hi = max(2, min(height, width) // 8), max(3, min(height, width) // 3)
    if kind == "rectangle":
        h, w = rng.integers(lo, hi + 1, size=2)
        r, c = rng.integers(0, height - h + 1), rng.integers(0, width - w + 1)
        mask[r : r + h, c : c + w] = True
    elif kind == "ellipse":
        ry, rx = rng.integers(max(1, lo // 2), max(2, hi // 2) + 1, size=2)
        cy, cx = rng.integers(ry, height - ry), rng.integers(rx, width - rx)
        yy, xx = np.ogrid[:height, :width]
        mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0] = True
    else:
        thickness = int(rng.integers(max(1, lo // 2), lo + 1))
        if rng.random() < 0.5:
            length = int(rng.integers(width // 2, width + 1))
            r, c = rng.integers(0, height - thickness + 1), rng.integers(0, width - length + 1)
            mask[r : r + thickness, c : c + length] = True
        else:
            length = int(rng.integers(height // 2, height + 1))
            r, c = rng.integers(0, height - length + 1), rng.integers(0, width - thickness + 1)
            mask[r : r + length, c : c + thickness] = True
    return mask


def render_scene(
    config: SynthConfig,
    colors: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one scene; returns (float image in [0,1], uint8 label map)."""
    spec = config.shape
    h, w, c = spec.height, spec.width, spec.channels
    label = np.zeros((h, w), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    target_cover = config.shape_density * h * w
    order = rng.permutation(np.arange(1, spec.num_classes))

    placed, attempts = 0, 0
    while occupied.sum() < target_cover or placed < len(order):
        cls = int(order[placed % len(order)])
        mask = _shape_mask(SHAPE_KINDS[(cls - 1) % len(SHAPE_KINDS)], h, w, rng)
        if (mask & occupied).any():
            attempts += 1
            if attempts > MAX_PLACEMENT_ATTEMPTS:
                raise SynthesisError(
                    f"could not place shapes at density {config.shape_density} "
                    f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
                )
            continue
        label[mask] = cls
        occupied |= mask
        placed += 1

    yy, xx = np.mgrid[:h, :w]
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(0.15, 0.4)
    texture = 0.06 * np.sin(freq * (yy + xx) + phase)[:, :, None]
    image = colors[label] + texture * (label == 0)[:, :, None]
    image = image + rng.normal(0.0, 0.03, size=(h, w, c))
    return np.clip(image, 0.0, 1.0), label


def _render_domain(config: SynthConfig, domain: Domain, colors: np.ndarray) -> SyntheticDomain:
    stream = 0 if domain == Domain.SOURCE else 1
    rng = np.random.default_rng([config.seed, stream])
    store = MemoryStore()
    n = config.num_images
    n_test = int(round(config.test_fraction * n)) if domain == Domain.TARGET else 0

    entries = []
    for i in range(n):
        image, label = render_scene(config, colors, rng)
        if domain == Domain.TARGET:
            image = config.shift.apply(image)
        parent_id = f"{domain.value}_{i:05d}"
        store.images[parent_id] = np.round(image * 255.0).astype(np.uint8)
        store.labels[parent_id] = label
        split = Split.TEST if i >= n - n_test else Split.TRAIN
        entries.append(ManifestEntry(parent_id, 0, 0, split))

    manifest = DatasetManifest(
        entries=entries,
        shape=config.shape,
        class_names=config.class_names,
        domain=domain,
        stride=config.shape.height,
        store=store,
    )
    return SyntheticDomain(manifest, store)


def synth_domain_pair(config: SynthConfig) -> tuple[SyntheticDomain, SyntheticDomain]:
    """Render the source and target domains; deterministic in ``config``."""
    if config.shape.height != config.shape.width:
        raise ValueError("synthetic tiles must be square")
    colors = _class_colors(config)
    source = _render_domain(config, Domain.SOURCE, colors)
    target = _render_domain(config, Domain.TARGET, colors)
    logger.info(
        "Rendered synthetic pair: %d source / %d target scenes of %dx%d, %d classes",
        len(source.manifest),
        len(target.manifest),
        config.shape.height,
        config.shape.width,
        config.shape.num_classes,
    )
    return source, target
