"""Class palettes for label rendering and for decoding color-coded label rasters.

The ISPRS colors follow the benchmark's legend convention. Classes without a
registered color fall back to matplotlib's ``tab10`` cycle.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from matplotlib import colormaps

from siamseg.core import IGNORE_INDEX
from siamseg.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

Color = tuple[int, int, int]

IGNORE_COLOR: Color = (0, 0, 0)

KNOWN_COLORS: dict[str, Color] = {
    # ISPRS Potsdam / Vaihingen
    "clutter": (255, 0, 0),
    "car": (255, 255, 0),
    "tree": (0, 255, 0),
    "low_vegetation": (0, 255, 255),
    "building": (0, 0, 255),
    "impervious_surface": (255, 255, 255),
    # LoveDA (building shares the ISPRS blue)
    "background": (255, 255, 255),
    "road": (255, 255, 0),
    "water": (64, 128, 255),
    "barren": (159, 129, 183),
    "forest": (0, 255, 0),
    "agriculture": (255, 195, 128),
    # synthetic scenes
    "rectangle": (230, 25, 75),
    "ellipse": (60, 180, 75),
    "band": (0, 130, 200),
}


@dataclass(frozen=True)
class Palette:
    class_names: tuple[str, ...]
    colors: tuple[Color, ...]

    def __post_init__(self) -> None:
        if len(self.class_names) != len(self.colors):
            raise ConfigError(f"palette has {len(self.colors)} colors for {len(self.class_names)} classes")
        for name, color in zip(self.class_names, self.colors):
            if len(color) != 3 or any(not 0 <= c <= 255 for c in color):
                raise ConfigError(f"palette.{name}: expected three values in [0, 255], got {color}")

    def __len__(self) -> int:
        return len(self.colors)

    def lut(self) -> np.ndarray:
        """256-entry lookup table; unused ids (and the ignore value) map to black."""
        table = np.zeros((256, 3), dtype=np.uint8)
        table[: len(self.colors)] = np.asarray(self.colors, dtype=np.uint8)
        table[IGNORE_INDEX] = IGNORE_COLOR
        return table

    def hex_colors(self) -> list[str]:
        return ["#{:02x}{:02x}{:02x}".format(*c) for c in self.colors]


def _fallback(index: int) -> Color:
    r, g, b, _ = colormaps["tab10"](index % 10)
    return (int(round(r * 255)), int(round(g * 255)), int(round(b * 255)))


def palette_for(class_names: Sequence[str]) -> Palette:
    """Known colors where registered, ``tab10`` otherwise."""
    colors = tuple(KNOWN_COLORS.get(name, _fallback(i)) for i, name in enumerate(class_names))
    return Palette(tuple(class_names), colors)


def load_palette(path: Path, class_names: Sequence[str]) -> Palette:
    """Read ``{class_name: [r, g, b]}`` from YAML; unlisted classes keep their default color."""
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"palette file not found: {path}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: palette must map class names to colors")
    unknown = set(raw) - set(class_names)
    if unknown:
        raise ConfigError(f"palette.{sorted(unknown)[0]}: not a class of this dataset")
    default = palette_for(class_names)
    colors = tuple(
        tuple(int(c) for c in raw[name]) if name in raw else color
        for name, color in zip(class_names, default.colors)
    )
    return Palette(tuple(class_names), colors)  # type: ignore[arg-type]


def colorize(labels: np.ndarray, palette: Palette) -> np.ndarray:
    """Map an ``H x W`` id map to an ``H x W x 3`` uint8 image."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ShapeError(f"expected an H x W label map, got shape {labels.shape}")
    return palette.lut()[labels.astype(np.int64).clip(0, 255)]


def decode_color_labels(rgb: np.ndarray, palette: Palette) -> np.ndarray:
    """Inverse of ``colorize`` for color-coded label rasters; unknown colors become the ignore id."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ShapeError(f"expected an H x W x 3 color label, got shape {rgb.shape}")
    packed = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    out = np.full(packed.shape, IGNORE_INDEX, dtype=np.uint8)
    for class_id, (r, g, b) in enumerate(palette.colors):
        out[packed == ((r << 16) | (g << 8) | b)] = class_id
    unmatched = int((out == IGNORE_INDEX).sum())
    if unmatched:
        logger.warning("%d label pixels match no palette color; marked as ignore", unmatched)
    return out
