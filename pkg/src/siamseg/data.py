"""Dataset ingestion: deterministic tiling, train/test manifests and raster loading.

Directory layout for real datasets::

    <root>/images/<parent_id>.png   8-bit, 3 channels
    <root>/labels/<parent_id>.png   class index in the first channel
    <root>/manifest.tsv             written by build/save_manifest

Tiles that would overrun an image are dropped rather than snapped to the
edge, so a 6000 x 6000 parent with crop 512 / stride 512 yields 11 x 11 tiles.
"""

from __future__ import annotations

import logging
import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache, partial
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from siamseg.core import IGNORE_INDEX, Domain, DomainSample, ShapeSpec
from siamseg.errors import (
    ClassIdError,
    CorruptRasterError,
    ManifestError,
    MissingRasterError,
    RasterSizeMismatchError,
    ShapeError,
    TilingError,
)
from siamseg.palette import decode_color_labels, palette_for

logger = logging.getLogger(__name__)

IMAGE_DIR = "images"
LABEL_DIR = "labels"
MANIFEST_FILE = "manifest.tsv"
RASTER_SUFFIXES = (".png", ".tif", ".tiff")


class Split(str, Enum):
    TRAIN = "train"
    TEST = "test"


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TilingSpec:
    crop: int
    stride: int

    def __post_init__(self) -> None:
        if self.crop < 1:
            raise ValueError(f"crop must be >= 1, got {self.crop}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.stride > self.crop:
            logger.warning(
                "stride %d exceeds crop %d: pixels between tiles are never sampled",
                self.stride,
                self.crop,
            )


def tile_image(image_shape: tuple[int, int], spec: TilingSpec) -> list[tuple[int, int]]:
    """Return row-major tile origins ``(row, col)`` that fit entirely inside the image."""
    height, width = image_shape
    if height < spec.crop:
        raise TilingError(f"image height {height} is smaller than crop {spec.crop}")
    if width < spec.crop:
        raise TilingError(f"image width {width} is smaller than crop {spec.crop}")
    rows = range(0, height - spec.crop + 1, spec.stride)
    cols = range(0, width - spec.crop + 1, spec.stride)
    return [(r, c) for r in rows for c in cols]


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParentImage:
    """A full-size raster before tiling."""

    id: str
    height: int
    width: int


@dataclass(frozen=True)
class ManifestEntry:
    parent_id: str
    row: int
    col: int
    split: Split

    @property
    def sample_id(self) -> str:
        return format_sample_id(self.parent_id, self.row, self.col)


def format_sample_id(parent_id: str, row: int, col: int) -> str:
    return f"{parent_id}@{row},{col}"


def parse_sample_id(sample_id: str) -> tuple[str, int, int]:
    """Inverse of format_sample_id: ``"area1@256,0"`` -> ``("area1", 256, 0)``."""
    parent_id, sep, origin = sample_id.rpartition("@")
    if not sep:
        raise ValueError(f"not a sample id: {sample_id!r}")
    row, col = origin.split(",")
    return parent_id, int(row), int(col)


@dataclass(frozen=True)
class SplitRule:
    """Assigns every parent image to a split by explicit id lists.

    Parents listed in neither list fall back to ``default``; with no default
    they are an error.
    """

    train_ids: frozenset[str] = frozenset()
    test_ids: frozenset[str] = frozenset()
    default: Split | None = None

    @classmethod
    def all_train(cls) -> SplitRule:
        return cls(default=Split.TRAIN)

    def assign(self, parent_id: str) -> Split:
        if parent_id in self.train_ids:
            return Split.TRAIN
        if parent_id in self.test_ids:
            return Split.TEST
        if self.default is None:
            raise ManifestError(f"image {parent_id!r} is in neither the train nor the test list")
        return self.default


@dataclass
class DatasetManifest:
    """Ordered tile list for one domain, optionally bound to a raster store.

    ``ignore_value`` and ``label_offset`` describe index-encoded label rasters
    as stored on disk: pixels equal to ``ignore_value`` are ignored, every
    other value minus ``label_offset`` is the class id.
    """

    entries: list[ManifestEntry]
    shape: ShapeSpec
    class_names: list[str]
    domain: Domain
    stride: int | None = None
    label_encoding: str = "index"  # "index" or "color"
    store: RasterStore | None = field(default=None, compare=False, repr=False)
    ignore_value: int = IGNORE_INDEX
    label_offset: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.ignore_value <= 255:
            raise ValueError(f"ignore value must fit in a uint8 raster, got {self.ignore_value}")
        if self.label_offset < 0:
            raise ValueError(f"label offset must be >= 0, got {self.label_offset}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def crop(self) -> int:
        return self.shape.height

    def split(self, split: Split) -> DatasetManifest:
        """Sub-manifest holding only the entries of one split."""
        return dataclasses.replace(self, entries=[e for e in self.entries if e.split == split])

    def count(self, split: Split) -> int:
        return sum(1 for e in self.entries if e.split == split)

    def index_of(self, sample_id: str) -> int:
        parent_id, row, col = parse_sample_id(sample_id)
        for i, entry in enumerate(self.entries):
            if (entry.parent_id, entry.row, entry.col) == (parent_id, row, col):
                return i
        raise KeyError(sample_id)


def build_manifest(
    images: Iterable[ParentImage],
    spec: TilingSpec,
    split_rule: SplitRule,
    *,
    class_names: Sequence[str],
    domain: Domain,
    channels: int = 3,
    label_encoding: str = "index",
    ignore_value: int = IGNORE_INDEX,
    label_offset: int = 0,
) -> DatasetManifest:
    """Tile every parent and assign tiles to splits by parent membership."""
    parents = sorted(images, key=lambda p: p.id)
    known = {p.id for p in parents}
    unknown = (split_rule.train_ids | split_rule.test_ids) - known
    if unknown:
        raise ManifestError(f"split lists name unknown image ids: {', '.join(sorted(unknown))}")
    overlap = split_rule.train_ids & split_rule.test_ids
    if overlap:
        raise ManifestError(f"image ids listed in both splits: {', '.join(sorted(overlap))}")

    entries: list[ManifestEntry] = []
    for parent in parents:
        split = split_rule.assign(parent.id)
        try:
            origins = tile_image((parent.height, parent.width), spec)
        except TilingError as e:
            raise TilingError(f"image {parent.id!r}: {e}") from e
        entries.extend(ManifestEntry(parent.id, r, c, split) for r, c in origins)

    shape = ShapeSpec(
        height=spec.crop,
        width=spec.crop,
        channels=channels,
        num_classes=len(class_names),
    )
    return DatasetManifest(
        entries=entries,
        shape=shape,
        class_names=list(class_names),
        domain=domain,
        stride=spec.stride,
        label_encoding=label_encoding,
        ignore_value=ignore_value,
        label_offset=label_offset,
    )


def save_manifest(manifest: DatasetManifest, path: Path, *, raster_root: Path | None = None) -> Path:
    """Write the line-oriented manifest: header comments, then one tile per line.

    ``raster_root`` records where the rasters live when it is not the
    manifest's own folder.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"# domain={manifest.domain.value}",
        f"# crop={manifest.crop}",
        f"# stride={manifest.stride if manifest.stride is not None else manifest.crop}",
        f"# channels={manifest.shape.channels}",
        f"# classes={','.join(manifest.class_names)}",
        f"# labels={manifest.label_encoding}",
        f"# ignore={manifest.ignore_value}",
        f"# offset={manifest.label_offset}",
    ]
    if raster_root is not None:
        lines.append(f"# root={Path(raster_root).resolve()}")
    lines += [f"{e.parent_id}\t{e.row}\t{e.col}\t{e.split.value}" for e in manifest.entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_manifest(path: Path, *, bind_store: bool = True) -> DatasetManifest:
    """Read a manifest written by save_manifest; binds a DirectoryStore at its recorded root or folder."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    header: dict[str, str] = {}
    entries: list[ManifestEntry] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            header[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        parent_id, row, col, split = parts
        try:
            entries.append(ManifestEntry(parent_id, int(row), int(col), Split(split)))
        except ValueError as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from e

    missing = {"domain", "crop", "classes"} - header.keys()
    if missing:
        raise ManifestError(f"{path}: header lacks {', '.join(sorted(missing))}")
    class_names = header["classes"].split(",")
    crop = int(header["crop"])
    manifest = DatasetManifest(
        entries=entries,
        shape=ShapeSpec(crop, crop, int(header.get("channels", 3)), len(class_names)),
        class_names=class_names,
        domain=Domain(header["domain"]),
        stride=int(header.get("stride", crop)),
        label_encoding=header.get("labels", "index"),
        ignore_value=int(header.get("ignore", IGNORE_INDEX)),
        label_offset=int(header.get("offset", 0)),
    )
    if bind_store:
        decoder = None
        if manifest.label_encoding == "color":
            decoder = partial(decode_color_labels, palette=palette_for(class_names))
        root = Path(header["root"]) if "root" in header else path.parent
        manifest.store = DirectoryStore(root, label_decoder=decoder)
    return manifest


# ---------------------------------------------------------------------------
# Raster stores
# ---------------------------------------------------------------------------


class RasterStore(Protocol):
    """Read-only access to full-size parent rasters."""

    def read_image(self, parent_id: str) -> np.ndarray:
        """Return the parent image as uint8 ``H x W x 3``."""
        ...

    def read_label(self, parent_id: str) -> np.ndarray | None:
        """Return the parent label map as uint8 ``H x W``, or None if absent."""
        ...


def _find_raster(folder: Path, parent_id: str) -> Path | None:
    for suffix in RASTER_SUFFIXES:
        candidate = folder / f"{parent_id}{suffix}"
        if candidate.exists():
            return candidate
    return None


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            return np.asarray(img)
    except (UnidentifiedImageError, OSError, SyntaxError) as e:
        raise CorruptRasterError(f"cannot decode raster {path}: {e}") from e


class DirectoryStore:
    """Rasters laid out as ``images/<id>.png`` and ``labels/<id>.png`` under a root."""

    def __init__(
        self,
        root: Path,
        cache_size: int = 8,
        label_decoder: Callable[[np.ndarray], np.ndarray] | None = None,
    ):
        self.root = Path(root)
        self.label_decoder = label_decoder
        self._read = lru_cache(maxsize=cache_size)(self._read_uncached)

    def _read_uncached(self, kind: str, parent_id: str) -> np.ndarray | None:
        path = _find_raster(self.root / kind, parent_id)
        if path is None:
            if kind == LABEL_DIR:
                return None
            raise MissingRasterError(f"no image raster for {parent_id!r} under {self.root / kind}")
        raster = _decode(path)
        if kind == LABEL_DIR and raster.ndim == 3 and self.label_decoder is not None:
            return self.label_decoder(raster)
        return raster

    def read_image(self, parent_id: str) -> np.ndarray:
        raw = self._read(IMAGE_DIR, parent_id)
        assert raw is not None
        if raw.ndim == 2:
            raw = np.repeat(raw[:, :, None], 3, axis=2)
        return raw[:, :, :3]

    def read_label(self, parent_id: str) -> np.ndarray | None:
        raw = self._read(LABEL_DIR, parent_id)
        if raw is None:
            return None
        return raw if raw.ndim == 2 else raw[:, :, 0]

    def scan(self) -> list[ParentImage]:
        """List every parent image under ``images/`` with its size (header read only)."""
        folder = self.root / IMAGE_DIR
        if not folder.is_dir():
            return []
        parents = []
        for path in sorted(folder.iterdir()):
            if path.suffix.lower() not in RASTER_SUFFIXES:
                continue
            try:
                with Image.open(path) as img:
                    width, height = img.size
            except (UnidentifiedImageError, OSError) as e:
                raise CorruptRasterError(f"cannot read raster header {path}: {e}") from e
            parents.append(ParentImage(path.stem, height, width))
        return parents


@dataclass
class MemoryStore:
    """In-memory rasters, used by the synthetic generator."""

    images: dict[str, np.ndarray] = field(default_factory=dict)
    labels: dict[str, np.ndarray] = field(default_factory=dict)

    def read_image(self, parent_id: str) -> np.ndarray:
        try:
            return self.images[parent_id]
        except KeyError:
            raise MissingRasterError(f"no image {parent_id!r} in memory store") from None

    def read_label(self, parent_id: str) -> np.ndarray | None:
        return self.labels.get(parent_id)

    def save(self, root: Path) -> list[Path]:
        """Write every raster as PNG in the directory layout DirectoryStore reads."""
        root = Path(root)
        (root / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
        (root / LABEL_DIR).mkdir(parents=True, exist_ok=True)
        written = []
        for parent_id in sorted(self.images):
            path = root / IMAGE_DIR / f"{parent_id}.png"
            Image.fromarray(self.images[parent_id]).save(path)
            written.append(path)
            if parent_id in self.labels:
                path = root / LABEL_DIR / f"{parent_id}.png"
                Image.fromarray(self.labels[parent_id]).save(path)
                written.append(path)
        return written


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def normalize_label(raw: np.ndarray, manifest: DatasetManifest, sample_id: str = "") -> np.ndarray:
    """Map a stored label tile to class ids ``0..C-1`` with IGNORE_INDEX for void pixels.

    Color-encoded labels are already decoded by the store; index-encoded ones
    go through the manifest's ignore value and offset.
    """
    label = raw.astype(np.int64)
    if manifest.label_encoding == "index":
        void = label == manifest.ignore_value
        label = np.where(void, IGNORE_INDEX, label - manifest.label_offset)
    else:
        void = label == IGNORE_INDEX
    c = manifest.shape.num_classes
    bad = ~void & ((label < 0) | (label >= c))
    if bad.any():
        values = sorted({int(v) for v in raw[bad]})[:5]
        raise ClassIdError(
            f"tile {sample_id}: label values {values} are neither class ids 0..{c - 1} "
            f"(after offset {manifest.label_offset}) nor the ignore value {manifest.ignore_value}"
        )
    return label


def load_sample(manifest: DatasetManifest, index: int, *, evaluation: bool = False) -> DomainSample:
    """Crop one tile out of its parent raster.

    Source samples always carry their label. Target samples carry one only in
    evaluation mode, and only when ground truth exists.
    """
    if not 0 <= index < len(manifest):
        raise IndexError(f"index {index} out of range for manifest of {len(manifest)} tiles")
    if manifest.store is None:
        raise ManifestError("manifest is not bound to a raster store")

    entry = manifest.entries[index]
    crop = manifest.crop
    raw_image = manifest.store.read_image(entry.parent_id)
    rows = slice(entry.row, entry.row + crop)
    cols = slice(entry.col, entry.col + crop)
    tile = raw_image[rows, cols]
    if tile.shape[:2] != (crop, crop):
        raise ShapeError(
            f"tile {entry.sample_id} overruns parent of size {raw_image.shape[:2]}"
        )
    image = tile.astype(np.float32) / 255.0

    label = None
    wants_label = manifest.domain == Domain.SOURCE or evaluation
    if wants_label:
        raw_label = manifest.store.read_label(entry.parent_id)
        if raw_label is None:
            if manifest.domain == Domain.SOURCE:
                raise MissingRasterError(f"source image {entry.parent_id!r} has no label raster")
        else:
            if raw_label.shape[:2] != raw_image.shape[:2]:
                raise RasterSizeMismatchError(
                    f"{entry.parent_id!r}: label {raw_label.shape[:2]} vs image {raw_image.shape[:2]}"
                )
            label = normalize_label(raw_label[rows, cols], manifest, entry.sample_id)

    return DomainSample(image=image, label=label, domain=manifest.domain, id=entry.sample_id)
