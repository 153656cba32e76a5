"""Dataset Registry: pre-defined dataset profiles and cross-domain tasks.

This module provides:
1. Profiles for the ISPRS Potsdam/Vaihingen and LoveDA urban/rural domains
   (class order, tiling, default split, opaque sensor metadata)
2. The cross-domain adaptation tasks built from those profiles
3. Lookup helpers used by the config loader, the CLI and the MCP tools
"""

from __future__ import annotations

from dataclasses import dataclass, field

from siamseg.core import IGNORE_INDEX
from siamseg.data import Split, SplitRule, TilingSpec


# ---------------------------------------------------------------------------
# Class orders
# ---------------------------------------------------------------------------

ISPRS_CLASSES = (
    "clutter",
    "car",
    "tree",
    "low_vegetation",
    "building",
    "impervious_surface",
)

LOVEDA_CLASSES = (
    "background",
    "building",
    "road",
    "water",
    "barren",
    "forest",
    "agriculture",
)

SYNTHETIC_CLASSES = ("background", "rectangle", "ellipse", "band")


# ---------------------------------------------------------------------------
# Profile definition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetProfile:
    """A pre-defined dataset domain."""

    key: str
    name: str
    class_names: tuple[str, ...]
    crop: int
    stride: int
    modality: str  # "IRRG" | "RGB" | "synthetic"
    gsd: str  # carried verbatim, never interpreted
    train_ids: tuple[str, ...] = ()
    test_ids: tuple[str, ...] = ()
    # Label rasters as stored: this raw value marks void pixels, every other
    # raw value minus label_offset is the class id.
    ignore_index: int = IGNORE_INDEX
    label_offset: int = 0
    notes: str = ""
    metadata: dict[str, int] = field(default_factory=dict)

    @property
    def tiling(self) -> TilingSpec:
        return TilingSpec(crop=self.crop, stride=self.stride)

    def split_rule(self) -> SplitRule:
        if not self.train_ids and not self.test_ids:
            return SplitRule(default=Split.TRAIN)
        return SplitRule(train_ids=frozenset(self.train_ids), test_ids=frozenset(self.test_ids))


@dataclass(frozen=True)
class AdaptationTask:
    key: str
    name: str
    source: str
    target: str


# ---------------------------------------------------------------------------
# Pre-defined profiles
# ---------------------------------------------------------------------------

DATASET_PROFILES: dict[str, DatasetProfile] = {}
TASKS: dict[str, AdaptationTask] = {}


def _register(p: DatasetProfile) -> DatasetProfile:
    DATASET_PROFILES[p.key] = p
    return p


def _register_task(t: AdaptationTask) -> AdaptationTask:
    TASKS[t.key] = t
    return t


# One plausible Potsdam split: 24 train / 14 test parents of 6000 x 6000,
# i.e. 2904 / 1694 tiles at crop 512 / stride 512.
_POTSDAM_TRAIN = (
    "2_10", "2_11", "2_12", "3_10", "3_11", "3_12", "4_10", "4_11",
    "4_12", "5_10", "5_11", "5_12", "6_7", "6_8", "6_9", "6_10",
    "6_11", "6_12", "7_7", "7_8", "7_9", "7_10", "7_11", "7_12",
)
_POTSDAM_TEST = (
    "2_13", "2_14", "3_13", "3_14", "4_13", "4_14", "4_15",
    "5_13", "5_14", "5_15", "6_13", "6_14", "6_15", "7_13",
)

# One plausible Vaihingen split over the 33 labelled areas.
_VAIHINGEN_TRAIN = tuple(
    f"area{i}" for i in (1, 3, 5, 7, 11, 13, 15, 17, 21, 23, 26, 28, 30, 32, 34, 37)
)
_VAIHINGEN_TEST = tuple(
    f"area{i}" for i in (2, 4, 6, 8, 10, 12, 14, 16, 20, 22, 24, 27, 29, 31, 33, 35, 38)
)

_register(
    DatasetProfile(
        key="potsdam_irrg",
        name="ISPRS Potsdam (IR-R-G)",
        class_names=ISPRS_CLASSES,
        crop=512,
        stride=512,
        modality="IRRG",
        gsd="5 meters",
        train_ids=_POTSDAM_TRAIN,
        test_ids=_POTSDAM_TEST,
        notes="38 parents of 6000x6000; 4598 tiles at crop 512 / stride 512",
        metadata={"parents": 38, "tiles": 4598, "train_tiles": 2904, "test_tiles": 1694},
    )
)

_register(
    DatasetProfile(
        key="potsdam_rgb",
        name="ISPRS Potsdam (R-G-B)",
        class_names=ISPRS_CLASSES,
        crop=512,
        stride=512,
        modality="RGB",
        gsd="5 meters",
        train_ids=_POTSDAM_TRAIN,
        test_ids=_POTSDAM_TEST,
        notes="same parents and split as potsdam_irrg, RGB composite",
        metadata={"parents": 38, "tiles": 4598, "train_tiles": 2904, "test_tiles": 1694},
    )
)

_register(
    DatasetProfile(
        key="vaihingen_irrg",
        name="ISPRS Vaihingen (IR-R-G)",
        class_names=ISPRS_CLASSES,
        crop=512,
        stride=256,
        modality="IRRG",
        gsd="9 centimeters",
        train_ids=_VAIHINGEN_TRAIN,
        test_ids=_VAIHINGEN_TEST,
        notes="variable-size parents, tiled without padding",
        metadata={"tiles": 1696, "train_tiles": 1296, "test_tiles": 440},
    )
)

_register(
    DatasetProfile(
        key="loveda_urban",
        name="LoveDA Urban",
        class_names=LOVEDA_CLASSES,
        crop=512,
        stride=512,
        modality="RGB",
        gsd="0.3 meters",
        ignore_index=0,
        label_offset=1,
        notes="1024x1024 images; split follows the dataset's train/val folders",
        metadata={"images": 1833, "train_images": 1156, "val_images": 677},
    )
)

_register(
    DatasetProfile(
        key="loveda_rural",
        name="LoveDA Rural",
        class_names=LOVEDA_CLASSES,
        crop=512,
        stride=512,
        modality="RGB",
        gsd="0.3 meters",
        ignore_index=0,
        label_offset=1,
        notes="1024x1024 images; split follows the dataset's train/val folders",
        metadata={"images": 2358, "train_images": 1366, "val_images": 992},
    )
)

_register(
    DatasetProfile(
        key="synthetic",
        name="Synthetic paired domains",
        class_names=SYNTHETIC_CLASSES,
        crop=64,
        stride=64,
        modality="synthetic",
        gsd="n/a",
        notes="rendered scenes; target receives a photometric shift",
    )
)


_register_task(AdaptationTask("pot_irrg_to_vai_irrg", "POT IRRG -> VAI IRRG", "potsdam_irrg", "vaihingen_irrg"))
_register_task(AdaptationTask("vai_irrg_to_pot_irrg", "VAI IRRG -> POT IRRG", "vaihingen_irrg", "potsdam_irrg"))
_register_task(AdaptationTask("pot_rgb_to_vai_irrg", "POT RGB -> VAI IRRG", "potsdam_rgb", "vaihingen_irrg"))
_register_task(AdaptationTask("vai_irrg_to_pot_rgb", "VAI IRRG -> POT RGB", "vaihingen_irrg", "potsdam_rgb"))
_register_task(AdaptationTask("rural_to_urban", "LoveDA Rural -> Urban", "loveda_rural", "loveda_urban"))
_register_task(AdaptationTask("synthetic", "Synthetic source -> shifted target", "synthetic", "synthetic"))


# ---------------------------------------------------------------------------
# Lookup
# ---------------------------------------------------------------------------


def get_profile(key: str) -> DatasetProfile:
    try:
        return DATASET_PROFILES[key]
    except KeyError:
        raise KeyError(
            f"unknown dataset profile {key!r}; available: {', '.join(DATASET_PROFILES)}"
        ) from None


def get_task(key: str) -> AdaptationTask:
    try:
        return TASKS[key]
    except KeyError:
        raise KeyError(f"unknown task {key!r}; available: {', '.join(TASKS)}") from None


def list_profiles() -> list[DatasetProfile]:
    return list(DATASET_PROFILES.values())


def list_tasks() -> list[AdaptationTask]:
    return list(TASKS.values())
