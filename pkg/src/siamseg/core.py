"""Domain types shared across siamseg, plus the confusion-matrix metric engine.

The metric engine is the only place IoU and F1 are computed. Evaluation
shards may each own a ConfusionMatrix and merge them afterwards.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

import numpy as np
import torch

from siamseg.errors import ClassIdError, ShapeError

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255

# Returned by iou_from_counts / f1_from_counts when TP + FP + FN == 0.
ZERO_SUPPORT = float("nan")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


class Domain(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class ShapeSpec:
    """Spatial size, channel count and class count of a dataset's tiles."""

    height: int
    width: int
    channels: int = 3
    num_classes: int = 6

    def __post_init__(self) -> None:
        for name in ("height", "width", "channels", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"ShapeSpec.{name} must be a positive integer, got {value!r}")
        if self.num_classes < 2:
            raise ValueError(f"ShapeSpec.num_classes must be >= 2, got {self.num_classes}")


@dataclass
class DomainSample:
    """One image, with its label map when the domain and mode provide one.

    ``image`` is float32 ``H x W x channels`` in [0, 1]; ``label`` is an
    integer ``H x W`` map of class ids or IGNORE_INDEX.
    """

    image: np.ndarray
    label: np.ndarray | None
    domain: Domain
    id: str

    def __post_init__(self) -> None:
        if self.image.ndim != 3:
            raise ShapeError(f"sample {self.id}: image must be H x W x C, got shape {self.image.shape}")
        if self.label is not None and self.label.shape != self.image.shape[:2]:
            raise ShapeError(
                f"sample {self.id}: label shape {self.label.shape} does not match "
                f"image shape {self.image.shape[:2]}"
            )


def check_probability_field(probs: torch.Tensor, atol: float = 1e-5) -> None:
    """Raise ShapeError/ValueError unless ``probs`` is a valid ``(N, C, H, W)`` field."""
    if probs.ndim != 4:
        raise ShapeError(f"probability field must be N x C x H x W, got {tuple(probs.shape)}")
    if bool((probs < 0).any()) or bool((probs > 1).any()):
        raise ValueError("probability field has entries outside [0, 1]")
    sums = probs.sum(dim=1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=atol):
        raise ValueError("probability field channels do not sum to 1")


# ---------------------------------------------------------------------------
# Confusion matrix
# ---------------------------------------------------------------------------


def _as_numpy(labels: np.ndarray | torch.Tensor) -> np.ndarray:
    if isinstance(labels, torch.Tensor):
        return labels.detach().cpu().numpy()
    return np.asarray(labels)


@dataclass
class ConfusionMatrix:
    """C x C counts, rows = reference class, columns = predicted class."""

    num_classes: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        elif self.counts.shape != (self.num_classes, self.num_classes):
            raise ShapeError(
                f"counts must be {self.num_classes}x{self.num_classes}, got {self.counts.shape}"
            )

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(
        self,
        predicted: np.ndarray | torch.Tensor,
        reference: np.ndarray | torch.Tensor,
    ) -> ConfusionMatrix:
        """Accumulate one pair of label maps in place and return self."""
        pred = _as_numpy(predicted).astype(np.int64, copy=False)
        ref = _as_numpy(reference).astype(np.int64, copy=False)
        if pred.shape != ref.shape:
            raise ShapeError(f"predicted shape {pred.shape} != reference shape {ref.shape}")

        c = self.num_classes
        valid = ref != IGNORE_INDEX
        ref_valid = ref[valid]
        pred_valid = pred[valid]
        if ref_valid.size and (ref_valid.min() < 0 or ref_valid.max() >= c):
            raise ClassIdError(f"reference holds class ids outside 0..{c - 1}")
        if pred_valid.size and (pred_valid.min() < 0 or pred_valid.max() >= c):
            raise ClassIdError(f"predicted map holds class ids outside 0..{c - 1} at labelled pixels")

        tally = np.bincount(ref_valid * c + pred_valid, minlength=c * c)
        self.counts += tally.reshape(c, c)
        return self

    def merge(self, other: ConfusionMatrix) -> ConfusionMatrix:
        """Element-wise sum; used to combine evaluation shards."""
        if other.num_classes != self.num_classes:
            raise ShapeError(f"cannot merge {other.num_classes}-class matrix into {self.num_classes}-class")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def confusion_update(
    cm: ConfusionMatrix,
    predicted: np.ndarray | torch.Tensor,
    reference: np.ndarray | torch.Tensor,
) -> ConfusionMatrix:
    """Return a new matrix with ``predicted``/``reference`` accumulated; ``cm`` is untouched."""
    return ConfusionMatrix(cm.num_classes, cm.counts.copy()).update(predicted, reference)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def iou_from_counts(tp: int, fp: int, fn: int) -> float:
    """TP / (TP + FP + FN), or ZERO_SUPPORT when the denominator is 0."""
    denom = tp + fp + fn
    if denom == 0:
        return ZERO_SUPPORT
    return tp / denom


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """2TP / (2TP + FP + FN), or ZERO_SUPPORT when TP + FP + FN is 0."""
    if tp + fp + fn == 0:
        return ZERO_SUPPORT
    return 2 * tp / (2 * tp + fp + fn)


def _format_value(value: float) -> str | None:
    return None if math.isnan(value) else f"{value:.4f}"


@dataclass
class MetricReport:
    """Per-class IoU/F1 and their means over classes with support."""

    class_names: list[str]
    per_class_iou: list[float]
    per_class_f1: list[float]
    supported: list[bool]
    mean_iou: float
    mean_f1: float
    pixel_count: int

    def to_dict(self) -> dict[str, str | None]:
        """Flat key/value form: iou.<class>, f1.<class>, miou, mf1, pixels.

        Values are decimal strings with 4 fractional digits; classes without
        support serialize as None.
        """
        out: dict[str, str | None] = {}
        for name, iou in zip(self.class_names, self.per_class_iou):
            out[f"iou.{name}"] = _format_value(iou)
        for name, f1 in zip(self.class_names, self.per_class_f1):
            out[f"f1.{name}"] = _format_value(f1)
        out["miou"] = _format_value(self.mean_iou)
        out["mf1"] = _format_value(self.mean_f1)
        out["pixels"] = str(self.pixel_count)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MetricReport:
        names = [key[len("iou."):] for key in data if key.startswith("iou.")]

        def _value(raw: Any) -> float:
            return ZERO_SUPPORT if raw is None else float(raw)

        iou = [_value(data[f"iou.{n}"]) for n in names]
        f1 = [_value(data[f"f1.{n}"]) for n in names]
        return cls(
            class_names=names,
            per_class_iou=iou,
            per_class_f1=f1,
            supported=[not math.isnan(v) for v in iou],
            mean_iou=_value(data["miou"]),
            mean_f1=_value(data["mf1"]),
            pixel_count=int(data["pixels"]),
        )

    def format_table(self) -> str:
        """Render a per-class table in class order, as percentages."""
        width = max([len(n) for n in self.class_names] + [6])
        lines = [f"{'class':<{width}}  {'IoU':>7}  {'F1':>7}"]
        for name, iou, f1 in zip(self.class_names, self.per_class_iou, self.per_class_f1):
            if math.isnan(iou):
                lines.append(f"{name:<{width}}  {'n/a':>7}  {'n/a':>7}")
            else:
                lines.append(f"{name:<{width}}  {100 * iou:7.2f}  {100 * f1:7.2f}")
        miou = "n/a" if math.isnan(self.mean_iou) else f"{100 * self.mean_iou:.2f}"
        mf1 = "n/a" if math.isnan(self.mean_f1) else f"{100 * self.mean_f1:.2f}"
        lines.append(f"{'mean':<{width}}  {miou:>7}  {mf1:>7}")
        lines.append(f"pixels: {self.pixel_count}")
        return "\n".join(lines)


def summarize(cm: ConfusionMatrix, class_names: Sequence[str] | None = None) -> MetricReport:
    """Turn a confusion matrix into a MetricReport."""
    c = cm.num_classes
    names = list(class_names) if class_names is not None else [f"class_{i}" for i in range(c)]
    if len(names) != c:
        raise ShapeError(f"{len(names)} class names for a {c}-class matrix")

    counts = cm.counts
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp

    iou = [iou_from_counts(int(tp[i]), int(fp[i]), int(fn[i])) for i in range(c)]
    f1 = [f1_from_counts(int(tp[i]), int(fp[i]), int(fn[i])) for i in range(c)]
    supported = [not math.isnan(v) for v in iou]

    if any(supported):
        mean_iou = float(np.mean([v for v, s in zip(iou, supported) if s]))
        mean_f1 = float(np.mean([v for v, s in zip(f1, supported) if s]))
    else:
        mean_iou = mean_f1 = ZERO_SUPPORT

    return MetricReport(
        class_names=names,
        per_class_iou=iou,
        per_class_f1=f1,
        supported=supported,
        mean_iou=mean_iou,
        mean_f1=mean_f1,
        pixel_count=cm.total,
    )
