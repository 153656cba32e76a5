"""Training objectives: source cross-entropy, confidence-weighted self-training,
the stop-gradient Siamese loss, and their weighted sum.

Cross-entropy terms are normalized by the number of contributing pixels, so
their magnitude does not depend on the crop size.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F

from siamseg.core import IGNORE_INDEX
from siamseg.errors import ClassIdError, NonFiniteLossError, ShapeError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-12


class CrossEntropy(NamedTuple):
    loss: torch.Tensor
    num_pixels: int

    @property
    def no_support(self) -> bool:
        return self.num_pixels == 0


@dataclass
class PseudoLabelBundle:
    """Teacher pseudo-labels for a batch: one-hot ``N x C x H x W`` plus per-image quality."""

    one_hot: torch.Tensor
    q: torch.Tensor
    tau: float

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.q.ndim != 1 or self.q.shape[0] != self.one_hot.shape[0]:
            raise ShapeError(f"q must hold one value per image, got {tuple(self.q.shape)}")

    @property
    def labels(self) -> torch.Tensor:
        return self.one_hot.argmax(dim=1)


@dataclass(frozen=True)
class LossWeights:
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self) -> None:
        for name in ("beta", "gamma"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


@dataclass
class LossBreakdown:
    source: float
    target: float
    contrastive: float
    total: float
    total_tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)


@dataclass
class ViewEmbeddings:
    p1: torch.Tensor
    p2: torch.Tensor
    z1: torch.Tensor
    z2: torch.Tensor


# ---------------------------------------------------------------------------
# Self-training
# ---------------------------------------------------------------------------


def _check_probs(probs: torch.Tensor, labels_shape: torch.Size) -> None:
    if probs.ndim != 4:
        raise ShapeError(f"expected N x C x H x W probabilities, got {tuple(probs.shape)}")
    expected = (probs.shape[0], *probs.shape[2:])
    if tuple(labels_shape) != expected:
        raise ShapeError(f"labels {tuple(labels_shape)} do not match probabilities {tuple(probs.shape)}")


def source_ce(probs: torch.Tensor, labels: torch.Tensor) -> CrossEntropy:
    """Mean ``-log p(true class)`` over non-ignored pixels."""
    _check_probs(probs, labels.shape)
    valid = labels != IGNORE_INDEX
    num_pixels = int(valid.sum())
    if num_pixels == 0:
        logger.warning("source cross-entropy has no labelled pixels")
        return CrossEntropy(probs.sum() * 0.0, 0)
    labelled = labels[valid]
    if bool((labelled < 0).any()) or bool((labelled >= probs.shape[1]).any()):
        raise ClassIdError(f"labels hold class ids outside 0..{probs.shape[1] - 1}")
    safe = torch.where(valid, labels, torch.zeros_like(labels))
    true_prob = probs.gather(1, safe.unsqueeze(1)).squeeze(1)
    nll = -torch.log(true_prob.clamp_min(PROB_FLOOR))
    return CrossEntropy(nll[valid].sum() / num_pixels, num_pixels)


def pseudo_labels(teacher_probs: torch.Tensor) -> torch.Tensor:
    """One-hot argmax per pixel; ties go to the lowest class index."""
    with torch.no_grad():
        num_classes = teacher_probs.shape[1]
        idx = teacher_probs.detach().argmax(dim=1)
        return F.one_hot(idx, num_classes).permute(0, 3, 1, 2).to(teacher_probs.dtype)


def quality(teacher_probs: torch.Tensor, tau: float) -> torch.Tensor:
    """Per image: fraction of pixels whose max class probability is strictly above tau."""
    with torch.no_grad():
        confident = teacher_probs.detach().amax(dim=1) > tau
        return confident.flatten(1).float().mean(dim=1)


def make_bundle(teacher_probs: torch.Tensor, tau: float) -> PseudoLabelBundle:
    return PseudoLabelBundle(pseudo_labels(teacher_probs), quality(teacher_probs, tau), tau)


def mixed_pixel_weights(mask: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Weight 1 on source-pasted pixels, the image's quality q elsewhere."""
    q_map = q.view(-1, 1, 1).to(torch.float32).expand_as(mask)
    return torch.where(mask, torch.ones_like(q_map), q_map)


def target_loss(
    student_probs: torch.Tensor,
    bundle: PseudoLabelBundle,
    pixel_weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """Quality-weighted cross-entropy against the pseudo-labels.

    Without ``pixel_weights`` every pixel of image i is weighted by ``q[i]``.
    """
    if student_probs.shape != bundle.one_hot.shape:
        raise ShapeError(
            f"student probabilities {tuple(student_probs.shape)} != pseudo-labels {tuple(bundle.one_hot.shape)}"
        )
    log_p = torch.log(student_probs.clamp_min(PROB_FLOOR))
    nll = -(bundle.one_hot * log_p).sum(dim=1)
    if pixel_weights is None:
        weights = bundle.q.view(-1, 1, 1).to(nll.dtype)
    else:
        if pixel_weights.shape != nll.shape:
            raise ShapeError(f"pixel weights {tuple(pixel_weights.shape)} != {tuple(nll.shape)}")
        weights = pixel_weights.to(nll.dtype)
    return (weights * nll).sum() / nll.numel()


# ---------------------------------------------------------------------------
# Siamese contrastive loss
# ---------------------------------------------------------------------------


def neg_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """``-(p/|p|) . (z/|z|)`` along the last dimension."""
    if p.shape != z.shape:
        raise ShapeError(f"embedding shapes differ: {tuple(p.shape)} vs {tuple(z.shape)}")
    p_norm = p.norm(dim=-1, keepdim=True)
    z_norm = z.norm(dim=-1, keepdim=True)
    if bool((p_norm < NORM_FLOOR).any()) or bool((z_norm < NORM_FLOOR).any()):
        raise ValueError("negative cosine similarity is undefined for a zero vector")
    return -((p / p_norm) * (z / z_norm)).sum(dim=-1)


def contrastive_loss(emb: ViewEmbeddings) -> torch.Tensor:
    """``D(p1, sg(z2)) / 2 + D(p2, sg(z1)) / 2``, averaged over the batch."""
    return (
        0.5 * neg_cosine(emb.p1, emb.z2.detach()).mean()
        + 0.5 * neg_cosine(emb.p2, emb.z1.detach()).mean()
    )


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def _scalar(value: torch.Tensor | float) -> float:
    return float(value.detach()) if isinstance(value, torch.Tensor) else float(value)


def total_loss(
    loss_source: torch.Tensor | float,
    loss_target: torch.Tensor | float,
    loss_contrastive: torch.Tensor | float,
    weights: LossWeights,
) -> LossBreakdown:
    """``L_S + beta * L_T + gamma * L_CLR``; raises on a non-finite term."""
    terms = {"source": loss_source, "target": loss_target, "contrastive": loss_contrastive}
    values = {name: _scalar(v) for name, v in terms.items()}
    for name, value in values.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(f"{name} loss is not finite ({value})")

    total = loss_source + weights.beta * loss_target + weights.gamma * loss_contrastive
    tensor = total if isinstance(total, torch.Tensor) else None
    return LossBreakdown(
        source=values["source"],
        target=values["target"],
        contrastive=values["contrastive"],
        total=_scalar(total),
        total_tensor=tensor,
    )


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------

METRICS_COLUMNS = ("step", "L_S", "L_T", "L_CLR", "L_total", "q_mean", "lr")


class MetricsLog:
    """Step-indexed CSV of loss breakdowns."""

    def __init__(self, path: Path):
        self.path = Path(path)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="", encoding="utf-8") as f:
                csv.writer(f).writerow(METRICS_COLUMNS)

    def append(self, step: int, breakdown: LossBreakdown, q_mean: float, lr: float) -> None:
        row = [
            step,
            f"{breakdown.source:.8g}",
            f"{breakdown.target:.8g}",
            f"{breakdown.contrastive:.8g}",
            f"{breakdown.total:.8g}",
            f"{q_mean:.8g}",
            f"{lr:.8g}",
        ]
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow(row)

    def rows(self) -> list[dict[str, str]]:
        with self.path.open(newline="", encoding="utf-8") as f:
            return list(csv.DictReader(f))

    def truncate(self, step: int) -> None:
        """Drop every row with step >= ``step`` (used when resuming)."""
        kept = [r for r in self.rows() if int(r["step"]) < step]
        with self.path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
            writer.writeheader()
            writer.writerows(kept)
