"""Training loop: source supervision, teacher pseudo-labels on mixed target
images, Siamese view learning, EMA teacher update, schedule, checkpoints and
evaluation.

Exactly one training step mutates model/optimizer state at a time. All
randomness inside a step comes from seeds derived from (run seed, step,
sample index, branch), and the data samplers' state is a (pass, position)
pair, so a run resumed from any checkpoint continues bit-identically.
"""

from __future__ import annotations

import json
import logging
import math
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from siamseg.augment import class_mix, derive_seed, geometric_transform, make_views, strong_transform
from siamseg.checkpoint import (
    CheckpointManifest,
    load_archive,
    read_config,
    read_manifest,
    save_checkpoint,
)
from siamseg.config import ScheduleConfig, TrainConfig, config_hash, config_to_dict, save_config
from siamseg.core import ConfusionMatrix, MetricReport, ShapeSpec, summarize
from siamseg.data import DatasetManifest, Split, load_manifest, load_sample
from siamseg.errors import ManifestError, NonFiniteLossError, ShapeError, SiamSegError
from siamseg.losses import (
    LossBreakdown,
    MetricsLog,
    PseudoLabelBundle,
    ViewEmbeddings,
    contrastive_loss,
    make_bundle,
    mixed_pixel_weights,
    source_ce,
    target_loss,
    total_loss,
)
from siamseg.model import (
    DEEPEST_STRIDE,
    ContrastiveHeads,
    ModelConfig,
    SegmentationModel,
    TeacherModel,
    build_heads,
    build_segmentor,
    ema_update,
    forward_contrastive,
    forward_segmentation,
    init_teacher_from_student,
)
from siamseg.synthetic import synth_domain_pair

logger = logging.getLogger(__name__)

CACHE_ENV = "SIAMSEG_CACHE"


def cache_dir(output_dir: Path) -> Path:
    """Where intermediate artifacts go; ``$SIAMSEG_CACHE`` overrides."""
    override = os.environ.get(CACHE_ENV)
    return Path(override) if override else Path(output_dir) / ".cache"


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    random.seed(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def lr_factor(step: int, config: ScheduleConfig) -> float:
    """Linear warm-up to 1.0, then linear decay to ``decay_floor`` at ``total_iters``."""
    if step < config.warmup_iters:
        return (step + 1) / config.warmup_iters
    span = config.total_iters - config.warmup_iters
    if span <= 0:
        return config.decay_floor
    progress = min(1.0, (step - config.warmup_iters) / span)
    return 1.0 - (1.0 - config.decay_floor) * progress


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


class InfiniteSampler:
    """Endless shuffled index stream; each pass over the data uses its own permutation."""

    def __init__(self, size: int, seed: int, tag: str):
        if size < 1:
            raise ManifestError(f"cannot sample from an empty {tag} dataset")
        self.size = size
        self.seed = seed
        self.tag = tag
        self.epoch = 0
        self.position = 0
        self._perm: list[int] | None = None

    def _permutation(self) -> list[int]:
        g = torch.Generator().manual_seed(derive_seed(self.seed, self.epoch, 0, self.tag))
        return torch.randperm(self.size, generator=g).tolist()

    def take(self, k: int) -> list[int]:
        out: list[int] = []
        while len(out) < k:
            if self._perm is None:
                self._perm = self._permutation()
            chunk = self._perm[self.position : self.position + (k - len(out))]
            out.extend(chunk)
            self.position += len(chunk)
            if self.position >= self.size:
                self.epoch += 1
                self.position = 0
                self._perm = None
        return out

    def state_dict(self) -> dict[str, int]:
        return {"epoch": self.epoch, "position": self.position}

    def load_state_dict(self, state: dict[str, int]) -> None:
        self.epoch = int(state["epoch"])
        self.position = int(state["position"])
        self._perm = None


@dataclass
class Batch:
    images: torch.Tensor  # N x C x H x W float in [0, 1]
    labels: torch.Tensor | None  # N x H x W long
    ids: list[str]


def load_batch(manifest: DatasetManifest, indices: Sequence[int], *, evaluation: bool = False) -> Batch:
    samples = [load_sample(manifest, i, evaluation=evaluation) for i in indices]
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()
    labels = None
    if all(s.label is not None for s in samples):
        labels = torch.from_numpy(np.stack([s.label for s in samples])).long()
    return Batch(images, labels, [s.id for s in samples])


@dataclass
class TrainingData:
    source: DatasetManifest
    target_train: DatasetManifest
    target_test: DatasetManifest

    @property
    def shape(self) -> ShapeSpec:
        return self.source.shape


def resolve_data(config: TrainConfig) -> TrainingData:
    """Materialize the source/target manifests named by the data section."""
    data = config.data
    if data.synthetic is not None:
        source, target = synth_domain_pair(data.synthetic)
        resolved = TrainingData(source.manifest, target.manifest.split(Split.TRAIN), target.manifest.split(Split.TEST))
    else:
        source_path, target_path = data.manifest_paths()
        try:
            source_manifest = load_manifest(source_path)
            target_manifest = load_manifest(target_path)
        except ManifestError as e:
            raise ManifestError(f"cannot resolve datasets: {e}") from e
        resolved = TrainingData(
            source_manifest.split(Split.TRAIN),
            target_manifest.split(Split.TRAIN),
            target_manifest.split(Split.TEST),
        )

    s, t = resolved.source.shape, resolved.target_train.shape
    if s.channels != t.channels or s.num_classes != t.num_classes:
        raise ManifestError(
            f"source ({s.channels} channels, {s.num_classes} classes) and target "
            f"({t.channels} channels, {t.num_classes} classes) are incompatible"
        )
    logger.info(
        "Data: %d source tiles, %d target train tiles, %d target test tiles",
        len(resolved.source),
        len(resolved.target_train),
        len(resolved.target_test),
    )
    return resolved


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass
class TrainState:
    student: SegmentationModel
    teacher: TeacherModel
    heads: ContrastiveHeads
    optimizer: AdamW
    scheduler: LambdaLR
    source_sampler: InfiniteSampler
    target_sampler: InfiniteSampler
    step: int = 0
    best_miou: float = -math.inf
    best_step: int = -1
    device: torch.device = field(default_factory=lambda: torch.device("cpu"))


@dataclass
class StepOutput:
    breakdown: LossBreakdown
    q_mean: float
    lr: float


def build_optimizer(
    student: SegmentationModel,
    heads: ContrastiveHeads,
    teacher: TeacherModel,
    config: TrainConfig,
) -> AdamW:
    """AdamW with two groups: backbone at lr_backbone; decode, projection and prediction heads at lr_heads."""
    optim = config.optim
    backbone = list(student.backbone.parameters())
    head_params = list(student.decode_head.parameters()) + list(heads.parameters())
    teacher_ids = {id(p) for p in teacher.parameters()}
    if any(id(p) in teacher_ids for p in backbone + head_params):
        raise SiamSegError("teacher parameters must never be optimized")
    return AdamW(
        [
            {"params": backbone, "lr": optim.lr_backbone, "name": "backbone"},
            {"params": head_params, "lr": optim.lr_heads, "name": "heads"},
        ],
        betas=optim.betas,
        weight_decay=optim.weight_decay,
    )


def build_state(config: TrainConfig, shape: ShapeSpec, source_size: int, target_size: int) -> TrainState:
    device = resolve_device(config.run.device)
    student = build_segmentor(shape, config.model).to(device)
    teacher = init_teacher_from_student(student)
    heads = build_heads(student, config.augment.views.crop_size, config.model).to(device)
    optimizer = build_optimizer(student, heads, teacher, config)
    scheduler = LambdaLR(optimizer, lambda s: lr_factor(s, config.schedule))
    seed = config.run.seed
    return TrainState(
        student=student,
        teacher=teacher,
        heads=heads,
        optimizer=optimizer,
        scheduler=scheduler,
        source_sampler=InfiniteSampler(source_size, seed, "source"),
        target_sampler=InfiniteSampler(target_size, seed, "target"),
        device=device,
    )


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------


def _check_norm_support(batch: Batch, key: str) -> None:
    # BatchNorm2d at the deepest stage needs more than one value per channel
    n, _, height, width = batch.images.shape
    cells = math.ceil(height / DEEPEST_STRIDE) * math.ceil(width / DEEPEST_STRIDE)
    if n * cells < 2:
        raise ShapeError(
            f"{key}: {n} tile of {height}x{width} is a single value per channel at stride {DEEPEST_STRIDE}; "
            "use at least 2 images per batch or larger tiles"
        )


def _geometric_batch(batch: Batch, config: TrainConfig, step: int, tag: str) -> Batch:
    """Rescale, crop and flip every tile of a batch together with its label map, if any."""
    images, labels = [], []
    for i in range(batch.images.shape[0]):
        label = batch.labels[i] if batch.labels is not None else None
        seed = derive_seed(config.run.seed, step, i, tag)
        image, label = geometric_transform(batch.images[i], label, config.augment.geometric, seed)
        images.append(image)
        labels.append(label)
    stacked = torch.stack(labels) if batch.labels is not None else None
    return Batch(torch.stack(images), stacked, batch.ids)


def _mixed_batch(
    source: Batch,
    target_images: torch.Tensor,
    bundle: PseudoLabelBundle,
    config: TrainConfig,
    step: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """ClassMix each source/target pair, then strong-augment the mixed image."""
    assert source.labels is not None
    pseudo = bundle.labels.cpu()
    images, labels, masks = [], [], []
    for i in range(target_images.shape[0]):
        j = i % source.images.shape[0]
        mix = class_mix(
            source.images[j],
            source.labels[j],
            target_images[i],
            pseudo[i],
            derive_seed(config.run.seed, step, i, "classmix"),
        )
        image = strong_transform(mix.image, config.augment.self_training, derive_seed(config.run.seed, step, i, "strong"))
        images.append(image)
        labels.append(mix.label)
        masks.append(mix.mask)
    return torch.stack(images), torch.stack(labels), torch.stack(masks)


def _view_batch(target_images: torch.Tensor, config: TrainConfig, step: int) -> tuple[torch.Tensor, torch.Tensor]:
    views = config.augment.views
    pairs = [
        make_views(target_images[i], views, derive_seed(config.run.seed, step, i, "views"))
        for i in range(target_images.shape[0])
    ]
    return torch.stack([p.view1 for p in pairs]), torch.stack([p.view2 for p in pairs])


def train_step(
    state: TrainState,
    source_batch: Batch,
    target_batch: Batch,
    config: TrainConfig,
) -> tuple[TrainState, StepOutput]:
    """One optimizer step on L_S + beta * L_T + gamma * L_CLR, then the EMA update.

    A non-finite loss raises before any parameter changes.
    """
    if source_batch.labels is None:
        raise ShapeError("source batch must carry labels")
    if source_batch.images.shape[0] != config.run.batch_source:
        raise ShapeError(f"expected {config.run.batch_source} source images, got {source_batch.images.shape[0]}")
    if target_batch.images.shape[0] != config.run.batch_target:
        raise ShapeError(f"expected {config.run.batch_target} target images, got {target_batch.images.shape[0]}")
    _check_norm_support(source_batch, "run.batch_source")
    if config.loss.beta > 0:
        _check_norm_support(target_batch, "run.batch_target")

    device = state.device
    step = state.step
    weights = config.loss.weights
    if config.augment.geometric.enabled:
        source_batch = _geometric_batch(source_batch, config, step, "geometric_source")
        target_batch = _geometric_batch(target_batch, config, step, "geometric_target")
    x_s = source_batch.images.to(device)
    y_s = source_batch.labels.to(device)
    x_t_cpu = target_batch.images

    # Pseudo-labels and quality from the teacher on clean target images
    with torch.no_grad():
        state.teacher.eval()
        bundle = make_bundle(forward_segmentation(state.teacher, x_t_cpu.to(device)), config.loss.tau)
    q_mean = float(bundle.q.mean())

    state.student.train()
    state.heads.train()

    # Source supervision
    loss_s = source_ce(forward_segmentation(state.student, x_s), y_s).loss

    # Self-training on ClassMix images
    loss_t: torch.Tensor | float = 0.0
    if weights.beta > 0:
        mixed, mixed_labels, masks = _mixed_batch(source_batch, x_t_cpu, bundle, config, step)
        num_classes = bundle.one_hot.shape[1]
        one_hot = F.one_hot(mixed_labels.to(device), num_classes).permute(0, 3, 1, 2).float()
        mixed_bundle = PseudoLabelBundle(one_hot, bundle.q, bundle.tau)
        pixel_weights = mixed_pixel_weights(masks.to(device), bundle.q)
        loss_t = target_loss(forward_segmentation(state.student, mixed.to(device)), mixed_bundle, pixel_weights)

    # Siamese views of clean target images
    loss_clr: torch.Tensor | float = 0.0
    if weights.gamma > 0:
        v1, v2 = _view_batch(x_t_cpu, config, step)
        z1, p1 = forward_contrastive(state.heads, v1.to(device))
        z2, p2 = forward_contrastive(state.heads, v2.to(device))
        loss_clr = contrastive_loss(ViewEmbeddings(p1=p1, p2=p2, z1=z1, z2=z2))

    breakdown = total_loss(loss_s, loss_t, loss_clr, weights)
    lr = state.optimizer.param_groups[0]["lr"]
    state.optimizer.zero_grad(set_to_none=True)
    assert breakdown.total_tensor is not None
    breakdown.total_tensor.backward()
    state.optimizer.step()
    state.scheduler.step()

    # The teacher follows the student after every optimizer step
    ema_update(state.teacher, state.student, config.schedule.ema)
    state.step += 1
    return state, StepOutput(breakdown, q_mean, lr)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@torch.no_grad()
def evaluate(
    model: SegmentationModel,
    manifest: DatasetManifest,
    *,
    batch_size: int = 8,
    device: torch.device | None = None,
) -> MetricReport:
    """Whole-tile inference, per-pixel argmax, global confusion matrix."""
    device = device or next(model.parameters()).device
    was_training = model.training
    model.eval()
    cm = ConfusionMatrix(manifest.shape.num_classes)
    try:
        for start in range(0, len(manifest), batch_size):
            indices = range(start, min(start + batch_size, len(manifest)))
            batch = load_batch(manifest, indices, evaluation=True)
            if batch.labels is None:
                raise ManifestError("evaluation manifest has tiles without ground-truth labels")
            predicted = model(batch.images.to(device)).argmax(dim=1).cpu()
            cm.update(predicted, batch.labels)
    finally:
        model.train(was_training)
    return summarize(cm, manifest.class_names)


def load_student(checkpoint: Path, device: torch.device | None = None) -> SegmentationModel:
    """Rebuild the student network stored in a checkpoint directory."""
    manifest = read_manifest(checkpoint)
    saved = read_config(checkpoint) or {}
    model_fields = dict(saved.get("model", {}))
    model_fields["backbone"] = manifest.architecture
    student = build_segmentor(manifest.shape, ModelConfig(**model_fields))
    student.load_state_dict(load_archive(checkpoint, "student"))
    return student.to(device or torch.device("cpu"))


def evaluate_checkpoint(checkpoint: Path, manifest: DatasetManifest, *, batch_size: int = 8) -> MetricReport:
    student = load_student(Path(checkpoint))
    if student.shape.num_classes != manifest.shape.num_classes:
        raise ShapeError(
            f"checkpoint predicts {student.shape.num_classes} classes, manifest has {manifest.shape.num_classes}"
        )
    return evaluate(student, manifest, batch_size=batch_size)


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_state(state: TrainState, directory: Path, config: TrainConfig) -> Path:
    manifest = CheckpointManifest(
        architecture=state.student.architecture,
        shape=state.student.shape,
        config_hash=config_hash(config),
        step=state.step,
    )
    archives: dict[str, Any] = {
        "student": state.student.state_dict(),
        "teacher": state.teacher.state_dict(),
        "heads": state.heads.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "scheduler": state.scheduler.state_dict(),
        "state": {
            "step": state.step,
            "source_sampler": state.source_sampler.state_dict(),
            "target_sampler": state.target_sampler.state_dict(),
            "best_miou": state.best_miou,
            "best_step": state.best_step,
        },
    }
    return save_checkpoint(directory, manifest, archives, config_to_dict(config))


def restore_state(state: TrainState, directory: Path, config: TrainConfig) -> TrainState:
    manifest = read_manifest(directory)
    if manifest.config_hash != config_hash(config):
        logger.warning("Resuming %s with a config that differs from the one it was written with", directory)
    state.student.load_state_dict(load_archive(directory, "student"))
    state.teacher.load_state_dict(load_archive(directory, "teacher"))
    state.heads.load_state_dict(load_archive(directory, "heads"))
    state.optimizer.load_state_dict(load_archive(directory, "optimizer"))
    state.scheduler.load_state_dict(load_archive(directory, "scheduler"))
    extra = load_archive(directory, "state")
    state.step = int(extra["step"])
    state.source_sampler.load_state_dict(extra["source_sampler"])
    state.target_sampler.load_state_dict(extra["target_sampler"])
    state.best_miou = float(extra["best_miou"])
    state.best_step = int(extra["best_step"])
    logger.info("Resumed from %s at step %d", directory, state.step)
    return state


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    final_checkpoint: Path
    best_checkpoint: Path | None
    metrics_log: Path
    eval_reports: list[Path]
    steps: int


def _write_report(report: MetricReport, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json(), encoding="utf-8")
    return path


def _evaluate_and_track(
    state: TrainState,
    data: TrainingData,
    config: TrainConfig,
    out: Path,
    name: str,
) -> Path | None:
    if len(data.target_test) == 0:
        logger.warning("No target test tiles; skipping evaluation")
        return None
    report = evaluate(state.student, data.target_test, batch_size=config.run.eval_batch_size, device=state.device)
    path = _write_report(report, out / "eval" / f"{name}.json")
    logger.info("eval step=%d miou=%.4f mf1=%.4f", state.step, report.mean_iou, report.mean_f1)
    if not math.isnan(report.mean_iou) and report.mean_iou > state.best_miou:
        state.best_miou = report.mean_iou
        state.best_step = state.step
        save_state(state, out / "checkpoints" / "best", config)
    return path


def fit(config: TrainConfig, resume: Path | None = None) -> FitResult:
    """Run ``total_iters`` steps with periodic evaluation and checkpointing."""
    seed_everything(config.run.seed)
    out = Path(config.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = resolve_data(config)
    state = build_state(config, data.shape, len(data.source), len(data.target_train))

    metrics_path = out / "metrics.csv"
    if resume is None and metrics_path.exists():
        metrics_path.unlink()
    log = MetricsLog(metrics_path)
    if resume is not None:
        restore_state(state, Path(resume), config)
        log.truncate(state.step)
    save_config(config, out / "config.yaml")

    reports: list[Path] = []
    total = config.schedule.total_iters
    run = config.run
    while state.step < total:
        source_batch = load_batch(data.source, state.source_sampler.take(run.batch_source))
        target_batch = load_batch(data.target_train, state.target_sampler.take(run.batch_target))
        step = state.step
        try:
            _, output = train_step(state, source_batch, target_batch, config)
        except NonFiniteLossError:
            diagnostics = cache_dir(out) / f"diagnostics_step_{step:06d}"
            save_state(state, diagnostics, config)
            logger.error("Non-finite loss at step %d; diagnostics saved to %s", step, diagnostics)
            raise
        log.append(step, output.breakdown, output.q_mean, output.lr)

        if run.eval_every and state.step % run.eval_every == 0:
            path = _evaluate_and_track(state, data, config, out, f"step_{state.step:06d}")
            if path is not None:
                reports.append(path)
        if run.checkpoint_every and state.step % run.checkpoint_every == 0:
            save_state(state, out / "checkpoints" / f"step_{state.step:06d}", config)

    if total > 0:
        path = _evaluate_and_track(state, data, config, out, "final")
        if path is not None:
            reports.append(path)
    final = save_state(state, out / "checkpoints" / "final", config)
    best = out / "checkpoints" / "best"
    summary = {"steps": state.step, "best_miou": state.best_miou, "best_step": state.best_step}
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return FitResult(
        final_checkpoint=final,
        best_checkpoint=best if best.exists() else None,
        metrics_log=metrics_path,
        eval_reports=reports,
        steps=state.step,
    )
