from __future__ import annotations

import dataclasses
import json

import numpy as np
import pytest
import torch
import torch.nn as nn

from siamseg import trainer
from siamseg.checkpoint import read_manifest
from siamseg.cli import cmd_synth
from siamseg.augment import GeometricAugConfig
from siamseg.config import DataConfig, ScheduleConfig
from siamseg.core import Domain, ShapeSpec
from siamseg.data import DatasetManifest, ManifestEntry, MemoryStore, Split
from siamseg.errors import ManifestError, NonFiniteLossError, ShapeError
from siamseg.losses import MetricsLog, source_ce
from siamseg.model import SegmentationModel, forward_segmentation
from siamseg.trainer import (
    InfiniteSampler,
    build_state,
    evaluate,
    evaluate_checkpoint,
    fit,
    load_batch,
    lr_factor,
    resolve_data,
    seed_everything,
    train_step,
)

from _helpers import tiny_config, tiny_synth


def _state(config):
    seed_everything(config.run.seed)
    data = resolve_data(config)
    return data, build_state(config, data.shape, len(data.source), len(data.target_train))


def _next_batches(data, state, config):
    source = load_batch(data.source, state.source_sampler.take(config.run.batch_source))
    target = load_batch(data.target_train, state.target_sampler.take(config.run.batch_target))
    return source, target


def _snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


def test_lr_factor_examples():
    schedule = ScheduleConfig(total_iters=40000, warmup_iters=1500, decay_floor=0.01)
    assert lr_factor(1500, schedule) == pytest.approx(1.0)
    assert lr_factor(40000, schedule) == pytest.approx(0.01)
    assert lr_factor(20750, schedule) == pytest.approx(0.505)
    assert lr_factor(0, schedule) == pytest.approx(1 / 1500)
    assert lr_factor(1499, schedule) == pytest.approx(1.0)


def test_lr_factor_stays_in_range():
    schedule = ScheduleConfig(total_iters=100, warmup_iters=10, decay_floor=0.01)
    values = [lr_factor(s, schedule) for s in range(0, 101)]
    assert all(0 < v <= 1 for v in values)
    assert values[10:] == sorted(values[10:], reverse=True)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------


def test_sampler_covers_each_pass_and_resumes():
    sampler = InfiniteSampler(5, seed=0, tag="source")
    first = sampler.take(5)
    assert sorted(first) == list(range(5))
    sampler.take(2)
    state = sampler.state_dict()
    tail = sampler.take(7)

    again = InfiniteSampler(5, seed=0, tag="source")
    again.load_state_dict(state)
    assert again.take(7) == tail


def test_sampler_rejects_empty_dataset():
    with pytest.raises(ManifestError):
        InfiniteSampler(0, seed=0, tag="target")


# ---------------------------------------------------------------------------
# Optimizer construction
# ---------------------------------------------------------------------------


def test_parameter_groups(tmp_path):
    config = tiny_config(tmp_path)
    _, state = _state(config)
    groups = {g["name"]: g for g in state.optimizer.param_groups}
    assert groups["backbone"]["initial_lr"] == config.optim.lr_backbone
    assert groups["heads"]["initial_lr"] == config.optim.lr_heads

    backbone_ids = {id(p) for p in state.student.backbone.parameters()}
    head_ids = {id(p) for p in state.student.decode_head.parameters()} | {id(p) for p in state.heads.parameters()}
    assert {id(p) for p in groups["backbone"]["params"]} == backbone_ids
    assert {id(p) for p in groups["heads"]["params"]} == head_ids

    optimized = backbone_ids | head_ids
    assert not optimized & {id(p) for p in state.teacher.parameters()}


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------


def test_zero_weights_match_pure_source_training(tmp_path):
    config = tiny_config(tmp_path, beta=0.0, gamma=0.0, total_iters=60)

    data, state = _state(config)
    for _ in range(50):
        source, target = _next_batches(data, state, config)
        train_step(state, source, target, config)
    via_train_step = _snapshot(state.student)

    data, state = _state(config)
    for _ in range(50):
        source, _ = _next_batches(data, state, config)
        state.student.train()
        loss = source_ce(forward_segmentation(state.student, source.images), source.labels).loss
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        state.optimizer.step()
        state.scheduler.step()
    pure = _snapshot(state.student)

    assert via_train_step.keys() == pure.keys()
    for name in pure:
        assert torch.equal(via_train_step[name], pure[name]), name


def test_teacher_follows_ema_of_student(tmp_path):
    config = tiny_config(tmp_path)
    data, state = _state(config)
    alpha = config.schedule.ema_alpha
    for _ in range(3):
        before = {n: p.detach().clone() for n, p in state.teacher.named_parameters()}
        source, target = _next_batches(data, state, config)
        train_step(state, source, target, config)
        student = dict(state.student.named_parameters())
        for name, param in state.teacher.named_parameters():
            expected = before[name].clone().mul_(alpha).add_(student[name].detach(), alpha=1 - alpha)
            assert torch.allclose(param, expected, atol=1e-7, rtol=0), name


def test_heads_frozen_without_contrastive_weight(tmp_path):
    config = tiny_config(tmp_path, gamma=0.0)
    data, state = _state(config)
    heads_before = _snapshot(state.heads)
    student_before = _snapshot(state.student)
    for _ in range(3):
        source, target = _next_batches(data, state, config)
        _, output = train_step(state, source, target, config)
        assert output.breakdown.contrastive == 0.0
    for name, value in _snapshot(state.heads).items():
        assert torch.equal(value, heads_before[name]), name
    assert any(not torch.equal(v, student_before[k]) for k, v in _snapshot(state.student).items())


def test_full_step_trains_heads_and_logs_consistent_breakdown(tmp_path):
    config = tiny_config(tmp_path)
    data, state = _state(config)
    heads_before = _snapshot(state.heads)
    source, target = _next_batches(data, state, config)
    _, output = train_step(state, source, target, config)
    b = output.breakdown
    assert b.total == pytest.approx(b.source + config.beta * b.target + config.gamma * b.contrastive, abs=1e-6)
    assert -1.0 <= b.contrastive <= 1.0
    assert 0.0 <= output.q_mean <= 1.0
    assert output.lr == pytest.approx(config.optim.lr_backbone * lr_factor(0, config.schedule))
    assert state.step == 1
    assert any(not torch.equal(v, heads_before[k]) for k, v in _snapshot(state.heads).items())


def test_steps_are_deterministic(tmp_path):
    config = tiny_config(tmp_path)

    def losses():
        data, state = _state(config)
        out = []
        for _ in range(5):
            source, target = _next_batches(data, state, config)
            _, output = train_step(state, source, target, config)
            b = output.breakdown
            out.append((b.source, b.target, b.contrastive, b.total, output.q_mean))
        return out

    assert losses() == losses()


def test_geometric_augmentation_is_seeded_per_step(tmp_path):
    plain = tiny_config(tmp_path)
    config = dataclasses.replace(
        plain, augment=dataclasses.replace(plain.augment, geometric=GeometricAugConfig(enabled=True))
    )

    def first_step(cfg):
        data, state = _state(cfg)
        source, target = _next_batches(data, state, cfg)
        _, output = train_step(state, source, target, cfg)
        return output.breakdown

    augmented = first_step(config)
    assert augmented == first_step(config)
    assert augmented.source != first_step(plain).source


def test_batch_size_checked(tmp_path):
    config = tiny_config(tmp_path)
    data, state = _state(config)
    source = load_batch(data.source, [0])
    target = load_batch(data.target_train, [0, 1])
    with pytest.raises(ShapeError):
        train_step(state, source, target, config)


def test_single_small_source_tile_is_rejected_before_the_forward_pass(tmp_path):
    base = tiny_config(tmp_path, gamma=0.0)
    config = dataclasses.replace(base, run=dataclasses.replace(base.run, batch_source=1))
    data, state = _state(config)
    before = {k: v.clone() for k, v in state.student.state_dict().items()}
    source = load_batch(data.source, [0])
    target = load_batch(data.target_train, [0, 1])
    with pytest.raises(ShapeError, match=r"^run\.batch_source: 1 tile of 32x32"):
        train_step(state, source, target, config)
    for k, v in state.student.state_dict().items():
        assert torch.equal(v, before[k])


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


class _ConstantClass(nn.Module):
    """Predicts class 0 everywhere."""

    def __init__(self, num_classes: int):
        super().__init__()
        self.num_classes = num_classes

    def forward(self, x):
        scores = torch.zeros(x.shape[0], self.num_classes, *x.shape[-2:])
        scores[:, 0] = 1.0
        return scores


def _memory_manifest(labels: dict[str, np.ndarray | None], size: int = 4, num_classes: int = 2):
    store = MemoryStore()
    rng = np.random.default_rng(0)
    for key, label in labels.items():
        store.images[key] = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        if label is not None:
            store.labels[key] = label
    entries = [ManifestEntry(k, 0, 0, Split.TEST) for k in labels]
    names = [f"c{i}" for i in range(num_classes)]
    return DatasetManifest(entries, ShapeSpec(size, size, 3, num_classes), names, Domain.TARGET, store=store)


def test_constant_predictor_on_balanced_data():
    half = np.zeros((4, 4), dtype=np.uint8)
    half[:, 2:] = 1
    manifest = _memory_manifest({"a": half, "b": half})
    model = _ConstantClass(2)
    report = evaluate(model, manifest, batch_size=1, device=torch.device("cpu"))
    assert report.per_class_iou == [0.5, 0.0]
    assert report.pixel_count == 32


def test_self_predictions_score_perfectly(tmp_path):
    config = tiny_config(tmp_path)
    _, state = _state(config)
    student = state.student
    student.eval()
    store = MemoryStore()
    rng = np.random.default_rng(0)
    for i in range(3):
        image = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
        x = torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            store.labels[f"t{i}"] = student(x).argmax(dim=1)[0].numpy().astype(np.uint8)
        store.images[f"t{i}"] = image
    manifest = DatasetManifest(
        [ManifestEntry(f"t{i}", 0, 0, Split.TEST) for i in range(3)],
        ShapeSpec(32, 32, 3, 4),
        ["a", "b", "c", "d"],
        Domain.TARGET,
        store=store,
    )
    first = evaluate(student, manifest, batch_size=1)
    second = evaluate(student, manifest, batch_size=1)
    assert all(v == 1.0 for v, s in zip(first.per_class_iou, first.supported) if s)
    assert first.mean_iou == 1.0
    assert first.to_dict() == second.to_dict()


def test_unlabelled_manifest_rejected():
    manifest = _memory_manifest({"a": None, "b": None})
    with pytest.raises(ManifestError):
        evaluate(_ConstantClass(2), manifest, device=torch.device("cpu"))


def test_evaluate_restores_training_mode(tmp_path):
    config = tiny_config(tmp_path)
    data, state = _state(config)
    state.student.train()
    evaluate(state.student, data.target_test)
    assert state.student.training


# ---------------------------------------------------------------------------
# Data resolution
# ---------------------------------------------------------------------------


def test_resolve_synthetic_splits_target(tmp_path):
    data = resolve_data(tiny_config(tmp_path))
    assert len(data.source) == 8
    assert len(data.target_train) == 6
    assert len(data.target_test) == 2
    assert data.source.domain == Domain.SOURCE


def test_resolve_manifests_on_disk(tmp_path):
    cmd_synth(tmp_path / "synth", tiny_synth())
    data_config = DataConfig(
        source_manifest=str(tmp_path / "synth" / "source" / "manifest.tsv"),
        target_manifest=str(tmp_path / "synth" / "target" / "manifest.tsv"),
    )
    data = resolve_data(tiny_config(tmp_path / "run", data=data_config))
    assert (len(data.source), len(data.target_train), len(data.target_test)) == (8, 6, 2)
    assert load_batch(data.source, [0, 1]).labels is not None
    assert load_batch(data.target_train, [0, 1]).labels is None


def test_unresolvable_data_fails_fast(tmp_path):
    data_config = DataConfig(source_manifest=str(tmp_path / "a.tsv"), target_manifest=str(tmp_path / "b.tsv"))
    with pytest.raises(ManifestError, match="cannot resolve"):
        fit(tiny_config(tmp_path / "run", data=data_config))


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------


def test_zero_iterations_emit_initial_checkpoint(tmp_path):
    result = fit(tiny_config(tmp_path / "run", total_iters=0))
    assert result.steps == 0
    assert read_manifest(result.final_checkpoint).step == 0
    assert MetricsLog(result.metrics_log).rows() == []
    assert result.eval_reports == []


def test_fit_cadence_and_artifacts(tmp_path):
    out = tmp_path / "run"
    result = fit(tiny_config(out, total_iters=6, eval_every=3, checkpoint_every=3))
    assert [int(r["step"]) for r in MetricsLog(result.metrics_log).rows()] == list(range(6))
    assert [p.name for p in result.eval_reports] == ["step_000003.json", "step_000006.json", "final.json"]
    assert (out / "checkpoints" / "step_000003" / "student.pt").exists()
    assert (out / "checkpoints" / "step_000006" / "manifest.yaml").exists()
    assert result.best_checkpoint is not None
    assert (out / "config.yaml").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["steps"] == 6
    report = json.loads(result.eval_reports[-1].read_text())
    assert set(report) >= {"miou", "mf1", "pixels"}


def test_fit_is_reproducible(tmp_path):
    a = fit(tiny_config(tmp_path / "a", total_iters=5))
    b = fit(tiny_config(tmp_path / "b", total_iters=5))
    assert a.metrics_log.read_text() == b.metrics_log.read_text()


def test_resume_reproduces_uninterrupted_tail(tmp_path):
    full = fit(tiny_config(tmp_path / "full", total_iters=8, checkpoint_every=4, eval_every=4))
    resumed = fit(
        tiny_config(tmp_path / "resumed", total_iters=8, checkpoint_every=4, eval_every=4),
        resume=tmp_path / "full" / "checkpoints" / "step_000004",
    )
    full_rows = MetricsLog(full.metrics_log).rows()
    resumed_rows = MetricsLog(resumed.metrics_log).rows()
    assert [int(r["step"]) for r in resumed_rows] == [4, 5, 6, 7]
    assert resumed_rows == full_rows[4:]
    final_full = torch.load(full.final_checkpoint / "student.pt")
    final_resumed = torch.load(resumed.final_checkpoint / "student.pt")
    for name in final_full:
        assert torch.equal(final_full[name], final_resumed[name]), name


def test_resume_in_place_truncates_log(tmp_path):
    out = tmp_path / "run"
    fit(tiny_config(out, total_iters=6, checkpoint_every=3))
    result = fit(tiny_config(out, total_iters=6, checkpoint_every=3), resume=out / "checkpoints" / "step_000003")
    assert [int(r["step"]) for r in MetricsLog(result.metrics_log).rows()] == list(range(6))


def test_non_finite_loss_saves_diagnostics(tmp_path, monkeypatch):
    monkeypatch.setenv(trainer.CACHE_ENV, str(tmp_path / "cache"))

    def explode(*args, **kwargs):
        raise NonFiniteLossError("source loss is not finite (nan)")

    monkeypatch.setattr(trainer, "total_loss", explode)
    with pytest.raises(NonFiniteLossError):
        fit(tiny_config(tmp_path / "run", total_iters=4))
    diagnostics = tmp_path / "cache" / "diagnostics_step_000000"
    assert read_manifest(diagnostics).step == 0


def test_evaluate_checkpoint_checks_class_count(tmp_path):
    result = fit(tiny_config(tmp_path / "run", total_iters=0))
    manifest = _memory_manifest({"a": np.zeros((32, 32), dtype=np.uint8)}, size=32, num_classes=3)
    with pytest.raises(ShapeError):
        evaluate_checkpoint(result.final_checkpoint, manifest)


def test_cache_dir_default_and_override(tmp_path, monkeypatch):
    monkeypatch.delenv(trainer.CACHE_ENV, raising=False)
    assert trainer.cache_dir(tmp_path) == tmp_path / ".cache"
    monkeypatch.setenv(trainer.CACHE_ENV, str(tmp_path / "elsewhere"))
    assert trainer.cache_dir(tmp_path) == tmp_path / "elsewhere"


def test_load_student_round_trip(tmp_path):
    result = fit(tiny_config(tmp_path / "run", total_iters=0))
    student = trainer.load_student(result.final_checkpoint)
    assert isinstance(student, SegmentationModel)
    assert student.shape == ShapeSpec(32, 32, 3, 4)
