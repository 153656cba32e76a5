"""Desk-scale runs on the synthetic benchmark. Deselected by default; run with ``-m slow``."""

from __future__ import annotations

import dataclasses
import json
import math
from pathlib import Path

import pytest

from siamseg.config import apply_ablation, apply_overrides, load_config
from siamseg.losses import MetricsLog
from siamseg.trainer import fit

pytestmark = pytest.mark.slow

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic.yaml"
SEEDS = (0, 1, 2)


def _final_miou(arm: str, seed: int, root: Path) -> float:
    config = apply_ablation(load_config(CONFIG), arm)
    out = root / arm / f"seed{seed}"
    config = dataclasses.replace(config, run=dataclasses.replace(config.run, seed=seed, output_dir=str(out)))
    fit(config)
    return 100.0 * float(json.loads((out / "eval" / "final.json").read_text())["miou"])


def test_two_hundred_steps_log_finite_rows(tmp_path):
    config = apply_overrides(
        load_config(CONFIG),
        {"schedule.total_iters": 200, "schedule.warmup_iters": 10, "run.output_dir": str(tmp_path), "run.eval_every": 0},
    )
    result = fit(config)
    rows = MetricsLog(result.metrics_log).rows()
    assert len(rows) == 200
    for row in rows:
        assert all(math.isfinite(float(row[k])) for k in ("L_S", "L_T", "L_CLR", "L_total"))


def test_ablation_ordering(tmp_path):
    means = {
        arm: sum(_final_miou(arm, seed, tmp_path) for seed in SEEDS) / len(SEEDS)
        for arm in ("source_only", "self_training", "siamseg")
    }
    assert means["self_training"] >= means["source_only"] + 3.0, means
    assert means["siamseg"] >= means["self_training"] + 2.0, means


def test_color_jitter_views_beat_geometric_views(tmp_path):
    means = {
        arm: sum(_final_miou(arm, seed, tmp_path) for seed in SEEDS) / len(SEEDS)
        for arm in ("siamseg_resize_flip", "siamseg_color_jitter")
    }
    assert means["siamseg_color_jitter"] >= means["siamseg_resize_flip"] + 1.0, means
