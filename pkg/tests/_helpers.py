"""Small configs and fixtures shared by the trainer, CLI and server tests."""

from __future__ import annotations

from pathlib import Path

import yaml

from siamseg.augment import SimAugConfig
from siamseg.config import (
    AugmentConfig,
    DataConfig,
    LossConfig,
    RunConfig,
    ScheduleConfig,
    TrainConfig,
    config_to_dict,
)
from siamseg.core import ShapeSpec
from siamseg.model import ModelConfig
from siamseg.synthetic import SynthConfig

SIZE = 32
CLASSES = 4


def tiny_synth(num_images: int = 8, seed: int = 0) -> SynthConfig:
    return SynthConfig(seed=seed, num_images=num_images, shape=ShapeSpec(SIZE, SIZE, 3, CLASSES))


def tiny_config(
    output_dir: Path,
    *,
    total_iters: int = 6,
    beta: float = 1.0,
    gamma: float = 1.0,
    seed: int = 0,
    eval_every: int = 0,
    checkpoint_every: int = 0,
    data: DataConfig | None = None,
) -> TrainConfig:
    return TrainConfig(
        data=data or DataConfig(synthetic=tiny_synth()),
        model=ModelConfig(proj_hidden=32, proj_dim=16, pred_hidden=8),
        augment=AugmentConfig(sim=SimAugConfig(crop_size=(SIZE, SIZE))),
        loss=LossConfig(beta=beta, gamma=gamma, tau=0.9),
        schedule=ScheduleConfig(total_iters=total_iters, warmup_iters=2, decay_floor=0.01, ema_alpha=0.99),
        run=RunConfig(
            seed=seed,
            batch_source=2,
            batch_target=2,
            eval_every=eval_every,
            checkpoint_every=checkpoint_every,
            eval_batch_size=4,
            output_dir=str(output_dir),
        ),
    )


def write_config(config: TrainConfig, path: Path, **extra_sections: dict) -> Path:
    data = config_to_dict(config)
    data.update(extra_sections)
    path.write_text(yaml.safe_dump(data, sort_keys=False), encoding="utf-8")
    return path
