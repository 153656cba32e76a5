"""Run configuration: one YAML file, one frozen dataclass per section.

Sections: data, model, augment, loss, optim, schedule, run. Parsing is strict;
the first unknown key, wrongly typed value or violated invariant raises
ConfigError naming its dotted path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import types
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Union, get_args, get_origin, get_type_hints

import yaml

from siamseg.augment import GeometricAugConfig, JitterStrengths, SelfTrainingAugConfig, SimAugConfig
from siamseg.core import ShapeSpec
from siamseg.data import MANIFEST_FILE
from siamseg.dataset_registry import get_task
from siamseg.errors import ConfigError
from siamseg.losses import LossWeights
from siamseg.model import EmaConfig, ModelConfig
from siamseg.synthetic import PhotometricShift, SynthConfig

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Sections
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    """A synthetic pair, two manifest files, or a task resolved under ``root``.

    With ``task`` and ``root`` the manifests are ``<root>/<profile>/manifest.tsv``
    for the task's source and target profiles.
    """

    task: str | None = None
    root: str | None = None
    source_manifest: str | None = None
    target_manifest: str | None = None
    synthetic: SynthConfig | None = None

    def __post_init__(self) -> None:
        if self.synthetic is not None:
            return
        if self.task is not None and self.root is not None:
            return
        if self.source_manifest is None or self.target_manifest is None:
            raise ValueError(
                "set data.synthetic, data.task with data.root, "
                "or both data.source_manifest and data.target_manifest"
            )

    def manifest_paths(self) -> tuple[Path, Path]:
        """Source and target manifest paths; explicit paths win over the task layout."""
        if self.source_manifest is not None and self.target_manifest is not None:
            return Path(self.source_manifest), Path(self.target_manifest)
        try:
            task = get_task(self.task or "")
        except KeyError as e:
            raise ConfigError(f"data.task: {e.args[0]}") from None
        root = Path(self.root or ".")
        return root / task.source / MANIFEST_FILE, root / task.target / MANIFEST_FILE


@dataclass(frozen=True)
class AugmentConfig:
    sim: SimAugConfig = field(default_factory=SimAugConfig)
    sim_preset: str | None = None
    self_training: SelfTrainingAugConfig = field(default_factory=SelfTrainingAugConfig)
    geometric: GeometricAugConfig = field(default_factory=GeometricAugConfig)

    def __post_init__(self) -> None:
        if self.sim_preset is not None and self.sim_preset not in SIM_AUG_PRESETS:
            raise ValueError(f"unknown sim_preset {self.sim_preset!r}; available: {', '.join(SIM_AUG_PRESETS)}")

    @property
    def views(self) -> SimAugConfig:
        """The Siamese view config with the preset, if any, applied."""
        if self.sim_preset is None:
            return self.sim
        return SIM_AUG_PRESETS[self.sim_preset](self.sim)


@dataclass(frozen=True)
class LossConfig:
    beta: float = 1.0  # unverified against the original recipe
    gamma: float = 1.0  # unverified against the original recipe
    tau: float = 0.999

    def __post_init__(self) -> None:
        LossWeights(self.beta, self.gamma)
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.beta, self.gamma)


@dataclass(frozen=True)
class OptimConfig:
    lr_backbone: float = 6e-4
    lr_heads: float = 6e-5
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if self.lr_backbone <= 0 or self.lr_heads <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass(frozen=True)
class ScheduleConfig:
    total_iters: int = 40000
    warmup_iters: int = 1500
    decay_floor: float = 0.01
    ema_alpha: float = 0.99

    def __post_init__(self) -> None:
        if self.total_iters < 0 or self.warmup_iters < 1:
            raise ValueError("total_iters must be >= 0 and warmup_iters >= 1")
        if self.total_iters > 0 and self.warmup_iters >= self.total_iters:
            raise ValueError(f"warmup_iters ({self.warmup_iters}) must be < total_iters ({self.total_iters})")
        if not 0.0 < self.decay_floor <= 1.0:
            raise ValueError(f"decay_floor must be in (0, 1], got {self.decay_floor}")
        EmaConfig(self.ema_alpha)

    @property
    def ema(self) -> EmaConfig:
        return EmaConfig(self.ema_alpha)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    batch_source: int = 6
    batch_target: int = 6
    eval_every: int = 4000
    checkpoint_every: int = 4000
    eval_batch_size: int = 8
    output_dir: str = "runs/siamseg"
    device: str = "cpu"

    def __post_init__(self) -> None:
        for name in ("batch_source", "batch_target", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ValueError("eval_every and checkpoint_every must be >= 0 (0 disables)")


@dataclass(frozen=True)
class TrainConfig:
    data: DataConfig
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self) -> None:
        # BatchNorm1d in the projection head needs more than one view per batch
        if self.loss.gamma > 0 and self.run.batch_target < 2:
            raise ConfigError(
                f"run.batch_target: must be >= 2 when loss.gamma > 0, got {self.run.batch_target}"
            )

    # Flat views of the recipe hyperparameters.
    @property
    def total_iters(self) -> int:
        return self.schedule.total_iters

    @property
    def alpha(self) -> float:
        return self.schedule.ema_alpha

    @property
    def tau(self) -> float:
        return self.loss.tau

    @property
    def beta(self) -> float:
        return self.loss.beta

    @property
    def gamma(self) -> float:
        return self.loss.gamma

    @property
    def seed(self) -> int:
        return self.run.seed


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def _replace(**changes: Any) -> Callable[[SimAugConfig], SimAugConfig]:
    return lambda cfg: dataclasses.replace(cfg, **changes)


_NO_CROP = {"scale_range": (1.0, 1.0)}
_NO_FLIP = {"hflip_prob": 0.0, "vflip_prob": 0.0}
_NO_JITTER = {"jitter_prob": 0.0}
_NO_EXTRA = {"grayscale_prob": 0.0, "blur_prob": 0.0}

SIM_AUG_PRESETS: dict[str, Callable[[SimAugConfig], SimAugConfig]] = {
    "full": _replace(),
    "none": _replace(**_NO_CROP, **_NO_FLIP, **_NO_JITTER, **_NO_EXTRA),
    "resize": _replace(**_NO_FLIP, **_NO_JITTER, **_NO_EXTRA),
    "flip": _replace(**_NO_CROP, **_NO_JITTER, **_NO_EXTRA),
    "resize_flip": _replace(**_NO_JITTER, **_NO_EXTRA),
    "color_jitter": _replace(**_NO_CROP, **_NO_FLIP, **_NO_EXTRA),
    "resize_flip_color_jitter": _replace(**_NO_EXTRA),
}


@dataclass(frozen=True)
class AblationPreset:
    key: str
    description: str
    beta: float
    gamma: float
    sim_preset: str | None = None


ABLATIONS: dict[str, AblationPreset] = {}


def _register(p: AblationPreset) -> AblationPreset:
    ABLATIONS[p.key] = p
    return p


_register(AblationPreset("source_only", "Source supervision only", beta=0.0, gamma=0.0))
_register(AblationPreset("self_training", "Self-training without the contrastive branch", beta=1.0, gamma=0.0))
_register(AblationPreset("siamseg", "Self-training plus Siamese contrastive learning", beta=1.0, gamma=1.0))
_register(
    AblationPreset(
        "siamseg_resize_flip",
        "Full method, views restricted to resized crop and flips",
        beta=1.0,
        gamma=1.0,
        sim_preset="resize_flip",
    )
)
_register(
    AblationPreset(
        "siamseg_color_jitter",
        "Full method, views with resized crop, flips and color jitter",
        beta=1.0,
        gamma=1.0,
        sim_preset="resize_flip_color_jitter",
    )
)


def get_ablation(key: str) -> AblationPreset:
    try:
        return ABLATIONS[key]
    except KeyError:
        raise ConfigError(f"run.ablation: unknown preset {key!r}; available: {', '.join(ABLATIONS)}") from None


def apply_ablation(config: TrainConfig, key: str) -> TrainConfig:
    preset = get_ablation(key)
    loss = dataclasses.replace(config.loss, beta=preset.beta, gamma=preset.gamma)
    augment = dataclasses.replace(config.augment, sim_preset=preset.sim_preset or config.augment.sim_preset)
    return dataclasses.replace(config, loss=loss, augment=augment)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _convert(tp: Any, value: Any, key: str) -> Any:
    origin = get_origin(tp)
    if origin in (Union, types.UnionType):
        args = get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{key}: must not be null")
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, key)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping, got {type(value).__name__}")
        return _build(tp, value, key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {type(value).__name__}")
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{key}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    return value


def _build(cls: type, data: dict[str, Any], prefix: str) -> Any:
    hints = get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in data:
        if key not in names:
            path = f"{prefix}.{key}" if prefix else key
            raise ConfigError(f"{path}: unknown key")
    kwargs = {}
    for name in names:
        if name in data:
            path = f"{prefix}.{name}" if prefix else name
            kwargs[name] = _convert(hints[name], data[name], path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{prefix or 'config'}: {e}") from e


# Per-command CLI defaults that may share the run config file.
COMMAND_SECTIONS = ("prepare_data", "synth", "eval", "report")


def _merge_section(data: dict[str, Any], section: str, values: dict[str, Any]) -> None:
    current = data.get(section) or {}
    if not isinstance(current, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(current).__name__}")
    data[section] = {**current, **values}


def config_from_dict(data: dict[str, Any]) -> TrainConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be a mapping")
    data = {k: v for k, v in data.items() if k not in COMMAND_SECTIONS}
    ablation = data.pop("ablation", None)
    if "data" not in data:
        raise ConfigError("data: missing section")
    if ablation is not None:
        # the preset's weights must be in place before cross-section validation
        preset = get_ablation(ablation)
        _merge_section(data, "loss", {"beta": preset.beta, "gamma": preset.gamma})
        if preset.sim_preset is not None:
            _merge_section(data, "augment", {"sim_preset": preset.sim_preset})
    return _build(TrainConfig, data, "")


def config_to_dict(config: TrainConfig) -> dict[str, Any]:
    """Plain JSON/YAML-safe mapping (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(config)))


def load_config(path: Path) -> TrainConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    return config_from_dict(raw or {})


def save_config(config: TrainConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(config), sort_keys=False), encoding="utf-8")
    return path


def apply_overrides(config: TrainConfig, overrides: dict[str, Any]) -> TrainConfig:
    """Set dotted keys (``"schedule.total_iters"``) and re-validate."""
    data = config_to_dict(config)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
            if node is None:
                raise ConfigError(f"{dotted}: parent section is null")
        node[leaf] = value
    return config_from_dict(data)


def config_hash(config: TrainConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def read_section(path: Path | None, section: str) -> dict[str, Any]:
    """A CLI sub-command's defaults from the optional config file."""
    if path is None:
        return {}
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    value = raw.get(section, {}) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"{section}: expected a mapping")
    return value


# Re-exported so config files and callers can name every section type from one place.
__all__ = [
    "ABLATIONS",
    "SIM_AUG_PRESETS",
    "AblationPreset",
    "AugmentConfig",
    "ConfigError",
    "DataConfig",
    "GeometricAugConfig",
    "JitterStrengths",
    "LossConfig",
    "ModelConfig",
    "OptimConfig",
    "PhotometricShift",
    "RunConfig",
    "ScheduleConfig",
    "ShapeSpec",
    "SynthConfig",
    "TrainConfig",
    "apply_ablation",
    "get_ablation",
    "apply_overrides",
    "config_from_dict",
    "config_hash",
    "config_to_dict",
    "load_config",
    "read_section",
    "save_config",
]
