"""Checkpoint directories: named-parameter archives plus a small YAML manifest.

Layout::

    <dir>/student.pt  teacher.pt  heads.pt
    <dir>/optimizer.pt  scheduler.pt  state.pt
    <dir>/manifest.yaml   architecture, shape, config hash, step

Writes go to a temporary sibling directory that is renamed into place, so a
reader never sees a half-written checkpoint.
"""

from __future__ import annotations

import dataclasses
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch
import yaml

from siamseg.core import ShapeSpec
from siamseg.errors import SiamSegError

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.yaml"
ARCHIVES = ("student", "teacher", "heads", "optimizer", "scheduler", "state")


@dataclass
class CheckpointManifest:
    architecture: str
    shape: ShapeSpec
    config_hash: str
    step: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "architecture": self.architecture,
            "shape": dataclasses.asdict(self.shape),
            "config_hash": self.config_hash,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> CheckpointManifest:
        return cls(
            architecture=data["architecture"],
            shape=ShapeSpec(**data["shape"]),
            config_hash=data["config_hash"],
            step=int(data["step"]),
        )


def save_checkpoint(
    directory: Path,
    manifest: CheckpointManifest,
    archives: dict[str, Any],
    config: dict[str, Any] | None = None,
) -> Path:
    """Atomically write (or replace) a checkpoint directory."""
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{directory.name}-", dir=directory.parent))
    try:
        for name, payload in archives.items():
            torch.save(payload, tmp / f"{name}.pt")
        (tmp / MANIFEST_FILE).write_text(yaml.safe_dump(manifest.to_dict(), sort_keys=False), encoding="utf-8")
        if config is not None:
            (tmp / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
        if directory.exists():
            stale = directory.with_name(f".{directory.name}-stale")
            shutil.rmtree(stale, ignore_errors=True)
            os.replace(directory, stale)
            os.replace(tmp, directory)
            shutil.rmtree(stale, ignore_errors=True)
        else:
            os.replace(tmp, directory)
    except OSError as e:
        shutil.rmtree(tmp, ignore_errors=True)
        raise SiamSegError(f"failed to write checkpoint {directory}: {e}") from e
    logger.info("Checkpoint written: %s (step %d)", directory, manifest.step)
    return directory


def read_manifest(directory: Path) -> CheckpointManifest:
    path = Path(directory) / MANIFEST_FILE
    if not path.exists():
        raise SiamSegError(f"not a checkpoint directory (no {MANIFEST_FILE}): {directory}")
    return CheckpointManifest.from_dict(yaml.safe_load(path.read_text(encoding="utf-8")))


def read_config(directory: Path) -> dict[str, Any] | None:
    path = Path(directory) / "config.yaml"
    if not path.exists():
        return None
    return yaml.safe_load(path.read_text(encoding="utf-8"))


def load_archive(directory: Path, name: str) -> Any:
    path = Path(directory) / f"{name}.pt"
    if not path.exists():
        raise SiamSegError(f"checkpoint {directory} has no {name} archive")
    return torch.load(path, map_location="cpu", weights_only=False)
