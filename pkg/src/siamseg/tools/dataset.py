"""Dataset tools: tile a dataset root, render the synthetic pair, browse profiles."""

from __future__ import annotations

import asyncio
import logging
from pathlib import Path

from mcp.server.fastmcp import FastMCP

from siamseg.cli import cmd_prepare_data, cmd_synth
from siamseg.core import ShapeSpec
from siamseg.dataset_registry import list_profiles, list_tasks
from siamseg.errors import SiamSegError
from siamseg.synthetic import SynthConfig

logger = logging.getLogger(__name__)


def register(mcp: FastMCP) -> None:
    """Register dataset tools."""

    @mcp.tool()
    async def dataset_prepare(
        root: str,
        output: str | None = None,
        profile: str | None = None,
        crop: int | None = None,
        stride: int | None = None,
        train_ids: str | None = None,
        test_ids: str | None = None,
        domain: str = "source",
        color_labels: bool = False,
        ignore_value: int | None = None,
        label_offset: int | None = None,
        force: bool = False,
    ) -> str:
        """Tile the rasters under a dataset root into a manifest.

        Args:
            root: Folder holding images/ and (optionally) labels/.
            output: Where manifest.tsv goes (default: the root itself).
            profile: Dataset profile key (see dataset_profiles) supplying crop, stride, classes and split.
            crop: Square tile size in pixels (overrides the profile).
            stride: Tile stride in pixels (overrides the profile).
            train_ids: Comma-separated parent ids for the train split.
            test_ids: Comma-separated parent ids for the test split.
            domain: "source" or "target".
            color_labels: Label rasters are palette-colored RGB instead of class ids.
            ignore_value: Raw label value marking void pixels (overrides the profile).
            label_offset: Subtracted from raw label values to give class ids (overrides the profile).
            force: Overwrite an existing manifest.

        Returns:
            Tile counts per split and the manifest path.
        """
        try:
            result = await asyncio.to_thread(
                cmd_prepare_data,
                Path(root),
                Path(output) if output else None,
                profile=profile,
                crop=crop,
                stride=stride,
                train_ids=train_ids,
                test_ids=test_ids,
                domain=domain,
                color_labels=color_labels,
                ignore_value=ignore_value,
                label_offset=label_offset,
                force=force,
            )
        except (SiamSegError, ValueError, KeyError) as e:
            return f"Error: {e}"
        return f"Manifest written.\n  {result.summary}\n  Path: {result.artifacts[0]}"

    @mcp.tool()
    async def dataset_synth(
        output: str,
        seed: int = 0,
        num_images: int = 400,
        size: int = 64,
        num_classes: int = 4,
        force: bool = False,
    ) -> str:
        """Render the paired synthetic source/target domains to disk.

        Args:
            output: Folder that receives source/ and target/.
            seed: Generator seed; the same seed always gives the same files.
            num_images: Scenes per domain.
            size: Square scene size in pixels.
            num_classes: Number of classes including background.
            force: Overwrite existing source/ and target/ folders.

        Returns:
            Scene counts and the two manifest paths.
        """
        try:
            config = SynthConfig(seed=seed, num_images=num_images, shape=ShapeSpec(size, size, 3, num_classes))
            result = await asyncio.to_thread(cmd_synth, Path(output), config, force=force)
        except (SiamSegError, ValueError) as e:
            return f"Error: {e}"
        manifests = [str(p) for p in result.artifacts if p.name == "manifest.tsv"]
        return "Synthetic dataset written.\n  " + result.summary + "\n  Manifests: " + ", ".join(manifests)

    @mcp.tool()
    async def dataset_profiles() -> str:
        """List the dataset profiles and the cross-domain adaptation tasks.

        Returns:
            One line per profile (tiling, classes, split sizes) and per task.
        """
        lines = ["=== Dataset Profiles ==="]
        for p in list_profiles():
            split = f"{len(p.train_ids)} train / {len(p.test_ids)} test parents" if p.train_ids else "all train"
            lines.append(f"- {p.key}: {p.name} [{p.modality}, GSD {p.gsd}]")
            lines.append(f"    crop {p.crop}, stride {p.stride}, {len(p.class_names)} classes, {split}")
            lines.append(f"    raw labels: void = {p.ignore_index}, class id = value - {p.label_offset}")
            if p.notes:
                lines.append(f"    {p.notes}")
        lines.append("")
        lines.append("=== Adaptation Tasks ===")
        for t in list_tasks():
            lines.append(f"- {t.key}: {t.name} ({t.source} -> {t.target})")
        return "\n".join(lines)
