"""Evaluation tool."""

from __future__ import annotations

import asyncio
import logging
from pathlib import Path

from mcp.server.fastmcp import FastMCP

from siamseg.data import Split, load_manifest
from siamseg.errors import SiamSegError
from siamseg.trainer import evaluate_checkpoint

logger = logging.getLogger(__name__)


def register(mcp: FastMCP) -> None:
    """Register evaluation tools."""

    @mcp.tool(name="evaluate_checkpoint")
    async def evaluate_checkpoint_tool(
        checkpoint: str,
        manifest: str,
        split: str = "all",
        output: str | None = None,
    ) -> str:
        """Evaluate a checkpoint's student network on a labelled manifest.

        Args:
            checkpoint: Checkpoint directory (e.g. runs/x/checkpoints/best).
            manifest: manifest.tsv of a dataset with ground-truth labels.
            split: "all", "train" or "test".
            output: Optional path for the MetricReport JSON.

        Returns:
            Per-class IoU/F1 table with mIoU and mF1.
        """

        def _run() -> str:
            data = load_manifest(Path(manifest))
            if split != "all":
                data = data.split(Split(split))
            report = evaluate_checkpoint(Path(checkpoint), data)
            if output:
                Path(output).parent.mkdir(parents=True, exist_ok=True)
                Path(output).write_text(report.to_json(), encoding="utf-8")
            return report.format_table()

        try:
            table = await asyncio.to_thread(_run)
        except (SiamSegError, ValueError) as e:
            return f"Error: {e}"
        suffix = f"\n\nReport saved to {output}" if output else ""
        return f"Evaluation of {checkpoint} on {manifest} ({split}):\n\n{table}{suffix}"
