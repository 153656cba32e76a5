"""Report tool."""

from __future__ import annotations

import asyncio
import logging
from pathlib import Path

from mcp.server.fastmcp import FastMCP

from siamseg.cli import cmd_report
from siamseg.errors import SiamSegError

logger = logging.getLogger(__name__)


def register(mcp: FastMCP) -> None:
    """Register report tools."""

    @mcp.tool()
    async def report_render(
        run_dir: str,
        output: str | None = None,
        checkpoint: str | None = None,
        manifest: str | None = None,
        num_overlays: int = 4,
        force: bool = True,
    ) -> str:
        """Render the static report of a training run.

        Args:
            run_dir: Run output folder (holding metrics.csv and eval/).
            output: Report folder (default: <run_dir>/report).
            checkpoint: Checkpoint used for prediction overlays.
            manifest: Manifest whose first tiles are overlaid (needs checkpoint).
            num_overlays: Number of overlay tiles.
            force: Overwrite an existing report.

        Returns:
            Path of the HTML index and the number of rendered files.
        """
        run = Path(run_dir)
        metrics = run / "metrics.csv"
        eval_reports = sorted((run / "eval").glob("step_*.json"))
        final = run / "eval" / "final.json"
        if final.exists():
            eval_reports.append(final)
        try:
            result = await asyncio.to_thread(
                cmd_report,
                Path(output) if output else run / "report",
                metrics if metrics.exists() else None,
                eval_reports,
                checkpoint=Path(checkpoint) if checkpoint else None,
                manifest=Path(manifest) if manifest else None,
                num_overlays=num_overlays,
                force=force,
            )
        except (SiamSegError, ValueError) as e:
            return f"Error: {e}"
        index = next(p for p in result.artifacts if p.name == "index.html")
        return f"Report rendered.\n  Index: {index}\n  {result.summary}"
