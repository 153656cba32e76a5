"""Training tools.

Tools:
  - train_start: launch a run from a config file (blocking, or in the background)
  - train_status: progress of a run from its metrics log and eval reports
  - train_list: every run started in this server session
"""

from __future__ import annotations

import asyncio
import logging
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from mcp.server.fastmcp import FastMCP

from siamseg.cli import CommandResult, cmd_train
from siamseg.config import load_config
from siamseg.errors import SiamSegError
from siamseg.report import read_metrics

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Run state
# ---------------------------------------------------------------------------


@dataclass
class TrainingRun:
    """A training run launched through train_start."""

    run_id: str
    config_path: str
    output_dir: str
    total_iters: int
    started_at: str
    status: str = "queued"  # queued | running | completed | failed
    finished_at: str | None = None
    summary: str = ""
    error: str | None = None
    task: asyncio.Task | None = field(default=None, repr=False)


_runs: dict[str, TrainingRun] = {}

# Training seeds the process-wide RNGs, so runs execute one at a time.
_train_lock = threading.Lock()


def _generate_run_id() -> str:
    return f"run-{uuid.uuid4().hex[:8]}"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _progress(run: TrainingRun) -> str:
    try:
        rows = read_metrics(Path(run.output_dir) / "metrics.csv")
    except ValueError as e:
        return f"metrics log unreadable: {e}"
    if not rows:
        return "no steps logged yet"
    last = rows[-1]
    return (
        f"step {int(last['step']) + 1}/{run.total_iters}  "
        f"L_total {last['L_total']:.4f} (L_S {last['L_S']:.4f}, L_T {last['L_T']:.4f}, "
        f"L_CLR {last['L_CLR']:.4f})  q_mean {last['q_mean']:.3f}"
    )


def _train_serialized(run: TrainingRun, **kwargs) -> CommandResult:
    with _train_lock:
        run.status = "running"
        logger.info("Run %s started", run.run_id)
        return cmd_train(Path(run.config_path), **kwargs)


async def _execute(run: TrainingRun, **kwargs) -> None:
    try:
        result: CommandResult = await asyncio.to_thread(_train_serialized, run, **kwargs)
    except (SiamSegError, ValueError, KeyError) as e:
        run.status = "failed"
        run.error = str(e)
        logger.error("Run %s failed: %s", run.run_id, e)
    else:
        run.status = "completed"
        run.summary = result.summary
    finally:
        run.finished_at = _now()


# ---------------------------------------------------------------------------
# Tool registration
# ---------------------------------------------------------------------------


def register(mcp: FastMCP) -> None:
    """Register training tools."""

    @mcp.tool()
    async def train_start(
        config_path: str,
        output_dir: str | None = None,
        seed: int | None = None,
        ablation: str | None = None,
        resume: str | None = None,
        force: bool = False,
        wait: bool = False,
    ) -> str:
        """Start a training run.

        Args:
            config_path: YAML run config.
            output_dir: Overrides run.output_dir.
            seed: Overrides run.seed.
            ablation: Preset key (source_only, self_training, siamseg, ...).
            resume: Checkpoint directory to continue from.
            force: Overwrite an existing run in output_dir.
            wait: If True, block until training ends. If False (default), return a run ID immediately.
                Runs execute one at a time; a run started while another trains waits in "queued".

        Returns:
            Run ID and where its outputs go; use train_status to follow progress.
        """
        try:
            config = load_config(Path(config_path))
        except SiamSegError as e:
            return f"Error: {e}"
        run = TrainingRun(
            run_id=_generate_run_id(),
            config_path=config_path,
            output_dir=output_dir or config.run.output_dir,
            total_iters=config.schedule.total_iters,
            started_at=_now(),
        )
        _runs[run.run_id] = run
        kwargs = dict(
            resume=Path(resume) if resume else None,
            seed=seed,
            output_dir=Path(output_dir) if output_dir else None,
            ablation=ablation,
            force=force,
        )

        if not wait:
            run.task = asyncio.create_task(_execute(run, **kwargs))
            return (
                f"Training started.\n"
                f"  Run ID: {run.run_id}\n"
                f"  Output: {run.output_dir}\n"
                f"  Steps: {run.total_iters}\n\n"
                f"Use train_status to check progress."
            )

        await _execute(run, **kwargs)
        if run.status == "failed":
            return f"Error: {run.error}"
        return f"Training completed.\n  Run ID: {run.run_id}\n  {run.summary}"

    @mcp.tool()
    async def train_status(run_id: str) -> str:
        """Show the state and latest losses of a run.

        Args:
            run_id: ID returned by train_start.

        Returns:
            Status, last logged step and the latest evaluation files.
        """
        run = _runs.get(run_id)
        if run is None:
            available = ", ".join(_runs) if _runs else "(none)"
            return f"Error: Run '{run_id}' not found. Available runs: {available}"

        lines = [
            f"Run {run.run_id}: {run.status}",
            f"  Config: {run.config_path}",
            f"  Output: {run.output_dir}",
            f"  Started: {run.started_at}",
        ]
        if run.finished_at:
            lines.append(f"  Finished: {run.finished_at}")
        lines.append(f"  Progress: {_progress(run)}")
        evals = sorted((Path(run.output_dir) / "eval").glob("*.json"))
        if evals:
            lines.append(f"  Latest eval report: {evals[-1]}")
        if run.summary:
            lines.append(f"  {run.summary}")
        if run.error:
            lines.append(f"  Error: {run.error}")
        return "\n".join(lines)

    @mcp.tool()
    async def train_list() -> str:
        """List every run started in this session.

        Returns:
            One line per run with its status.
        """
        if not _runs:
            return "No training runs. Use train_start to launch one."
        lines = [f"Training runs ({len(_runs)}):"]
        for run in _runs.values():
            lines.append(f"- [{run.run_id}] {run.status}  {run.config_path} -> {run.output_dir}")
        return "\n".join(lines)
