"""siamseg MCP Server - Main entry point.

Serves dataset preparation, training, evaluation and reporting as MCP tools.
"""

from __future__ import annotations

import logging
import sys
from contextlib import asynccontextmanager
from typing import AsyncIterator

from mcp.server.fastmcp import FastMCP

logger = logging.getLogger(__name__)


@asynccontextmanager
async def server_lifespan(server: FastMCP) -> AsyncIterator[dict]:
    """Manage server lifecycle - wait for background runs on shutdown."""
    logger.info("siamseg MCP Server starting...")
    try:
        yield {}
    finally:
        from siamseg.tools.training import _runs

        running = [r for r in _runs.values() if r.task is not None and not r.task.done()]
        if running:
            logger.warning("Shutting down with %d training run(s) still in progress", len(running))
        logger.info("siamseg MCP Server shutting down...")


# Create the MCP server
mcp = FastMCP(
    "SiamSeg Training",
    instructions=(
        "Unsupervised domain adaptation for remote-sensing segmentation. "
        "Prepare tiled datasets, render synthetic paired domains, train with "
        "self-training and a Siamese contrastive branch, evaluate checkpoints, "
        "and render reports."
    ),
    lifespan=server_lifespan,
)

# Register all tools
from siamseg.tools import dataset, evaluation, report, training  # noqa: E402

dataset.register(mcp)
training.register(mcp)
evaluation.register(mcp)
report.register(mcp)

# Register prompts
from siamseg.prompts import register_prompts  # noqa: E402

register_prompts(mcp)

# Register resources
from siamseg.resources import register_resources  # noqa: E402

register_resources(mcp)


def main():
    """Run the MCP server (stdio transport)."""
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,  # MCP uses stdout for protocol, logs go to stderr
    )
    mcp.run(transport="stdio")


if __name__ == "__main__":
    main()
