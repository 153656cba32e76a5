"""MCP Resources for siamseg."""

from __future__ import annotations

from mcp.server.fastmcp import FastMCP

from siamseg.config import ABLATIONS, SIM_AUG_PRESETS
from siamseg.dataset_registry import list_profiles, list_tasks


def register_resources(mcp: FastMCP) -> None:
    """Register MCP resources."""

    @mcp.resource("siamseg://datasets")
    async def datasets() -> str:
        """Dataset profiles with tiling and class order."""
        lines = []
        for p in list_profiles():
            lines.append(f"- [{p.key}] {p.name}: crop {p.crop}/stride {p.stride}; classes {', '.join(p.class_names)}")
        return "\n".join(lines)

    @mcp.resource("siamseg://tasks")
    async def tasks() -> str:
        """Cross-domain adaptation tasks."""
        return "\n".join(f"- [{t.key}] {t.name}: {t.source} -> {t.target}" for t in list_tasks())

    @mcp.resource("siamseg://ablations")
    async def ablations() -> str:
        """Loss-weight presets and view-augmentation presets."""
        lines = ["Ablation presets:"]
        for a in ABLATIONS.values():
            views = f", views={a.sim_preset}" if a.sim_preset else ""
            lines.append(f"- [{a.key}] {a.description} (beta={a.beta}, gamma={a.gamma}{views})")
        lines.append("")
        lines.append("View augmentation presets: " + ", ".join(SIM_AUG_PRESETS))
        return "\n".join(lines)
