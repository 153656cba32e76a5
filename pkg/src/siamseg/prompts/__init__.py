"""MCP Prompts for guided adaptation experiments."""

from __future__ import annotations

from mcp.server.fastmcp import FastMCP


def register_prompts(mcp: FastMCP) -> None:
    """Register MCP prompts for guided experiment workflows."""

    @mcp.prompt()
    def synthetic_ablation(config_path: str = "configs/synthetic.yaml", seeds: str = "0,1,2") -> str:
        """Guide the desk-scale ablation on the synthetic paired domains.

        Args:
            config_path: Run config of the synthetic benchmark.
            seeds: Comma-separated seeds; every arm runs once per seed.
        """
        seed_list = [s.strip() for s in seeds.split(",") if s.strip()]
        return (
            f"I want to compare source-only training, self-training, and the full method "
            f"with the Siamese branch on the synthetic benchmark ({config_path}).\n\n"
            f"Please follow these steps:\n"
            f"1. For each seed in {', '.join(seed_list)}, start three runs with train_start "
            f"using ablation='source_only', 'self_training' and 'siamseg', each with its own output_dir "
            f"(e.g. runs/ablation/<arm>/seed<seed>)\n"
            f"2. Poll train_status until every run has completed\n"
            f"3. Read the final mIoU of each run from <output_dir>/eval/final.json\n"
            f"4. Report the mean target mIoU per arm and check that self-training beats "
            f"source-only by at least 3 points and the full method beats self-training by at least 2\n"
            f"5. Render a report for the best full-method run with report_render\n\n"
            f"Start by launching the source-only runs."
        )

    @mcp.prompt()
    def adaptation_run(task: str, data_root: str) -> str:
        """Guide a full adaptation run on a registered task.

        Args:
            task: Task key (see the siamseg://tasks resource).
            data_root: Folder that holds one sub-folder per dataset profile.
        """
        return (
            f"I want to train on the adaptation task '{task}' with datasets under {data_root}.\n\n"
            f"Steps:\n"
            f"1. Look up the task's source and target profiles with dataset_profiles\n"
            f"2. Run dataset_prepare for each profile with output={data_root}/<profile>, "
            f"domain='source' for the source and 'target' for the target\n"
            f"3. Write a run config with data.task='{task}' and data.root='{data_root}'\n"
            f"4. Start training with train_start(wait=False) and follow it with train_status\n"
            f"5. When it finishes, evaluate checkpoints/best and checkpoints/final on the target "
            f"manifest's test split with evaluate_checkpoint\n"
            f"6. Render the report with report_render"
        )
