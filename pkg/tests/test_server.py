from __future__ import annotations

import asyncio
import threading
import time

from siamseg.cli import CommandResult
from siamseg.server import mcp
from siamseg.tools import training

from _helpers import tiny_config, tiny_synth, write_config


def _text(result) -> str:
    # Newer FastMCP versions return (content, structured_output).
    if isinstance(result, tuple):
        result = result[0]
    return "".join(block.text for block in result)


def _call(name: str, **arguments) -> str:
    return _text(asyncio.run(mcp.call_tool(name, arguments)))


def test_every_tool_is_registered():
    names = {tool.name for tool in asyncio.run(mcp.list_tools())}
    assert names == {
        "dataset_prepare",
        "dataset_synth",
        "dataset_profiles",
        "train_start",
        "train_status",
        "train_list",
        "evaluate_checkpoint",
        "report_render",
    }


def test_prompts_and_resources_are_registered():
    prompts = {p.name for p in asyncio.run(mcp.list_prompts())}
    assert prompts == {"synthetic_ablation", "adaptation_run"}
    uris = {str(r.uri) for r in asyncio.run(mcp.list_resources())}
    assert uris == {"siamseg://datasets", "siamseg://tasks", "siamseg://ablations"}


def test_tasks_resource_lists_isprs_pairs():
    contents = list(asyncio.run(mcp.read_resource("siamseg://tasks")))
    assert "pot_irrg_to_vai_irrg" in contents[0].content


def test_dataset_profiles_lists_profiles_and_tasks():
    text = _call("dataset_profiles")
    assert "=== Dataset Profiles ===" in text
    assert "potsdam_irrg" in text
    assert "24 train / 14 test parents" in text
    assert "=== Adaptation Tasks ===" in text


def test_dataset_synth_writes_manifests(tmp_path):
    text = _call("dataset_synth", output=str(tmp_path / "synth"), num_images=4, size=32, num_classes=3)
    assert text.startswith("Synthetic dataset written.")
    assert (tmp_path / "synth" / "source" / "manifest.tsv").exists()
    again = _call("dataset_synth", output=str(tmp_path / "synth"), num_images=4, size=32, num_classes=3)
    assert again.startswith("Error:") and "--force" in again


def test_dataset_prepare_reports_errors(tmp_path):
    assert _call("dataset_prepare", root=str(tmp_path / "absent")).startswith("Error:")


def test_train_start_and_status(tmp_path):
    config = write_config(tiny_config(tmp_path / "run", total_iters=3), tmp_path / "config.yaml")
    text = _call("train_start", config_path=str(config), wait=True)
    assert text.startswith("Training completed.")
    run_id = text.split("Run ID: ")[1].split()[0]
    status = _call("train_status", run_id=run_id)
    assert "completed" in status
    assert "step 3/3" in status
    assert run_id in _call("train_list")


def test_train_start_bad_config(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("loss: {betta: 1}\ndata: {synthetic: {}}\n")
    assert _call("train_start", config_path=str(bad)).startswith("Error: loss.betta")
    assert _call("train_status", run_id="run-missing").startswith("Error: Run 'run-missing' not found")


def test_evaluate_checkpoint_and_report(tmp_path):
    config = write_config(tiny_config(tmp_path / "run", total_iters=3), tmp_path / "config.yaml")
    _call("train_start", config_path=str(config), wait=True)
    _call("dataset_synth", output=str(tmp_path / "synth"), num_images=tiny_synth().num_images, size=32, num_classes=4)
    manifest = tmp_path / "synth" / "target" / "manifest.tsv"
    checkpoint = tmp_path / "run" / "checkpoints" / "final"

    text = _call("evaluate_checkpoint", checkpoint=str(checkpoint), manifest=str(manifest), split="test")
    assert "\nmean " in text and "pixels: " in text
    missing = _call("evaluate_checkpoint", checkpoint=str(checkpoint), manifest=str(tmp_path / "nope.tsv"))
    assert missing.startswith("Error:")

    rendered = _call("report_render", run_dir=str(tmp_path / "run"), checkpoint=str(checkpoint), manifest=str(manifest))
    assert rendered.startswith("Report rendered.")
    assert (tmp_path / "run" / "report" / "index.html").exists()
    assert (tmp_path / "run" / "report" / "loss_curves.png").exists()


def test_report_render_on_empty_run(tmp_path):
    text = _call("report_render", run_dir=str(tmp_path))
    assert text.startswith("Report rendered.")
    assert "no data" in (tmp_path / "report" / "index.html").read_text()


def test_background_runs_never_overlap(monkeypatch):
    active, peak = [0], [0]
    guard = threading.Lock()

    def fake_train(config_path, **kwargs):
        with guard:
            active[0] += 1
            peak[0] = max(peak[0], active[0])
        time.sleep(0.05)
        with guard:
            active[0] -= 1
        return CommandResult(0, [], f"trained {config_path.name}")

    monkeypatch.setattr(training, "cmd_train", fake_train)
    runs = [
        training.TrainingRun(f"run-{i}", f"cfg{i}.yaml", "out", 1, training._now())
        for i in range(3)
    ]
    assert all(r.status == "queued" for r in runs)

    async def launch():
        await asyncio.gather(*(training._execute(r) for r in runs))

    asyncio.run(launch())
    assert peak[0] == 1
    assert [r.status for r in runs] == ["completed"] * 3
    assert runs[2].summary == "trained cfg2.yaml"
