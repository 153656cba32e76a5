"""siamseg command line: prepare-data, synth, train, eval, report.

Every flag can also come from the ``--config`` file: ``train`` reads the whole
file as its run config, the other sub-commands read their own section
(``prepare_data``, ``synth``, ``eval``, ``report``). Explicit flags win.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from siamseg.config import ABLATIONS, apply_ablation, load_config, read_section
from siamseg.core import IGNORE_INDEX, Domain, ShapeSpec
from siamseg.data import (
    MANIFEST_FILE,
    DatasetManifest,
    DirectoryStore,
    Split,
    SplitRule,
    TilingSpec,
    build_manifest,
    load_manifest,
    load_sample,
    save_manifest,
)
from siamseg.dataset_registry import ISPRS_CLASSES, get_profile
from siamseg.errors import CommandError, ConfigError, SiamSegError
from siamseg.palette import load_palette, palette_for
from siamseg.report import OverlayItem, render_report
from siamseg.synthetic import SynthConfig, synth_domain_pair
from siamseg.trainer import evaluate_checkpoint, fit, load_student

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts: list[Path] = field(default_factory=list)
    summary: str = ""


def _refuse_existing(paths: Sequence[Path], force: bool) -> None:
    existing = [p for p in paths if Path(p).exists()]
    if existing and not force:
        raise CommandError(f"{existing[0]} already exists; pass --force to overwrite")


def _split_ids(raw: str | Sequence[str] | None) -> frozenset[str]:
    if raw is None:
        return frozenset()
    if isinstance(raw, str):
        raw = raw.split(",")
    return frozenset(s.strip() for s in raw if s.strip())


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_prepare_data(
    root: Path,
    output: Path | None = None,
    *,
    profile: str | None = None,
    crop: int | None = None,
    stride: int | None = None,
    train_ids: str | Sequence[str] | None = None,
    test_ids: str | Sequence[str] | None = None,
    all_train: bool = False,
    classes: str | Sequence[str] | None = None,
    domain: str = "source",
    color_labels: bool = False,
    ignore_value: int | None = None,
    label_offset: int | None = None,
    force: bool = False,
) -> CommandResult:
    """Tile every raster under ``<root>/images`` and write ``<output>/manifest.tsv``."""
    root = Path(root)
    if not root.is_dir():
        raise CommandError(f"dataset root is not a readable directory: {root}")
    output = Path(output) if output is not None else root
    manifest_path = output / MANIFEST_FILE
    _refuse_existing([manifest_path], force)

    prof = get_profile(profile) if profile else None
    crop = crop or (prof.crop if prof else 512)
    stride = stride or (prof.stride if prof else crop)
    if classes is not None:
        class_names = list(classes.split(",") if isinstance(classes, str) else classes)
    else:
        class_names = list(prof.class_names if prof else ISPRS_CLASSES)

    train, test = _split_ids(train_ids), _split_ids(test_ids)
    if all_train:
        rule = SplitRule.all_train()
    elif train or test:
        rule = SplitRule(train_ids=train, test_ids=test)
    elif prof is not None:
        rule = prof.split_rule()
    else:
        rule = SplitRule.all_train()

    parents = DirectoryStore(root).scan()
    if not parents:
        logger.warning("No rasters found under %s; writing an empty manifest", root / "images")
        rule = SplitRule.all_train()

    manifest = build_manifest(
        parents,
        TilingSpec(crop=crop, stride=stride),
        rule,
        class_names=class_names,
        domain=Domain(domain),
        label_encoding="color" if color_labels else "index",
        ignore_value=ignore_value if ignore_value is not None else (prof.ignore_index if prof else IGNORE_INDEX),
        label_offset=label_offset if label_offset is not None else (prof.label_offset if prof else 0),
    )
    raster_root = None if output.resolve() == root.resolve() else root
    save_manifest(manifest, manifest_path, raster_root=raster_root)
    n_train, n_test = manifest.count(Split.TRAIN), manifest.count(Split.TEST)
    summary = f"{len(manifest)} tiles from {len(parents)} images (train {n_train}, test {n_test})"
    return CommandResult(0, [manifest_path], summary)


def cmd_synth(output: Path, config: SynthConfig | None = None, *, force: bool = False) -> CommandResult:
    """Render the paired synthetic domains to ``<output>/source`` and ``<output>/target``."""
    config = config or SynthConfig()
    output = Path(output)
    _refuse_existing([output / "source", output / "target"], force)
    try:
        source, target = synth_domain_pair(config)
        artifacts: list[Path] = []
        for name, dom in (("source", source), ("target", target)):
            folder = output / name
            artifacts.extend(dom.store.save(folder))
            artifacts.append(save_manifest(dom.manifest, folder / MANIFEST_FILE))
    except OSError as e:
        raise CommandError(f"cannot write synthetic dataset to {output}: {e}") from e
    summary = (
        f"{len(source.manifest)} source and {len(target.manifest)} target scenes "
        f"({config.shape.height}x{config.shape.width}, {config.shape.num_classes} classes) in {output}"
    )
    return CommandResult(0, artifacts, summary)


def cmd_train(
    config_path: Path,
    resume: Path | None = None,
    *,
    seed: int | None = None,
    output_dir: Path | None = None,
    ablation: str | None = None,
    force: bool = False,
) -> CommandResult:
    config = load_config(Path(config_path))
    if ablation is not None:
        config = apply_ablation(config, ablation)
    run_changes: dict[str, Any] = {}
    if seed is not None:
        run_changes["seed"] = seed
    if output_dir is not None:
        run_changes["output_dir"] = str(output_dir)
    if run_changes:
        config = dataclasses.replace(config, run=dataclasses.replace(config.run, **run_changes))

    metrics = Path(config.run.output_dir) / "metrics.csv"
    if resume is None:
        _refuse_existing([metrics], force)
    result = fit(config, resume=Path(resume) if resume is not None else None)
    artifacts = [result.final_checkpoint, result.metrics_log, *result.eval_reports]
    if result.best_checkpoint is not None:
        artifacts.append(result.best_checkpoint)
    summary = f"trained {result.steps} steps; final checkpoint {result.final_checkpoint}"
    return CommandResult(0, artifacts, summary)


def cmd_eval(
    checkpoint: Path,
    manifest: Path,
    output: Path | None = None,
    *,
    split: str = "all",
    batch_size: int = 8,
    force: bool = False,
) -> CommandResult:
    """Evaluate a checkpoint's student on a labelled manifest and write the MetricReport JSON."""
    checkpoint = Path(checkpoint)
    output = Path(output) if output is not None else checkpoint / "report.json"
    _refuse_existing([output], force)
    data = load_manifest(Path(manifest))
    if split != "all":
        data = data.split(Split(split))
    report = evaluate_checkpoint(checkpoint, data, batch_size=batch_size)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_text(report.to_json(), encoding="utf-8")
    print(report.format_table())
    summary = f"mIoU {report.mean_iou:.4f}, mF1 {report.mean_f1:.4f} over {report.pixel_count} pixels -> {output}"
    return CommandResult(0, [output], summary)


def _overlay_items(checkpoint: Path, manifest: DatasetManifest, count: int) -> list[OverlayItem]:
    student = load_student(checkpoint)
    student.eval()
    items = []
    for index in range(min(count, len(manifest))):
        sample = load_sample(manifest, index, evaluation=True)
        x = torch.from_numpy(sample.image).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            prediction = student(x).argmax(dim=1)[0].numpy().astype(np.uint8)
        safe_id = sample.id.replace("@", "_").replace(",", "_")
        items.append(OverlayItem(safe_id, sample.image, prediction, sample.label))
    return items


def cmd_report(
    output: Path,
    metrics: Path | None = None,
    eval_reports: Sequence[Path] = (),
    *,
    checkpoint: Path | None = None,
    manifest: Path | None = None,
    num_overlays: int = 4,
    palette: Path | None = None,
    alpha: float = 0.5,
    force: bool = False,
) -> CommandResult:
    """Render loss curves, IoU bars and prediction overlays under ``output``."""
    output = Path(output)
    inputs = [p for p in [metrics, *eval_reports, checkpoint, manifest] if p is not None]
    missing = [p for p in inputs if not Path(p).exists()]
    if missing:
        raise CommandError(f"report input not found: {missing[0]}")
    if (checkpoint is None) != (manifest is None):
        raise CommandError("overlays need both --checkpoint and --manifest")
    _refuse_existing([output / "index.html"], force)

    items: list[OverlayItem] = []
    chosen_palette = None
    if checkpoint is not None and manifest is not None:
        data = load_manifest(Path(manifest))
        names = data.class_names
        chosen_palette = load_palette(palette, names) if palette is not None else palette_for(names)
        items = _overlay_items(Path(checkpoint), data, num_overlays)
    artifacts = render_report(
        Path(metrics) if metrics is not None else None,
        [Path(p) for p in eval_reports],
        output,
        palette=chosen_palette,
        overlays=items,
        alpha=alpha,
    )
    return CommandResult(0, artifacts, f"report with {len(artifacts)} files in {output}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

SECTIONS = {"prepare-data": "prepare_data", "synth": "synth", "eval": "eval", "report": "report"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamseg", description=__doc__.splitlines()[0])
    parser.add_argument("--config", type=Path, help="YAML file with run config and per-command defaults")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="tile a dataset root into a manifest")
    p.add_argument("root", type=Path)
    p.add_argument("--output", type=Path)
    p.add_argument("--profile", help="dataset profile supplying crop, stride, classes and split")
    p.add_argument("--crop", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--train-ids", help="comma-separated parent ids")
    p.add_argument("--test-ids", help="comma-separated parent ids")
    p.add_argument("--all-train", action="store_true")
    p.add_argument("--classes", help="comma-separated class names in id order")
    p.add_argument("--domain", choices=[d.value for d in Domain], default="source")
    p.add_argument("--color-labels", action="store_true", help="label rasters are palette-colored RGB")
    p.add_argument("--ignore-value", type=int, help="raw label value marking void pixels (default: profile, else 255)")
    p.add_argument("--label-offset", type=int, help="subtracted from raw label values to give class ids")

    p = sub.add_parser("synth", help="render the paired synthetic domains")
    p.add_argument("output", type=Path)
    p.add_argument("--num-images", type=int, default=400)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--density", type=float, default=0.35)
    p.add_argument("--test-fraction", type=float, default=0.25)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("run_config", type=Path, nargs="?", help="run config (defaults to --config)")
    p.add_argument("--resume", type=Path, help="checkpoint directory to continue from")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--ablation", choices=sorted(ABLATIONS), help="loss-weight and view-augmentation preset")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labelled manifest")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("--output", type=Path)
    p.add_argument("--split", choices=["all", "train", "test"], default="all")
    p.add_argument("--batch-size", type=int, default=8)

    p = sub.add_parser("report", help="render curves, IoU bars and overlays")
    p.add_argument("output", type=Path)
    p.add_argument("--metrics", type=Path)
    p.add_argument("--eval-report", dest="eval_reports", type=Path, action="append", default=[])
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--num-overlays", type=int, default=4)
    p.add_argument("--palette", type=Path, help="YAML mapping class name to [r, g, b]")
    p.add_argument("--alpha", type=float, default=0.5)
    return parser


def _apply_section_defaults(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    """Feed the config file's per-command section into the sub-parser defaults."""
    known, _ = parser.parse_known_args(argv)
    section = SECTIONS.get(known.command)
    if section is None:
        return
    defaults = read_section(known.config, section)
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    subparser = sub_action.choices[known.command]
    dests = {a.dest for a in subparser._actions}
    unknown = set(defaults) - dests
    if unknown:
        raise ConfigError(f"{section}.{sorted(unknown)[0]}: unknown key")
    subparser.set_defaults(**{k: Path(v) if _is_path(subparser, k) else v for k, v in defaults.items()})


def _is_path(parser: argparse.ArgumentParser, dest: str) -> bool:
    return any(a.dest == dest and a.type is Path for a in parser._actions)


def dispatch(args: argparse.Namespace) -> CommandResult:
    if args.command == "prepare-data":
        return cmd_prepare_data(
            args.root,
            args.output,
            profile=args.profile,
            crop=args.crop,
            stride=args.stride,
            train_ids=args.train_ids,
            test_ids=args.test_ids,
            all_train=args.all_train,
            classes=args.classes,
            domain=args.domain,
            color_labels=args.color_labels,
            ignore_value=args.ignore_value,
            label_offset=args.label_offset,
            force=args.force,
        )
    if args.command == "synth":
        size = args.size
        config = SynthConfig(
            seed=args.seed if args.seed is not None else 0,
            num_images=args.num_images,
            shape=ShapeSpec(size, size, 3, args.classes),
            shape_density=args.density,
            test_fraction=args.test_fraction,
        )
        return cmd_synth(args.output, config, force=args.force)
    if args.command == "train":
        config_path = args.run_config or args.config
        if config_path is None:
            raise CommandError("train needs a run config (positional or --config)")
        return cmd_train(
            config_path, args.resume, seed=args.seed, output_dir=args.output_dir, ablation=args.ablation, force=args.force
        )
    if args.command == "eval":
        return cmd_eval(
            args.checkpoint, args.manifest, args.output, split=args.split, batch_size=args.batch_size, force=args.force
        )
    return cmd_report(
        args.output,
        args.metrics,
        args.eval_reports,
        checkpoint=args.checkpoint,
        manifest=args.manifest,
        num_overlays=args.num_overlays,
        palette=args.palette,
        alpha=args.alpha,
        force=args.force,
    )


def run(argv: Sequence[str] | None = None) -> CommandResult:
    """Parse and execute; errors become a CommandResult with exit code 1."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_section_defaults(parser, argv)
        args = parser.parse_args(argv)
        logging.getLogger().setLevel(args.log_level)
        return dispatch(args)
    except (SiamSegError, ValueError, KeyError, NotImplementedError) as e:
        message = e.args[0] if isinstance(e, KeyError) and e.args else str(e)
        logger.error("%s", message)
        return CommandResult(1, [], f"Error: {message}")


def main(argv: Sequence[str] | None = None) -> None:
    logging.basicConfig(level=logging.INFO, format=LOG_FORMAT, stream=sys.stderr)
    result = run(argv)
    if result.exit_code == 0:
        print(result.summary)
    else:
        print(result.summary, file=sys.stderr)
    sys.exit(result.exit_code)


if __name__ == "__main__":
    main()
