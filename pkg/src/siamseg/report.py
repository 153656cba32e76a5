"""Static training report: loss curves, per-class IoU bars, prediction overlays, HTML index.

Everything renders offline to files under one output directory.
"""

from __future__ import annotations

import csv
import html
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from siamseg.core import MetricReport  # noqa: E402
from siamseg.errors import ShapeError  # noqa: E402
from siamseg.losses import METRICS_COLUMNS  # noqa: E402
from siamseg.palette import Palette, colorize, palette_for  # noqa: E402

logger = logging.getLogger(__name__)

LOSS_CURVES = "loss_curves.png"
IOU_BARS = "iou_bars.png"
INDEX = "index.html"
NO_DATA = "no data"


@dataclass
class OverlayItem:
    """One tile to render: the input image, the prediction and, optionally, the ground truth."""

    name: str
    image: np.ndarray  # H x W x 3, uint8 or float in [0, 1]
    prediction: np.ndarray  # H x W ids
    label: np.ndarray | None = None


def _to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def overlay(image: np.ndarray, prediction: np.ndarray, palette: Palette, alpha: float = 0.5) -> np.ndarray:
    """Blend the palette-mapped prediction over the image; ``alpha=1`` is the pure palette map."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    colored = colorize(prediction, palette)
    base = _to_uint8(image)[..., :3]
    if base.shape != colored.shape:
        raise ShapeError(f"image {base.shape} does not match prediction {colored.shape}")
    if alpha == 1.0:
        return colored
    blended = alpha * colored.astype(np.float64) + (1.0 - alpha) * base.astype(np.float64)
    return blended.round().astype(np.uint8)


def read_metrics(path: Path) -> list[dict[str, float]]:
    """Rows of a metrics CSV as floats; a missing or header-only file gives no rows.

    A run that is still writing may leave its last row incomplete; that row is
    skipped. An incomplete row anywhere else is a ValueError.
    """
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return []
    with path.open(newline="", encoding="utf-8") as f:
        raw = list(csv.DictReader(f))
    rows = []
    for i, row in enumerate(raw):
        try:
            rows.append({k: float(row[k]) for k in METRICS_COLUMNS})
        except (KeyError, TypeError, ValueError):
            if i == len(raw) - 1:
                logger.debug("Skipping incomplete last row of %s", path)
                break
            raise ValueError(f"{path}: malformed metrics row {i + 2}") from None
    return rows


def plot_loss_curves(rows: Sequence[dict[str, float]], path: Path) -> Path:
    steps = [r["step"] for r in rows]
    fig, (ax_loss, ax_q) = plt.subplots(1, 2, figsize=(11, 4))
    for key in ("L_S", "L_T", "L_CLR", "L_total"):
        ax_loss.plot(steps, [r[key] for r in rows], label=key)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_q.plot(steps, [r["q_mean"] for r in rows], label="q_mean")
    ax_q.plot(steps, [r["lr"] / max(r["lr"] for r in rows) for r in rows], label="lr (relative)")
    ax_q.set_xlabel("step")
    ax_q.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_iou_bars(report: MetricReport, palette: Palette, path: Path) -> Path:
    names = list(report.class_names)
    values = [0.0 if np.isnan(v) else v for v in report.per_class_iou]
    colors = [tuple(c / 255.0 for c in color) for color in palette.colors[: len(names)]]
    fig, ax = plt.subplots(figsize=(max(6, len(names) * 1.1), 4))
    ax.bar(names, values, color=colors, edgecolor="black")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title(f"mIoU {report.mean_iou:.4f}  mF1 {report.mean_f1:.4f}")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def write_overlays(items: Sequence[OverlayItem], palette: Palette, directory: Path, alpha: float = 0.5) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for item in items:
        panels = [_to_uint8(item.image)[..., :3], overlay(item.image, item.prediction, palette, alpha)]
        if item.label is not None:
            panels.append(colorize(item.label, palette))
        path = directory / f"{item.name}.png"
        Image.fromarray(np.concatenate(panels, axis=1)).save(path)
        written.append(path)
    return written


def _section(title: str, body: str) -> str:
    return f"<h2>{html.escape(title)}</h2>\n{body}\n"


def _img(path: Path, root: Path) -> str:
    return f'<img src="{html.escape(path.relative_to(root).as_posix())}">'


def _placeholder() -> str:
    return f'<p class="placeholder">{NO_DATA}</p>'


def _report_table(report: MetricReport) -> str:
    rows = "".join(
        f"<tr><td>{html.escape(k)}</td><td>{'-' if v is None else html.escape(str(v))}</td></tr>"
        for k, v in report.to_dict().items()
    )
    return f"<table>{rows}</table>"


def render_report(
    metrics_csv: Path | None,
    eval_reports: Sequence[Path],
    output_dir: Path,
    palette: Palette | None = None,
    overlays: Sequence[OverlayItem] = (),
    alpha: float = 0.5,
) -> list[Path]:
    """Render every available section; missing inputs become "no data" placeholders."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    rows = read_metrics(metrics_csv) if metrics_csv is not None else []
    if rows:
        written.append(plot_loss_curves(rows, output_dir / LOSS_CURVES))
        curves = _img(written[-1], output_dir)
    else:
        logger.warning("No metrics rows to plot")
        curves = _placeholder()

    latest = None
    for path in eval_reports:  # ordered; the last one is charted
        latest = MetricReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    if latest is not None:
        palette = palette or palette_for(latest.class_names)
        written.append(plot_iou_bars(latest, palette, output_dir / IOU_BARS))
        bars = _img(written[-1], output_dir) + _report_table(latest)
    else:
        bars = _placeholder()

    if overlays:
        if palette is None:
            raise ValueError("overlays need a palette")
        paths = write_overlays(overlays, palette, output_dir / "overlays", alpha)
        written.extend(paths)
        gallery = "\n".join(f"<figure>{_img(p, output_dir)}<figcaption>{html.escape(p.stem)}</figcaption></figure>" for p in paths)
    else:
        gallery = _placeholder()

    page = (
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Training report</title>\n"
        "<style>body{font-family:sans-serif;margin:2em}img{max-width:100%}"
        "table{border-collapse:collapse}td{border:1px solid #ccc;padding:2px 8px}"
        ".placeholder{color:#888;font-style:italic}</style></head><body>\n"
        "<h1>Training report</h1>\n"
        + _section("Loss curves", curves)
        + _section("Per-class IoU", bars)
        + _section("Prediction overlays", gallery)
        + "</body></html>\n"
    )
    index = output_dir / INDEX
    index.write_text(page, encoding="utf-8")
    written.append(index)
    return written

