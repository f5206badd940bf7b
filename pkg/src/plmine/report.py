"""Static report: PNG box overlays and one HTML page of tables and loss curves.

Everything written here is a deterministic function of the inputs, so two
runs over the same files produce byte-identical reports.
"""
from __future__ import annotations

import hashlib
import html
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .evaluation import EvalReport
from .io import DetectionDataset
from .miner import PseudoLabel
from .synthetic import SyntheticScene, rasterize

GT_COLOR = (30, 160, 60)
PL_COLORS = {"vl": (210, 40, 40), "teacher": (40, 90, 210)}


def _canvas(dataset: DetectionDataset, image_id, root: Path | None) -> Image.Image:
    im = dataset.image(image_id)
    if im.file_name is not None and root is not None and (root / im.file_name).exists():
        return Image.open(root / im.file_name).convert("RGB")
    if im.seed is not None:
        objs = tuple((a.category_id, a.box) for a in dataset.annotations if a.image_id == image_id)
        scene = SyntheticScene(im.extent, objs, int(im.seed), tuple(dataset.categories), image_id)
        return Image.fromarray(rasterize(scene))
    return Image.new("RGB", (im.width, im.height), (235, 235, 235))


def render_overlay(dataset: DetectionDataset, image_id: Any, pls: Sequence[PseudoLabel],
                   root: Path | None = None) -> Image.Image:
    """Ground truth in green, pseudo labels colored by source with their confidence."""
    img = _canvas(dataset, image_id, root)
    draw = ImageDraw.Draw(img)
    names = dict(dataset.categories)
    for a in dataset.annotations:
        if a.image_id == image_id:
            draw.rectangle([a.box.x1, a.box.y1, a.box.x2, a.box.y2], outline=GT_COLOR, width=1)
    for p in pls:
        color = PL_COLORS.get(p.source, (0, 0, 0))
        draw.rectangle([p.box.x1, p.box.y1, p.box.x2, p.box.y2], outline=color, width=2)
        draw.text((p.box.x1 + 2, p.box.y1 + 1), f"{names.get(p.category_id, p.category_id)} {p.confidence:.2f}",
                  fill=color)
    return img


def _svg_curve(values: Sequence[float], width: int = 360, height: int = 120) -> str:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return "<p>(no curve)</p>"
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo if hi > lo else 1.0
    xs = np.linspace(4, width - 4, v.size)
    ys = height - 4 - (v - lo) / span * (height - 8)
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    return (f'<svg width="{width}" height="{height}" xmlns="http://www.w3.org/2000/svg">'
            f'<rect width="100%" height="100%" fill="#fafafa" stroke="#ccc"/>'
            f'<polyline fill="none" stroke="#c22" stroke-width="1.5" points="{pts}"/></svg>'
            f"<p>loss {v[0]:.4f} &rarr; {v[-1]:.4f} over {v.size} steps</p>")


def write_report(out_dir: str | Path, dataset: DetectionDataset, pls: Sequence[PseudoLabel],
                 eval_report: EvalReport | None = None, training: dict | None = None,
                 image_root: str | Path | None = None, max_images: int = 24) -> dict[str, str]:
    """Write ``index.html`` plus overlay PNGs; returns ``{relative path: sha256}``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    root = Path(image_root) if image_root is not None else None
    by: dict[Any, list[PseudoLabel]] = {}
    for p in pls:
        by.setdefault(p.image_id, []).append(p)
    n_images = len(dataset.images)
    parts = ["<!DOCTYPE html>", "<html><head><meta charset='utf-8'><title>Pseudo-label report</title>",
             "<style>body{font-family:sans-serif;margin:2em}td,th{padding:2px 8px}"
             "figure{display:inline-block;margin:6px}</style></head><body>",
             "<h1>Pseudo-label report</h1>",
             f"<p>{len(pls)} pseudo labels over {n_images} images "
             f"({len(pls) / n_images if n_images else 0.0:.2f} per image).</p>"]
    if not pls:
        parts.append("<p><strong>The pseudo-label file contains zero pseudo labels.</strong></p>")
    counts: dict[int, int] = {}
    for p in pls:
        counts[p.category_id] = counts.get(p.category_id, 0) + 1
    if counts:
        names = dict(dataset.categories)
        rows = "".join(f"<tr><td>{html.escape(str(names.get(c, c)))}</td><td>{n}</td></tr>"
                       for c, n in sorted(counts.items()))
        parts.append(f"<h2>Pseudo labels per category</h2><table><tr><th>category</th><th>count</th></tr>"
                     f"{rows}</table>")
    if eval_report is not None:
        parts.append(f"<h2>Evaluation</h2><pre>{html.escape(eval_report.render_table())}</pre>")
    if training:
        parts.append("<h2>Training</h2>")
        for name, run in sorted(training.get("runs", {}).items()):
            metrics = ", ".join(f"{k} {100 * run[k]:.1f}" for k in ("novel_ap50", "ap50", "mAP") if k in run)
            parts.append(f"<h3>{html.escape(name)}</h3><p>{metrics}</p>{_svg_curve(run.get('losses', []))}")
    parts.append("<h2>Overlays</h2><p>green: ground truth; red: VL pseudo labels; blue: teacher</p>")
    for im in dataset.images[:max_images]:
        fname = f"images/{_safe(im.id)}.png"
        render_overlay(dataset, im.id, by.get(im.id, []), root).save(out / fname, format="PNG", optimize=False)
        parts.append(f"<figure><img src='{fname}'><figcaption>{html.escape(str(im.id))}: "
                     f"{len(by.get(im.id, []))} PLs</figcaption></figure>")
    parts.append("</body></html>")
    (out / "index.html").write_text("\n".join(parts) + "\n")
    return report_hashes(out)


def _safe(x) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in str(x))


def report_hashes(out_dir: str | Path) -> dict[str, str]:
    out = Path(out_dir)
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}
