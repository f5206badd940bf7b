"""Detection metrics: COCO-style interpolated AP, mAP, AR@N and pseudo-label quality.

Detections and ground truth are plain records carrying ``image_id``,
``category_id``, ``box`` (and ``score`` for detections); any object with
those attributes works, including :class:`plmine.miner.PseudoLabel`.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, NamedTuple, Sequence

import numpy as np

from .geometry import BBox, boxes_to_array, iou_matrix

log = logging.getLogger(__name__)

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
COCO_IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
AR_NS = (100, 300, 500, 1000)


class Detection(NamedTuple):
    image_id: Any
    category_id: int
    box: BBox
    score: float


class GroundTruth(NamedTuple):
    image_id: Any
    category_id: int
    box: BBox


def _score(d) -> float:
    return float(getattr(d, "score"))


def _match_category(dets: Sequence, gts: Sequence, iou_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy score-ordered matching; returns (scores, is_tp) in ranked order."""
    scores = np.array([_score(d) for d in dets], dtype=float)
    order = np.argsort(-scores, kind="stable")
    gt_by_image: dict[Any, list] = {}
    for g in gts:
        gt_by_image.setdefault(g.image_id, []).append(g.box)
    gt_arrays = {k: boxes_to_array(v) for k, v in gt_by_image.items()}
    claimed = {k: np.zeros(len(v), dtype=bool) for k, v in gt_by_image.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for rank, i in enumerate(order):
        d = dets[i]
        arr = gt_arrays.get(d.image_id)
        if arr is None:
            continue
        ious = iou_matrix(d.box.as_array()[None, :], arr)[0]
        ious[claimed[d.image_id]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            claimed[d.image_id][j] = True
            tp[rank] = True
    return scores[order], tp


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from a ranked TP flag vector."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: max over all points at or beyond each rank
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < tp.size, envelope[np.minimum(idx, tp.size - 1)], 0.0)
    return float(sampled.mean())


def average_precision(detections: Sequence, gt: Sequence, iou_threshold: float = 0.5,
                      category: int | None = None) -> float:
    """AP at one IoU threshold for one category (or all records if ``category`` is None)."""
    if category is not None:
        detections = [d for d in detections if d.category_id == category]
        gt = [g for g in gt if g.category_id == category]
    if not gt:
        raise ValueError(f"no ground truth for category {category}")
    _, tp = _match_category(list(detections), list(gt), iou_threshold)
    return interpolated_ap(tp, len(gt))


def per_category_ap(detections: Sequence, gt: Sequence, iou_threshold: float = 0.5,
                    categories: Iterable[int] | None = None) -> dict[int, float | None]:
    """AP per category; ``None`` marks categories without ground truth (skipped when averaging)."""
    cats = sorted(set(categories) if categories is not None else {g.category_id for g in gt})
    det_by = _group(detections)
    gt_by = _group(gt)
    out = {}
    for c in cats:
        if not gt_by.get(c):
            out[c] = None
            continue
        _, tp = _match_category(det_by.get(c, []), gt_by[c], iou_threshold)
        out[c] = interpolated_ap(tp, len(gt_by[c]))
    return out


def _group(records) -> dict[int, list]:
    out: dict[int, list] = {}
    for r in records:
        out.setdefault(r.category_id, []).append(r)
    return out


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def ap50(detections, gt, categories=None) -> float:
    """Mean AP at IoU 0.5 over categories with ground truth; 0 with a warning when none have any."""
    m = _mean_defined(per_category_ap(detections, gt, 0.5, categories).values())
    if m is None:
        warnings.warn("AP50 undefined: no ground truth in the selected categories")
        return 0.0
    return m


def coco_map(detections: Sequence, gt: Sequence, categories: Iterable[int] | None = None) -> float:
    """Mean AP over IoU thresholds 0.50:0.05:0.95 and categories with ground truth."""
    cats = list(categories) if categories is not None else None
    per_t = [_mean_defined(per_category_ap(detections, gt, t, cats).values()) for t in COCO_IOU_THRESHOLDS]
    if per_t[0] is None:
        warnings.warn("mAP undefined: no ground truth in the selected categories")
        return 0.0
    return float(np.mean(per_t))


def cap_per_image(detections: Sequence, max_dets: int = 100) -> list:
    """Keep the ``max_dets`` highest-scored detections of each image (strict COCO comparisons)."""
    by_image: dict[Any, list] = {}
    for d in detections:
        by_image.setdefault(d.image_id, []).append(d)
    out = []
    for group in by_image.values():
        order = np.argsort(-np.array([_score(d) for d in group]), kind="stable")[:max_dets]
        out.extend(group[i] for i in sorted(order))
    return out


def pl_quality(pls: Sequence, gt: Sequence, novel_categories: Iterable[int],
               image_ids: Iterable[Any] | None = None) -> tuple[float, float]:
    """(AP@PL, #@PL): AP50 of novel-category PLs against novel GT, and mean PL count per image.

    ``image_ids`` is the full image set (including images with no PLs);
    defaults to every image that has ground truth or a PL.
    """
    novel = set(novel_categories)
    pls = [p for p in pls if p.category_id in novel]
    gt_n = [g for g in gt if g.category_id in novel]
    ids = set(image_ids) if image_ids is not None else {g.image_id for g in gt} | {p.image_id for p in pls}
    count = len(pls) / len(ids) if ids else 0.0
    if not gt_n:
        warnings.warn("AP@PL undefined: no novel ground truth")
        return 0.0, count
    return ap50(pls, gt_n, sorted(novel)), count


def average_recall_at_n(proposals: Sequence, gt: Sequence, n_values: Sequence[int] = AR_NS,
                        coco_averaged: bool = False) -> dict[int, float]:
    """Top-N recall of proposals, averaged over images with ground truth.

    ``proposals`` need ``image_id``, ``box`` and a score (``score`` or
    ``rpn_score``); ordering within an image is by score. ``gt`` records
    need ``image_id`` and ``box``. By default a GT box is recalled at IoU
    0.5; ``coco_averaged`` averages recall over IoU 0.50:0.05:0.95.
    """
    thresholds = COCO_IOU_THRESHOLDS if coco_averaged else np.array([0.5])
    gt_by: dict[Any, list] = {}
    for g in gt:
        gt_by.setdefault(g.image_id, []).append(g.box)
    prop_by: dict[Any, list] = {}
    for p in proposals:
        prop_by.setdefault(p.image_id, []).append(p)
    out = {}
    for n in n_values:
        recalls = []
        for image_id, boxes in gt_by.items():
            props = prop_by.get(image_id, [])
            sc = np.array([getattr(p, "score", getattr(p, "rpn_score", 0.0)) for p in props])
            top = [props[i] for i in np.argsort(-sc, kind="stable")[:n]]
            if not top:
                recalls.append(0.0)
                continue
            best = iou_matrix(boxes_to_array(boxes), boxes_to_array([p.box for p in top])).max(axis=1)
            recalls.append(float(np.mean([(best >= t).mean() for t in thresholds])))
        out[int(n)] = float(np.mean(recalls)) if recalls else 0.0
    return out


@dataclass
class EvalReport:
    ap_by_threshold: dict[float, dict[int, float | None]]
    aggregate_ap: dict[float, float]
    ap_at_pl: float
    pl_per_image: float
    ar_at_n: dict[int, float] = field(default_factory=dict)
    n_images: int = 0
    n_gt: int = 0
    n_detections: int = 0
    undefined_categories: list[int] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def mAP(self) -> float:
        return float(np.mean(list(self.aggregate_ap.values()))) if self.aggregate_ap else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ap_by_threshold"] = {f"{t:.2f}": {str(c): v for c, v in per.items()}
                                for t, per in self.ap_by_threshold.items()}
        d["aggregate_ap"] = {f"{t:.2f}": v for t, v in self.aggregate_ap.items()}
        d["ar_at_n"] = {str(k): v for k, v in self.ar_at_n.items()}
        d["mAP"] = self.mAP
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            ap_by_threshold={float(t): {int(c): v for c, v in per.items()}
                             for t, per in d["ap_by_threshold"].items()},
            aggregate_ap={float(t): v for t, v in d["aggregate_ap"].items()},
            ap_at_pl=d["ap_at_pl"], pl_per_image=d["pl_per_image"],
            ar_at_n={int(k): v for k, v in d.get("ar_at_n", {}).items()},
            n_images=d["n_images"], n_gt=d["n_gt"], n_detections=d["n_detections"],
            undefined_categories=list(d.get("undefined_categories", [])), notes=list(d.get("notes", [])),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render_table(self, label: str = "PLs") -> str:
        """Text table laid out like the PL-quality ablation tables (values x100)."""
        head = f"{'':<16}| {'AP@PL':>7} | {'#@PL':>7} | {'AP50':>7} | {'mAP':>7}"
        row = (f"{label:<16}| {100 * self.ap_at_pl:7.1f} | {self.pl_per_image:7.2f} | "
               f"{100 * self.aggregate_ap.get(0.5, 0.0):7.1f} | {100 * self.mAP:7.1f}")
        lines = [head, "-" * len(head), row]
        if self.ar_at_n:
            lines.append("AR@N: " + "  ".join(f"@{n}={100 * v:.1f}" for n, v in sorted(self.ar_at_n.items())))
        lines.extend(f"note: {n}" for n in self.notes)
        return "\n".join(lines)


def evaluate(detections: Sequence, gt: Sequence, novel_categories: Iterable[int] | None = None,
             image_ids: Iterable[Any] | None = None, thresholds: Sequence[float] = COCO_IOU_THRESHOLDS,
             proposals: Sequence | None = None, max_dets: int | None = None) -> EvalReport:
    """Full report. ``novel_categories`` defaults to every GT category."""
    if max_dets is not None:
        detections = cap_per_image(detections, max_dets)
    cats = sorted({g.category_id for g in gt} | {d.category_id for d in detections})
    per = {float(t): per_category_ap(detections, gt, t, cats) for t in thresholds}
    undefined = sorted(c for c, v in per[float(thresholds[0])].items() if v is None)
    notes = []
    if undefined:
        notes.append(f"categories without ground truth skipped: {undefined}")
    agg = {}
    for t, values in per.items():
        m = _mean_defined(values.values())
        agg[t] = 0.0 if m is None else m
    if not gt:
        notes.append("no ground truth: AP undefined, reported as 0")
    novel = set(novel_categories) if novel_categories is not None else {g.category_id for g in gt}
    ids = list(image_ids) if image_ids is not None else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ap_pl, n_pl = pl_quality(detections, gt, novel, ids)
    ar = average_recall_at_n(proposals, gt) if proposals is not None else {}
    n_images = len(ids) if ids is not None else len({g.image_id for g in gt} | {d.image_id for d in detections})
    return EvalReport(per, agg, ap_pl, n_pl, ar, n_images, len(gt), len(detections), undefined, notes)
