"""Class-agnostic proposals and the iterative RoI refinement loop.

Proposal sources and box refiners are duck-typed backends; the synthetic
ones live in :mod:`plmine.synthetic`, a file-backed source is provided here
for proposals computed elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Protocol, Sequence, runtime_checkable

import numpy as np

from .geometry import BBox, boxes_to_array, iou_matrix, nms_indices

DEFAULT_TOP_K = 1000
DEFAULT_RPN_NMS = 0.3
DEFAULT_ROI_STEPS = 10


class ProposalBackendError(RuntimeError):
    pass


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class Proposal:
    box: BBox
    rpn_score: float

    def __post_init__(self):
        if not 0.0 <= self.rpn_score <= 1.0:
            raise ValueError(f"rpn_score {self.rpn_score} outside [0, 1]")

    def to_record(self, image_id: Any) -> dict:
        return {"image_id": image_id, "bbox": self.box.to_xywh(), "score": self.rpn_score}


@runtime_checkable
class ProposalSource(Protocol):
    """Anything that yields raw class-agnostic proposals for an input.

    ``shareable`` tells the batch driver whether one instance may be used
    from several workers.
    """

    shareable: bool

    def propose(self, item: Any) -> list[Proposal]: ...


@runtime_checkable
class BoxRefiner(Protocol):
    """One RoI-head pass: same length, same order."""

    def refine(self, proposals: Sequence[Proposal], item: Any) -> list[Proposal]: ...


class IdentityRefiner:
    """Refiner used when no RoI head is available."""

    shareable = True

    def refine(self, proposals, item=None):
        return list(proposals)


class ProposalFileSource:
    """Serves proposals loaded from PL-format records (no category field).

    ``records`` is a list of ``{"image_id", "bbox" (xywh), "score"}``; the
    input handed to :meth:`propose` must expose an ``image_id`` attribute or
    be the id itself.
    """

    shareable = True

    def __init__(self, records: Sequence[Mapping]):
        self._by_image: dict[Any, list[Proposal]] = {}
        for rec in records:
            p = Proposal(BBox.from_xywh(rec["bbox"]), float(rec["score"]))
            self._by_image.setdefault(rec["image_id"], []).append(p)

    def propose(self, item):
        image_id = getattr(item, "image_id", item)
        return list(self._by_image.get(image_id, []))


def generate_proposals(source: ProposalSource, item: Any, top_k: int = DEFAULT_TOP_K,
                       rpn_nms_threshold: float = DEFAULT_RPN_NMS) -> list[Proposal]:
    """Score-sorted, NMS'd, at most ``top_k`` proposals from ``source``."""
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if not 0.0 <= rpn_nms_threshold <= 1.0:
        raise ValueError(f"rpn_nms_threshold {rpn_nms_threshold} outside [0, 1]")
    try:
        raw = source.propose(item)
    except Exception as exc:
        raise ProposalBackendError(
            f"proposal source {type(source).__name__} failed on {_describe(item)}: {exc}") from exc
    if not raw:
        return []
    keep = nms_indices(boxes_to_array([p.box for p in raw]),
                       np.array([p.rpn_score for p in raw]), rpn_nms_threshold)
    return [raw[i] for i in keep[:top_k]]


def refine_iteratively(proposals: Sequence[Proposal], refiner: BoxRefiner, n_steps: int = DEFAULT_ROI_STEPS,
                       item: Any = None) -> list[Proposal]:
    """Apply ``refiner`` ``n_steps`` times; zero steps is the identity.

    The RPN score of each proposal is carried through unchanged unless the
    refiner itself rescores.
    """
    if n_steps < 0:
        raise ValueError(f"n_steps must be >= 0, got {n_steps}")
    out = list(proposals)
    for _ in range(n_steps):
        refined = refiner.refine(out, item)
        if len(refined) != len(out):
            raise ProposalBackendError(
                f"refiner {type(refiner).__name__} changed proposal count {len(out)} -> {len(refined)}")
        out = list(refined)
    return out


def best_gt_iou(proposals: Sequence[Proposal], gt_boxes: Sequence[BBox]) -> np.ndarray:
    if not gt_boxes:
        return np.zeros(len(proposals))
    ious = iou_matrix(boxes_to_array([p.box for p in proposals]), boxes_to_array(gt_boxes))
    return ious.max(axis=1)


def rpn_iou_correlation(proposals: Sequence[Proposal], gt_boxes: Sequence[BBox]) -> float:
    """Pearson correlation between RPN score and best ground-truth IoU."""
    if len(proposals) < 2:
        raise UndefinedCorrelationError("need at least two proposals")
    scores = np.array([p.rpn_score for p in proposals], dtype=float)
    ious = best_gt_iou(proposals, gt_boxes)
    if np.ptp(scores) == 0.0:
        raise UndefinedCorrelationError("constant RPN scores")
    if np.ptp(ious) == 0.0:
        raise UndefinedCorrelationError("constant best-GT IoU")
    s = scores - scores.mean()
    t = ious - ious.mean()
    r = float(s @ t / np.sqrt((s @ s) * (t @ t)))
    return max(-1.0, min(1.0, r))


def _describe(item) -> str:
    image_id = getattr(item, "image_id", None)
    return f"image {image_id}" if image_id is not None else type(item).__name__
