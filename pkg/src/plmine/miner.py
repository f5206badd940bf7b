"""Pseudo-label mining: proposals -> refinement -> region scoring -> fusion -> threshold -> NMS.

The stage before thresholding produces :class:`Candidate` records; the
threshold-and-NMS stage turns candidates (possibly merged from several
sources) into :class:`PseudoLabel` records.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Any, Iterable, Sequence

import numpy as np

from .geometry import BBox, boxes_to_array, nms_indices
from .proposals import (DEFAULT_ROI_STEPS, DEFAULT_RPN_NMS, DEFAULT_TOP_K, BoxRefiner, IdentityRefiner,
                        ProposalSource, generate_proposals, refine_iteratively)
from .scoring import (LabelSpace, ScoreDistribution, ScoringBackend, build_text_embeddings, classify_regions,
                      strip_non_targets)

log = logging.getLogger(__name__)

SOURCES = ("vl", "teacher")
NMS_MODES = ("classwise", "class_agnostic")
SCORE_SCALE_WARN_GAP = 0.3


class MiningError(RuntimeError):
    pass


class LabelSpaceMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MinerConfig:
    tau: float = 0.8
    roi_steps: int = DEFAULT_ROI_STEPS
    top_k: int = DEFAULT_TOP_K
    rpn_nms: float = DEFAULT_RPN_NMS
    pl_nms: float = 0.5
    fusion_enabled: bool = True
    nms_mode: str = "classwise"
    max_over: str = "full"          # "full" or "targets"; see scoring.strip_non_targets
    gate: str = "fused"             # "fused" (s >= tau) or "class_prob" (max p >= tau)
    temperature: float | None = None
    batched_scoring: bool = True

    def __post_init__(self):
        for name in ("tau", "rpn_nms", "pl_nms"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.roi_steps < 0:
            raise ValueError("roi_steps must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.nms_mode not in NMS_MODES:
            raise ValueError(f"nms_mode must be one of {NMS_MODES}")
        if self.max_over not in ("full", "targets"):
            raise ValueError("max_over must be 'full' or 'targets'")
        if self.gate not in ("fused", "class_prob"):
            raise ValueError("gate must be 'fused' or 'class_prob'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MinerConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown miner config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Candidate:
    """A scored region before thresholding."""

    image_id: Any
    box: BBox
    category_id: int
    score: float            # fused s^u
    class_prob: float = 1.0  # max(p^u)
    rpn_score: float = 1.0
    source: str = "vl"

    def to_record(self) -> dict:
        return {"image_id": self.image_id, "category_id": self.category_id, "bbox": self.box.to_xywh(),
                "score": self.score, "class_prob": self.class_prob, "rpn_score": self.rpn_score,
                "source": self.source}

    @classmethod
    def from_record(cls, rec: dict) -> "Candidate":
        return cls(rec["image_id"], BBox.from_xywh(rec["bbox"]), int(rec["category_id"]), float(rec["score"]),
                   float(rec.get("class_prob", rec["score"])), float(rec.get("rpn_score", 1.0)),
                   rec.get("source", "vl"))


@dataclass(frozen=True)
class PseudoLabel:
    image_id: Any
    box: BBox
    category_id: int
    fused_score: float
    confidence: float
    source: str = "vl"

    def __post_init__(self):
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError(f"pseudo label confidence {self.confidence} outside (0, 1]")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")

    @property
    def score(self) -> float:
        return self.confidence

    def to_record(self) -> dict:
        return {"image_id": self.image_id, "category_id": self.category_id, "bbox": self.box.to_xywh(),
                "score": self.confidence, "source": self.source}

    @classmethod
    def from_record(cls, rec: dict) -> "PseudoLabel":
        return cls(rec["image_id"], BBox.from_xywh(rec["bbox"]), int(rec["category_id"]),
                   float(rec.get("fused_score", rec["score"])), float(rec["score"]), rec.get("source", "vl"))


@dataclass
class MinerBackends:
    source: ProposalSource
    scorer: ScoringBackend
    refiner: BoxRefiner = field(default_factory=IdentityRefiner)

    @property
    def shareable(self) -> bool:
        return all(getattr(b, "shareable", False) for b in (self.source, self.scorer, self.refiner))


def fuse_scores(rpn_score: float, dist: ScoreDistribution | float, fusion_enabled: bool = True) -> float:
    """Mean of objectness and classifier confidence; classifier confidence alone when disabled."""
    p = dist.max_prob if isinstance(dist, ScoreDistribution) else float(dist)
    if not (0.0 <= rpn_score <= 1.0 and 0.0 <= p <= 1.0):
        raise ValueError(f"scores must lie in [0, 1], got rpn={rpn_score}, p={p}")
    return 0.5 * (rpn_score + p) if fusion_enabled else p


def score_candidates(item: Any, labelspace: LabelSpace, backends: MinerBackends,
                     config: MinerConfig = MinerConfig(), text=None) -> list[Candidate]:
    """Everything up to (not including) thresholding, for one input."""
    image_id = getattr(item, "image_id", None)
    proposals = generate_proposals(backends.source, item, config.top_k, config.rpn_nms)
    proposals = refine_iteratively(proposals, backends.refiner, config.roi_steps, item)
    if not proposals:
        return []
    text = build_text_embeddings(labelspace, backends.scorer) if text is None else text
    dists = classify_regions(item, [p.box for p in proposals], labelspace, backends.scorer,
                             config.temperature, text, batched=config.batched_scoring)
    out = []
    ids = labelspace.target_ids
    for prop, dist in zip(proposals, dists):
        ts = strip_non_targets(dist, labelspace, config.max_over)
        if not ts.is_target:
            continue
        s = fuse_scores(prop.rpn_score, ts.max_prob, config.fusion_enabled)
        out.append(Candidate(image_id, prop.box, ids[ts.index], s, ts.max_prob, prop.rpn_score, "vl"))
    return out


def _gate_value(c: Candidate, gate: str) -> float:
    return c.score if gate == "fused" else c.class_prob


def threshold_and_nms(candidates: Sequence[Candidate], config: MinerConfig = MinerConfig()) -> list[PseudoLabel]:
    """Keep candidates passing the gate at ``tau`` and suppress overlaps per image.

    Output is grouped by image (first-appearance order) and sorted by
    confidence within an image; ties keep input order.
    """
    kept = [c for c in candidates if _gate_value(c, config.gate) >= config.tau and c.score > 0]
    by_image: dict[Any, list[Candidate]] = {}
    for c in kept:
        by_image.setdefault(c.image_id, []).append(c)
    out = []
    for image_id, group in by_image.items():
        boxes = boxes_to_array([c.box for c in group])
        scores = np.array([c.score for c in group])
        if config.nms_mode == "class_agnostic":
            keep = nms_indices(boxes, scores, config.pl_nms)
        else:
            cats = np.array([c.category_id for c in group])
            keep = np.concatenate([np.flatnonzero(cats == k)[nms_indices(boxes[cats == k], scores[cats == k],
                                                                         config.pl_nms)]
                                   for k in np.unique(cats)])
            keep = keep[np.lexsort((keep, -scores[keep]))]
        out.extend(PseudoLabel(image_id, group[i].box, group[i].category_id, group[i].score,
                               group[i].score, group[i].source) for i in keep)
    return out


def mine_image(item: Any, labelspace: LabelSpace, backends: MinerBackends,
               config: MinerConfig = MinerConfig(), text=None) -> list[PseudoLabel]:
    """Pseudo labels for one input; an empty list is a valid result."""
    try:
        cands = score_candidates(item, labelspace, backends, config, text)
    except Exception as exc:
        raise MiningError(f"mining failed on image {getattr(item, 'image_id', None)}: {exc}") from exc
    return threshold_and_nms(cands, config)


def merge_teacher_pls(vl_candidates: Sequence[Candidate], teacher_candidates: Sequence[Candidate],
                      config: MinerConfig = MinerConfig(),
                      category_ids: Iterable[int] | None = None) -> list[PseudoLabel]:
    """Union of VL and teacher candidates, thresholded and suppressed once.

    Both inputs must be pre-threshold candidates over the same label space
    (``category_ids``, or the VL categories when omitted).
    """
    vl = [replace(c, source="vl") for c in vl_candidates]
    teacher = [replace(c, source="teacher") for c in teacher_candidates]
    allowed = set(category_ids) if category_ids is not None else {c.category_id for c in vl}
    if category_ids is not None or vl:
        stray = sorted({c.category_id for c in vl + teacher} - allowed)
        if stray:
            raise LabelSpaceMismatchError(f"categories {stray} are outside the shared label space")
    if vl and teacher:
        gap = abs(np.median([c.score for c in vl]) - np.median([c.score for c in teacher]))
        if gap > SCORE_SCALE_WARN_GAP:
            log.warning("VL and teacher score medians differ by %.2f; scores share tau uncalibrated", gap)
    return threshold_and_nms(vl + teacher, config)


@dataclass
class MiningResult:
    pseudo_labels: list[PseudoLabel]
    failures: dict[Any, str]
    n_images: int

    @property
    def failure_rate(self) -> float:
        return len(self.failures) / self.n_images if self.n_images else 0.0


def _mine_one(item, labelspace, backends, config, candidates_only):
    try:
        if candidates_only:
            return score_candidates(item, labelspace, backends, config), None
        return mine_image(item, labelspace, backends, config), None
    except Exception as exc:
        return [], f"{type(exc).__name__}: {exc}"


def mine_dataset(items: Sequence[Any], labelspace: LabelSpace, backends: MinerBackends,
                 config: MinerConfig = MinerConfig(), workers: int = 1,
                 candidates_only: bool = False) -> MiningResult:
    """Mine every input, in parallel when ``workers > 1``.

    Results are concatenated in image-id order regardless of worker count;
    failing images are skipped and recorded. Worker processes each receive
    their own copy of the backends.
    """
    ordered = sorted(items, key=lambda it: getattr(it, "image_id", 0))
    fn = partial(_mine_one, labelspace=labelspace, backends=backends, config=config,
                 candidates_only=candidates_only)
    if workers > 1 and len(ordered) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, ordered, chunksize=max(1, len(ordered) // (4 * workers))))
    else:
        results = [fn(it) for it in ordered]
    pls, failures = [], {}
    for item, (out, err) in zip(ordered, results):
        if err is not None:
            image_id = getattr(item, "image_id", None)
            log.warning("image %s skipped: %s", image_id, err)
            failures[image_id] = err
        pls.extend(out)
    return MiningResult(pls, failures, len(ordered))
