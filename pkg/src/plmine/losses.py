"""Detection training objective with analytic gradients, and a toy student detector.

Predictions and targets live in extent-normalized corner coordinates. Class
distributions cover the task categories plus a trailing background entry.
Every loss returns its value together with gradients with respect to the
class logits and the predicted box corners; the matching is an input and
is treated as fixed when differentiating.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .geometry import iou_matrix

log = logging.getLogger(__name__)

NIL = -1


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PredictionSet:
    """Detector outputs for one image: ``(n, K+1)`` class logits and ``(n, 4)`` boxes."""

    logits: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float)
        boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        if logits.ndim != 2:
            raise ValueError(f"logits must be (n, K+1), got shape {logits.shape}")
        if logits.shape[0] != boxes.shape[0]:
            raise ValueError(f"{logits.shape[0]} class rows but {boxes.shape[0]} boxes")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "boxes", boxes)

    def __len__(self):
        return self.logits.shape[0]

    @property
    def n_classes(self) -> int:
        """Entries including background."""
        return self.logits.shape[1]

    @property
    def background(self) -> int:
        return self.n_classes - 1

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits, axis=1)


@dataclass(frozen=True)
class TargetSet:
    """Ground truth or pseudo labels for one image.

    ``labels`` index the task categories (never background). ``confidence``
    is the stored PL confidence; ground truth uses 1.
    """

    labels: np.ndarray
    boxes: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int).reshape(-1)
        boxes = np.asarray(self.boxes, dtype=float).reshape(-1, 4)
        conf = np.ones(labels.size) if self.confidence is None else np.asarray(self.confidence, float).reshape(-1)
        if not labels.size == boxes.shape[0] == conf.size:
            raise ValueError("labels, boxes and confidence must have equal length")
        if labels.size and labels.min() < 0:
            raise ValueError("target labels must be non-negative category indices")
        if boxes.size and not (np.all(boxes[:, 2] > boxes[:, 0]) and np.all(boxes[:, 3] > boxes[:, 1])):
            raise ValueError("target boxes must have positive width and height")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "confidence", conf)

    def __len__(self):
        return self.labels.size

    @classmethod
    def empty(cls) -> "TargetSet":
        return cls(np.zeros(0, int), np.zeros((0, 4)))


class Matching(NamedTuple):
    """``assignment[i]`` is the target index matched to prediction ``i``, or ``NIL``."""

    assignment: np.ndarray

    @property
    def matched(self) -> np.ndarray:
        return self.assignment != NIL


class LossValue(NamedTuple):
    value: float
    grad_logits: np.ndarray
    grad_boxes: np.ndarray
    n_terms: int


def match(predictions: PredictionSet, targets: TargetSet, match_iou: float = 0.5) -> Matching:
    """Greedy one-to-one assignment in descending max-class-probability order."""
    n = len(predictions)
    out = np.full(n, NIL, dtype=int)
    if n == 0 or len(targets) == 0:
        return Matching(out)
    ious = iou_matrix(predictions.boxes, targets.boxes)
    order = np.argsort(-predictions.probs.max(axis=1), kind="stable")
    free = np.ones(len(targets), dtype=bool)
    for i in order:
        cand = np.where(free & (ious[i] >= match_iou), ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= 0:
            out[i] = j
            free[j] = False
    return Matching(out)


def _ce_l1(predictions: PredictionSet, targets: TargetSet, matching: Matching, weight: np.ndarray) -> LossValue:
    """Weighted mean of CE (+ L1 for matched rows); rows with zero weight drop out of the mean."""
    n = len(predictions)
    a = np.asarray(matching.assignment)
    if a.shape != (n,):
        raise ValueError("matching does not cover the predictions")
    g_log = np.zeros_like(predictions.logits)
    g_box = np.zeros_like(predictions.boxes)
    n_terms = int(np.count_nonzero(weight))
    if n_terms == 0:
        return LossValue(0.0, g_log, g_box, 0)
    m = a != NIL
    cls = np.full(n, predictions.background)
    cls[m] = targets.labels[a[m]]
    if np.any(cls[m] >= predictions.background):
        raise ValueError("target label outside the prediction label space")
    rows = np.arange(n)
    logp = log_softmax(predictions.logits, axis=1)
    ce = -logp[rows, cls]
    diff = np.zeros_like(predictions.boxes)
    diff[m] = predictions.boxes[m] - targets.boxes[a[m]]
    l1 = np.abs(diff).sum(axis=1)
    w = weight / n_terms
    value = float(np.sum(w * (ce + l1)))
    onehot = np.zeros_like(g_log)
    onehot[rows, cls] = 1.0
    g_log = w[:, None] * (np.exp(logp) - onehot)
    g_box = w[:, None] * np.sign(diff)
    return LossValue(value, g_log, g_box, n_terms)


def supervised_loss(predictions: PredictionSet, gt: TargetSet, matching: Matching) -> LossValue:
    """Mean over all predictions of CE plus L1 for matched ones; unmatched predictions target background."""
    return _ce_l1(predictions, gt, matching, np.ones(len(predictions)))


def unsupervised_loss(predictions: PredictionSet, pseudo: TargetSet, matching: Matching,
                      tau: float) -> LossValue:
    """Pseudo-label loss gated by stored PL confidence.

    A matched prediction counts only when its PL's confidence reaches
    ``tau``. Unmatched predictions are not gated by any PL and always
    contribute their background CE. The mean runs over counted terms;
    no counted terms gives 0.
    """
    a = np.asarray(matching.assignment)
    gate = np.ones(len(predictions))
    m = a != NIL
    gate[m] = (pseudo.confidence[a[m]] >= tau).astype(float)
    return _ce_l1(predictions, pseudo, matching, gate)


def total_loss(per_image: Sequence[tuple[float, float]], in_labeled: Sequence[bool],
               in_unlabeled: Sequence[bool], alpha: float) -> float:
    """Mean over images of ``[in I_L]*l_s + alpha*[in I_U]*l_u``."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if not len(per_image) == len(in_labeled) == len(in_unlabeled):
        raise ValueError("per-image losses and membership flags differ in length")
    if not per_image:
        return 0.0
    ls = np.array([p[0] for p in per_image], dtype=float)
    lu = np.array([p[1] for p in per_image], dtype=float)
    return float(np.mean(np.asarray(in_labeled, float) * ls + alpha * np.asarray(in_unlabeled, float) * lu))


# ---------------------------------------------------------------------------
# toy student


@dataclass
class TrainImage:
    """One training image: candidate features and anchors plus its targets."""

    image_id: Any
    features: np.ndarray        # (n, F)
    anchors: np.ndarray         # (n, 4) normalized candidate boxes
    gt: TargetSet = field(default_factory=TargetSet.empty)
    pseudo: TargetSet = field(default_factory=TargetSet.empty)
    in_labeled: bool = True
    in_unlabeled: bool = False


@dataclass
class ToyDetector:
    """Linear detection head over per-candidate features.

    Class logits are ``features @ W.T``. Boxes are the candidate anchors
    shifted by ``features[:, -G:] @ A.T``: the box head reads only the
    trailing ``G = A.shape[1]`` (geometric) feature columns.
    """

    W: np.ndarray   # (K+1, F)
    A: np.ndarray   # (4, G)

    @classmethod
    def init(cls, n_categories: int, n_features: int, seed: int = 0, scale: float = 0.01,
             n_box_features: int | None = None) -> "ToyDetector":
        rng = np.random.default_rng(seed)
        g = n_features if n_box_features is None else n_box_features
        return cls(scale * rng.standard_normal((n_categories + 1, n_features)), np.zeros((4, g)))

    @property
    def n_categories(self) -> int:
        return self.W.shape[0] - 1

    def copy(self) -> "ToyDetector":
        return ToyDetector(self.W.copy(), self.A.copy())

    def predict(self, features: np.ndarray, anchors: np.ndarray) -> PredictionSet:
        return PredictionSet(features @ self.W.T, anchors + features[:, -self.A.shape[1]:] @ self.A.T)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    tau: float = 0.8
    match_iou: float = 0.5
    steps: int = 200
    lr: float = 0.05
    seed: int = 0
    box_features: int | None = None     # trailing feature columns read by the box head; None = all

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not (0.0 <= self.tau <= 1.0 and 0.0 <= self.match_iou <= 1.0):
            raise ValueError("tau and match_iou must be in [0, 1]")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    detector: ToyDetector
    losses: list[float]
    config: TrainConfig

    def smoothed(self, window: int = 10) -> np.ndarray:
        x = np.asarray(self.losses)
        if x.size < window:
            return x
        return np.convolve(x, np.ones(window) / window, mode="valid")


def objective(detector: ToyDetector, images: Sequence[TrainImage], config: TrainConfig):
    """Total loss over ``images`` and its gradients with respect to ``W`` and ``A``."""
    gW = np.zeros_like(detector.W)
    gA = np.zeros_like(detector.A)
    total = 0.0
    n = len(images)
    for im in images:
        pred = detector.predict(im.features, im.anchors)
        g_log = np.zeros_like(pred.logits)
        g_box = np.zeros_like(pred.boxes)
        if im.in_labeled:
            s = supervised_loss(pred, im.gt, match(pred, im.gt, config.match_iou))
            total += s.value
            g_log += s.grad_logits
            g_box += s.grad_boxes
        if im.in_unlabeled and config.alpha > 0:
            u = unsupervised_loss(pred, im.pseudo, match(pred, im.pseudo, config.match_iou), config.tau)
            total += config.alpha * u.value
            g_log += config.alpha * u.grad_logits
            g_box += config.alpha * u.grad_boxes
        gW += g_log.T @ im.features
        gA += g_box.T @ im.features[:, -detector.A.shape[1]:]
    return total / n, gW / n, gA / n


def train_toy_student(images: Sequence[TrainImage], n_categories: int,
                      config: TrainConfig = TrainConfig(), init: ToyDetector | None = None) -> TrainResult:
    """Full-batch Adam on the combined objective."""
    if not images:
        raise ValueError("training set is empty")
    n_feat = images[0].features.shape[1]
    det = (ToyDetector.init(n_categories, n_feat, config.seed, n_box_features=config.box_features)
           if init is None else init.copy())
    if config.steps == 0:
        return TrainResult(det, [], config)
    b1, b2, eps = 0.9, 0.999, 1e-8
    params = [det.W, det.A]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    losses: list[float] = []
    for step in range(1, config.steps + 1):
        value, gW, gA = objective(det, images, config)
        if not np.isfinite(value) or not (np.all(np.isfinite(gW)) and np.all(np.isfinite(gA))):
            last = losses[-1] if losses else None
            raise TrainingDivergedError(
                f"loss became {value} at step {step} (last finite {last}); "
                f"|W|={np.linalg.norm(det.W):.3g} |A|={np.linalg.norm(det.A):.3g} lr={config.lr}")
        losses.append(value)
        for p, g, mk, vk in zip(params, (gW, gA), m, v):
            mk *= b1
            mk += (1 - b1) * g
            vk *= b2
            vk += (1 - b2) * g * g
            p -= config.lr * (mk / (1 - b1 ** step)) / (np.sqrt(vk / (1 - b2 ** step)) + eps)
    return TrainResult(det, losses, config)
