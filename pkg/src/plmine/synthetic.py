"""Seeded synthetic scenes and the oracle backends that stand in for trained models.

Everything here is a pure function of its inputs and an integer seed. Noise
draws are keyed on the scene seed plus the exact float bits of the box, so
the same region always receives the same noise no matter how or where it is
evaluated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import softmax

from .geometry import BBox, ImageExtent, boxes_to_array, iou_matrix
from .proposals import Proposal
from .scoring import BACKGROUND_TEXT, LabelSpace, ScoreDistribution

MAX_PLACEMENT_TRIES = 2000
PLACEMENT_MAX_IOU = 0.3
ORACLE_TEMPERATURE = 0.1


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticScene:
    extent: ImageExtent
    objects: tuple[tuple[int, BBox], ...]
    seed: int
    category_names: tuple[tuple[int, str], ...] = ()
    image_id: int | None = None

    @property
    def boxes(self) -> list[BBox]:
        return [b for _, b in self.objects]

    @property
    def box_array(self) -> np.ndarray:
        return boxes_to_array(self.boxes)

    @property
    def category_ids(self) -> np.ndarray:
        return np.array([c for c, _ in self.objects], dtype=int)

    def name_of(self, category_id: int) -> str:
        return dict(self.category_names)[category_id]


@dataclass(frozen=True)
class SyntheticRpnConfig:
    """Class-agnostic proposal simulator settings.

    ``jitter_scale`` is the std of corner noise as a fraction of object size;
    ``score_noise`` the std of the Gaussian added to best-GT IoU to form the
    objectness score; ``background_proposal_rate`` the number of background
    boxes per object proposal.
    """

    jitter_scale: float = 0.2
    score_noise: float = 0.42
    proposals_per_object: int = 20
    background_proposal_rate: float = 0.5
    background_size: tuple[float, float] = (0.04, 0.25)

    def __post_init__(self):
        for name in ("jitter_scale", "score_noise", "background_proposal_rate"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        if self.proposals_per_object < 1:
            raise ValueError("proposals_per_object must be >= 1")
        lo, hi = self.background_size
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"bad background_size {self.background_size}")


@dataclass(frozen=True)
class ContractionRefinerConfig:
    contraction_rate: float = 0.4
    score_sharpening: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.contraction_rate <= 1.0:
            raise ValueError(f"contraction_rate must be in (0, 1], got {self.contraction_rate}")
        if self.score_sharpening < 0:
            raise ValueError("score_sharpening must be >= 0")


def keyed_rng(*parts) -> np.random.Generator:
    """Generator keyed on ints, floats and strings (floats by their exact bits)."""
    words: list[int] = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode())
        elif isinstance(p, (float, np.floating)):
            words.append(int(np.float64(p).view(np.uint64)))
        elif isinstance(p, (np.ndarray, list, tuple)):
            words.extend(int(w) for w in np.asarray(p, dtype=np.float64).view(np.uint64))
        else:
            words.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(words))


def generate_scene(labelspace: LabelSpace, extent: ImageExtent, n_objects: int, seed: int,
                   size_range: tuple[float, float] = (0.12, 0.35), image_id: int | None = None,
                   max_tries: int = MAX_PLACEMENT_TRIES) -> SyntheticScene:
    """Place ``n_objects`` boxes with pairwise IoU <= 0.3, categories drawn from the targets."""
    if n_objects < 0:
        raise ValueError("n_objects must be >= 0")
    rng = np.random.default_rng(seed)
    ids = labelspace.target_ids
    placed: list[tuple[int, BBox]] = []
    arr = np.zeros((0, 4))
    for _ in range(n_objects):
        cat = int(ids[rng.integers(len(ids))])
        for _ in range(max_tries):
            w = rng.uniform(*size_range) * extent.width
            h = rng.uniform(*size_range) * extent.height
            x1 = rng.uniform(0, extent.width - w)
            y1 = rng.uniform(0, extent.height - h)
            cand = np.array([[x1, y1, x1 + w, y1 + h]])
            if arr.shape[0] == 0 or iou_matrix(cand, arr).max() <= PLACEMENT_MAX_IOU:
                break
        else:
            raise SceneGenerationError(
                f"could not place object {len(placed) + 1}/{n_objects} (seed {seed}) in {max_tries} tries")
        placed.append((cat, BBox.from_array(cand[0])))
        arr = np.vstack([arr, cand])
    return SyntheticScene(extent, tuple(placed), int(seed), labelspace.target_categories, image_id)


def _valid_box(arr: np.ndarray, extent: ImageExtent, min_size: float = 1.0) -> np.ndarray:
    x1, x2 = sorted((arr[0], arr[2]))
    y1, y2 = sorted((arr[1], arr[3]))
    x1, x2 = np.clip([x1, x2], 0.0, extent.width)
    y1, y2 = np.clip([y1, y2], 0.0, extent.height)
    if x2 - x1 < min_size:
        x1 = min(x1, extent.width - min_size)
        x2 = x1 + min_size
    if y2 - y1 < min_size:
        y1 = min(y1, extent.height - min_size)
        y2 = y1 + min_size
    return np.array([x1, y1, x2, y2])


def synthetic_rpn(scene: SyntheticScene, config: SyntheticRpnConfig = SyntheticRpnConfig(),
                  top_k: int = 1000) -> list[Proposal]:
    """Jittered copies of every object plus random background boxes.

    Each score is the proposal's best-GT IoU plus Gaussian noise, clamped to
    [0, 1]. At most ``top_k`` proposals are returned, highest score first.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    rng = keyed_rng(scene.seed, "rpn")
    ext = scene.extent
    raw = []
    for _, b in scene.objects:
        w, h = b.width, b.height
        for _ in range(config.proposals_per_object):
            noise = rng.normal(0.0, config.jitter_scale, 4) * np.array([w, h, w, h])
            raw.append(_valid_box(b.as_array() + noise, ext))
    n_bg = int(round(config.background_proposal_rate * config.proposals_per_object * len(scene.objects)))
    lo, hi = config.background_size
    for _ in range(n_bg):
        w = rng.uniform(lo, hi) * ext.width
        h = rng.uniform(lo, hi) * ext.height
        x1 = rng.uniform(0, ext.width - w)
        y1 = rng.uniform(0, ext.height - h)
        raw.append(_valid_box(np.array([x1, y1, x1 + w, y1 + h]), ext))
    if not raw:
        return []
    boxes = np.array(raw)
    best = iou_matrix(boxes, scene.box_array).max(axis=1) if scene.objects else np.zeros(len(boxes))
    scores = np.clip(best + rng.normal(0.0, config.score_noise, len(boxes)) * (config.score_noise > 0), 0, 1)
    order = np.argsort(-scores, kind="stable")[:top_k]
    return [Proposal(BBox.from_array(boxes[i]), float(scores[i])) for i in order]


def _sharpen(score: np.ndarray, strength: float) -> np.ndarray:
    if strength == 0:
        return score
    g = 1.0 + strength
    a, b = score ** g, (1.0 - score) ** g
    return a / (a + b)


def contraction_refiner(proposals: Sequence[Proposal], scene: SyntheticScene,
                        config: ContractionRefinerConfig = ContractionRefinerConfig()) -> list[Proposal]:
    """One refinement pass: move each box a fraction of the way to its best-IoU object.

    Proposals that overlap no object are returned unchanged.
    """
    if not proposals:
        return []
    boxes = boxes_to_array([p.box for p in proposals])
    scores = np.array([p.rpn_score for p in proposals])
    if not scene.objects:
        return list(proposals)
    gt = scene.box_array
    ious = iou_matrix(boxes, gt)
    best = ious.argmax(axis=1)
    moving = ious.max(axis=1) > 0
    new = boxes.copy()
    new[moving] = boxes[moving] + config.contraction_rate * (gt[best[moving]] - boxes[moving])
    new_scores = scores.copy()
    new_scores[moving] = _sharpen(scores[moving], config.score_sharpening)
    out = []
    for p, m, row, s in zip(proposals, moving, new, new_scores):
        out.append(Proposal(BBox.from_array(row), float(s)) if m else p)
    return out


class SyntheticProposalSource:
    """Proposal source backed by :func:`synthetic_rpn`."""

    shareable = True

    def __init__(self, config: SyntheticRpnConfig = SyntheticRpnConfig(), raw_top_k: int = 100000):
        self.config = config
        self.raw_top_k = raw_top_k

    def propose(self, scene):
        return synthetic_rpn(scene, self.config, self.raw_top_k)


class ContractionRefiner:
    shareable = True

    def __init__(self, config: ContractionRefinerConfig = ContractionRefinerConfig()):
        self.config = config

    def refine(self, proposals, scene):
        return contraction_refiner(proposals, scene, self.config)


def _oracle_vector(scene: SyntheticScene, box_arr: np.ndarray, names: Sequence[str]) -> np.ndarray:
    """Per-name overlap features: best IoU with an object of that category, or 1 - best IoU for "background"."""
    ids_by_name: dict[str, list[int]] = {}
    for cid, name in scene.category_names:
        ids_by_name.setdefault(name, []).append(cid)
    if scene.objects:
        ious = iou_matrix(box_arr[None, :], scene.box_array)[0]
        cats = scene.category_ids
    else:
        ious, cats = np.zeros(0), np.zeros(0, dtype=int)
    best_all = float(ious.max()) if ious.size else 0.0
    out = np.zeros(len(names))
    for j, name in enumerate(names):
        if name == BACKGROUND_TEXT:
            out[j] = 1.0 - best_all
            continue
        mask = np.isin(cats, ids_by_name.get(name, []))
        out[j] = float(ious[mask].max()) if mask.any() else 0.0
    return out


def oracle_scorer(scene: SyntheticScene, box: BBox, labelspace: LabelSpace, noise: float = 0.0,
                  temperature: float = ORACLE_TEMPERATURE) -> ScoreDistribution:
    """Direct oracle distribution over the label-space entries.

    Logit for a category entry is its best IoU with an object of that
    category, the "background" entry gets 1 - best IoU over all objects,
    seeded Gaussian noise of std ``noise`` is added, and the result is
    divided by ``temperature`` before the softmax.
    """
    if labelspace.n_targets == 0:
        raise ValueError("label space has no targets")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    names = labelspace.entry_names
    logits = _oracle_vector(scene, box.as_array(), names)
    if noise > 0:
        logits = logits + keyed_rng(scene.seed, "oracle", box.as_array()).normal(0.0, noise, len(names))
    return ScoreDistribution(softmax(logits / temperature))


class NoiseField:
    """Smooth seeded random function from box corners to R^dim.

    Random Fourier features over extent-normalized corners: each output
    coordinate has standard deviation ``scale`` and correlation length
    ``length`` (as a fraction of the image), so nearby boxes receive nearly
    the same noise.
    """

    def __init__(self, seed, dim: int, scale: float, length: float = 0.08, n_features: int = 64):
        rng = keyed_rng(*seed) if isinstance(seed, tuple) else keyed_rng(seed)
        self.weights = rng.normal(0.0, 1.0 / length, (dim, n_features, 4))
        self.phases = rng.uniform(0.0, 2 * np.pi, (dim, n_features))
        self.amp = scale * np.sqrt(2.0 / n_features)

    def __call__(self, box_arr: np.ndarray, extent: ImageExtent) -> np.ndarray:
        c = np.asarray(box_arr, dtype=float).reshape(-1, 4) / np.array(
            [extent.width, extent.height, extent.width, extent.height])
        # (n, dim, features)
        proj = np.einsum("dmk,nk->ndm", self.weights, c) + self.phases[None]
        return self.amp * np.cos(proj).sum(axis=2)


class OracleBackend:
    """Scoring backend with one embedding axis per world category plus one background axis.

    Text embeddings are one-hot on the axis of the prompted name. A region's
    raw embedding holds its overlap features (see :func:`oracle_scorer`),
    with the background axis scaled by ``background_weight``, plus a smooth
    seeded noise field of std ``noise`` (see :class:`NoiseField`). A small
    background weight makes the normalized embedding nearly blind to how
    well the box is localized, which is the weakness RPN fusion corrects.
    """

    shareable = True
    batched_tolerance = 1e-9

    def __init__(self, vocabulary: Sequence[str], noise: float = 0.0,
                 default_temperature: float = ORACLE_TEMPERATURE, noise_key: int = 0,
                 background_weight: float = 1.0, noise_length: float = 0.08):
        self.vocabulary = list(vocabulary) + ([] if BACKGROUND_TEXT in vocabulary else [BACKGROUND_TEXT])
        self.noise = float(noise)
        self.background_weight = float(background_weight)
        self.noise_length = float(noise_length)
        self.default_temperature = float(default_temperature)
        self.noise_key = int(noise_key)
        self.identifier = (f"oracle(noise={self.noise},T={self.default_temperature},"
                           f"bg={self.background_weight},len={self.noise_length},key={self.noise_key})")
        self._fields: dict[tuple, NoiseField] = {}

    @property
    def dimension(self) -> int:
        return len(self.vocabulary)

    def embed_text(self, prompts):
        # longest vocabulary name the prompt ends with
        ranked = sorted(range(len(self.vocabulary)), key=lambda i: -len(self.vocabulary[i]))
        out = np.zeros((len(prompts), self.dimension))
        for r, prompt in enumerate(prompts):
            for i in ranked:
                if prompt.rstrip(" .").endswith(self.vocabulary[i]):
                    out[r, i] = 1.0
                    break
            else:
                raise KeyError(f"prompt {prompt!r} names no oracle vocabulary entry")
        return out

    def _field(self, scene, scale_tag) -> NoiseField:
        key = (scene.seed, self.noise_key, scale_tag)
        if key not in self._fields:
            if len(self._fields) > 256:
                self._fields.clear()
            self._fields[key] = NoiseField((scene.seed, self.noise_key, scale_tag), self.dimension,
                                           self.noise, self.noise_length)
        return self._fields[key]

    def embed_region(self, scene, box, scale_tag="1x"):
        return self.embed_regions(scene, [box], scale_tag)[0]

    def embed_regions(self, scene, boxes, scale_tag="1x"):
        if not boxes:
            return np.zeros((0, self.dimension))
        arr = boxes_to_array(boxes)
        vec = np.stack([_oracle_vector(scene, row, self.vocabulary) for row in arr])
        vec[:, -1] *= self.background_weight
        if self.noise > 0:
            vec = vec + self._field(scene, scale_tag)(arr, scene.extent)
        return vec


def rasterize(scene: SyntheticScene, palette_seed: int = 0) -> np.ndarray:
    """Flat-colored RGB rendering of a scene; used only for report overlays."""
    h, w = scene.extent.height, scene.extent.width
    img = np.full((h, w, 3), 235, dtype=np.uint8)
    rng = np.random.default_rng(palette_seed)
    palette = {cid: rng.integers(40, 200, 3) for cid, _ in sorted(scene.category_names)}
    for cid, b in scene.objects:
        x1, y1 = int(np.floor(b.x1)), int(np.floor(b.y1))
        x2, y2 = int(np.ceil(b.x2)), int(np.ceil(b.y2))
        img[y1:y2, x1:x2] = palette.get(cid, np.array([120, 120, 120]))
    return img
