"""Region classification against a task label space.

A region is embedded at its own size and at 1.5x, the two embeddings are
summed and L2-normalized, dotted with one text embedding per label-space
entry, divided by a temperature and softmaxed.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, NamedTuple, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy.special import softmax

from .geometry import BBox, ImageExtent, expand_box

DEFAULT_PROMPT_TEMPLATE = "a photo of a {name}"
BACKGROUND_TEXT = "background"
EXPANSION_FACTOR = 1.5
BACKGROUND_MODES = ("none", "bg_text", "base_as_background", "background_set")
UNIT_NORM_TOL = 1e-6


class DegenerateEmbeddingError(ValueError):
    pass


class ScoringBackendError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabelSpace:
    """Target categories plus optional non-target entries used to absorb background.

    ``background_mode``:

    * ``none`` -- targets only
    * ``bg_text`` -- one extra "background" prompt
    * ``base_as_background`` -- ``background_categories`` holds the annotated
      base categories; regions classified as one of them are discarded
    * ``background_set`` -- ``background_categories`` is an external vocabulary

    ``add_background_text`` appends the "background" prompt to the last two
    modes as well.
    """

    target_categories: tuple[tuple[int, str], ...]
    background_mode: str = "none"
    background_categories: tuple[str, ...] = ()
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    add_background_text: bool = False

    def __post_init__(self):
        object.__setattr__(self, "target_categories",
                           tuple((int(i), str(n)) for i, n in self.target_categories))
        object.__setattr__(self, "background_categories", tuple(self.background_categories))
        if not self.target_categories:
            raise ValueError("label space needs at least one target category")
        if self.background_mode not in BACKGROUND_MODES:
            raise ValueError(f"unknown background_mode {self.background_mode!r}")
        if "{name}" not in self.prompt_template:
            raise ValueError("prompt_template needs a {name} slot")
        ids = [i for i, _ in self.target_categories]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate target category ids")
        names = self.entry_names
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate label-space names: {dupes}")

    @property
    def target_ids(self) -> list[int]:
        return [i for i, _ in self.target_categories]

    @property
    def target_names(self) -> list[str]:
        return [n for _, n in self.target_categories]

    @property
    def background_entries(self) -> list[str]:
        if self.background_mode == "none":
            return []
        if self.background_mode == "bg_text":
            return [BACKGROUND_TEXT]
        extra = [BACKGROUND_TEXT] if self.add_background_text else []
        return list(self.background_categories) + extra

    @property
    def entry_names(self) -> list[str]:
        return self.target_names + self.background_entries

    @property
    def n_targets(self) -> int:
        return len(self.target_categories)

    def __len__(self):
        return self.n_targets + len(self.background_entries)

    def prompts(self) -> list[str]:
        return [self.prompt_template.format(name=n) for n in self.entry_names]

    def to_dict(self) -> dict:
        return {
            "targets": [{"id": i, "name": n} for i, n in self.target_categories],
            "background_mode": self.background_mode,
            "background_categories": list(self.background_categories),
            "prompt_template": self.prompt_template,
            "add_background_text": self.add_background_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSpace":
        return cls(
            target_categories=tuple((t["id"], t["name"]) for t in d["targets"]),
            background_mode=d.get("background_mode", "none"),
            background_categories=tuple(d.get("background_categories", ())),
            prompt_template=d.get("prompt_template", DEFAULT_PROMPT_TEMPLATE),
            add_background_text=d.get("add_background_text", False),
        )


@dataclass(frozen=True)
class TextEmbeddingSet:
    names: tuple[str, ...]
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=float)
        if v.ndim != 2 or v.shape[0] != len(self.names):
            raise ValueError(f"expected {len(self.names)} embeddings, got shape {v.shape}")
        norms = np.linalg.norm(v, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError("text embeddings must be unit norm")
        object.__setattr__(self, "vectors", v)

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ScoreDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size == 0:
            raise ValueError("score distribution must be a non-empty vector")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a probability vector (sum={p.sum()!r})")
        object.__setattr__(self, "probs", p)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def max_prob(self) -> float:
        return float(self.probs.max())

    def __len__(self):
        return self.probs.size


class TargetScore(NamedTuple):
    is_target: bool
    index: int        # into labelspace.target_categories
    max_prob: float


@runtime_checkable
class ScoringBackend(Protocol):
    """Image/text encoder pair.

    ``embed_region`` returns a raw (unnormalized) image embedding for a box;
    ``scale_tag`` is ``"1x"`` or ``"1.5x"`` and lets cached backends key
    their lookups. Backends may also provide ``embed_regions`` for batched
    evaluation; it must agree with the per-box path within
    ``batched_tolerance`` in max probability.
    """

    shareable: bool
    default_temperature: float
    identifier: str

    def embed_text(self, prompts: Sequence[str]) -> np.ndarray: ...

    def embed_region(self, item: Any, box: BBox, scale_tag: str = "1x") -> np.ndarray: ...


def normalize(x: np.ndarray) -> np.ndarray:
    """L2 normalization; raises on a zero vector."""
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise DegenerateEmbeddingError("zero-norm or non-finite embedding")
    return x / n


def build_text_embeddings(labelspace: LabelSpace, backend: ScoringBackend) -> TextEmbeddingSet:
    prompts = labelspace.prompts()
    try:
        raw = np.asarray(backend.embed_text(prompts), dtype=float)
    except Exception as exc:
        raise ScoringBackendError(f"text embedding failed in {backend.identifier}: {exc}") from exc
    return TextEmbeddingSet(tuple(labelspace.entry_names), normalize(raw))


def _extent_of(item) -> ImageExtent:
    extent = getattr(item, "extent", None)
    if extent is None:
        raise TypeError(f"{type(item).__name__} has no image extent")
    return extent


def _distribution(summed: np.ndarray, text: TextEmbeddingSet, temperature: float) -> ScoreDistribution:
    logits = text.vectors @ normalize(summed) / temperature
    return ScoreDistribution(softmax(logits))


def classify_region(item: Any, box: BBox, labelspace: LabelSpace, backend: ScoringBackend,
                    temperature: float | None = None,
                    text: TextEmbeddingSet | None = None) -> ScoreDistribution:
    """Distribution over ``labelspace`` entries for one region.

    ``text`` may be passed to reuse text embeddings across calls.
    """
    temperature = backend.default_temperature if temperature is None else temperature
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    extent = _extent_of(item)
    if not extent.contains(box):
        raise ValueError(f"box {box} outside image extent {extent}")
    text = build_text_embeddings(labelspace, backend) if text is None else text
    big = expand_box(box, EXPANSION_FACTOR, extent)
    summed = (np.asarray(backend.embed_region(item, box, "1x"), dtype=float)
              + np.asarray(backend.embed_region(item, big, "1.5x"), dtype=float))
    return _distribution(summed, text, temperature)


def classify_regions(item: Any, boxes: Sequence[BBox], labelspace: LabelSpace, backend: ScoringBackend,
                     temperature: float | None = None, text: TextEmbeddingSet | None = None,
                     batched: bool = True) -> list[ScoreDistribution]:
    """Classify many regions of one input, using the backend's batched mode when present."""
    if not batched or not hasattr(backend, "embed_regions"):
        text = build_text_embeddings(labelspace, backend) if text is None else text
        return [classify_region(item, b, labelspace, backend, temperature, text) for b in boxes]
    temperature = backend.default_temperature if temperature is None else temperature
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not boxes:
        return []
    extent = _extent_of(item)
    text = build_text_embeddings(labelspace, backend) if text is None else text
    bigs = [expand_box(b, EXPANSION_FACTOR, extent) for b in boxes]
    summed = (np.asarray(backend.embed_regions(item, list(boxes), "1x"), dtype=float)
              + np.asarray(backend.embed_regions(item, bigs, "1.5x"), dtype=float))
    logits = normalize(summed) @ text.vectors.T / temperature
    return [ScoreDistribution(p) for p in softmax(logits, axis=1)]


def check_batched_agreement(item: Any, boxes: Sequence[BBox], labelspace: LabelSpace,
                            backend: ScoringBackend, tolerance: float | None = None,
                            temperature: float | None = None) -> float:
    """Largest per-region max-probability deviation between batched and per-box scoring.

    Raises :class:`ScoringBackendError` when it exceeds the backend's declared
    tolerance (default 0.02).
    """
    tolerance = getattr(backend, "batched_tolerance", 0.02) if tolerance is None else tolerance
    single = classify_regions(item, boxes, labelspace, backend, temperature, batched=False)
    batch = classify_regions(item, boxes, labelspace, backend, temperature, batched=True)
    dev = max((abs(a.max_prob - b.max_prob) for a, b in zip(single, batch)), default=0.0)
    if dev > tolerance:
        raise ScoringBackendError(f"batched scoring deviates by {dev:.4f} > {tolerance}")
    return dev


def strip_non_targets(dist: ScoreDistribution, labelspace: LabelSpace, max_over: str = "full") -> TargetScore:
    """Decide whether a region belongs to a target category.

    With ``max_over="full"`` a region whose argmax is a background entry is
    flagged non-target; otherwise the returned score is the unrenormalized
    maximum over the whole label space. ``max_over="targets"`` ignores the
    background entries entirely and never flags.
    """
    if len(dist) != len(labelspace):
        raise ValueError(f"distribution has {len(dist)} entries, label space {len(labelspace)}")
    k = labelspace.n_targets
    if max_over == "targets":
        idx = int(np.argmax(dist.probs[:k]))
        return TargetScore(True, idx, float(dist.probs[idx]))
    if max_over != "full":
        raise ValueError(f"max_over must be 'full' or 'targets', got {max_over!r}")
    top = dist.argmax
    if top >= k:
        return TargetScore(False, -1, dist.max_prob)
    return TargetScore(True, top, dist.max_prob)


def _box_key(image_id, box: BBox | Sequence[float], scale_tag: str) -> tuple:
    coords = box.as_array() if isinstance(box, BBox) else np.asarray(box, dtype=float)
    return (str(image_id), tuple(round(float(c), 3) for c in coords), scale_tag)


class PrecomputedBackend:
    """Serves embeddings from a JSON container written by :func:`save_precomputed`.

    Layout::

        {"manifest": {"dimension": D, "normalized": false, "source": "...",
                      "default_temperature": 0.01},
         "text": {"<prompt>": [...], ...},
         "regions": [{"image_id": ..., "box": [x1, y1, x2, y2],
                      "scale": "1x" | "1.5x", "embedding": [...]}, ...]}
    """

    shareable = True
    batched_tolerance = 0.0

    def __init__(self, payload: dict):
        manifest = payload["manifest"]
        self.dimension = int(manifest["dimension"])
        self.normalized = bool(manifest.get("normalized", False))
        self.default_temperature = float(manifest.get("default_temperature", 0.01))
        self.identifier = f"precomputed:{manifest.get('source', 'unknown')}"
        self._text = {k: np.asarray(v, dtype=float) for k, v in payload["text"].items()}
        self._regions = {}
        for rec in payload["regions"]:
            vec = np.asarray(rec["embedding"], dtype=float)
            if vec.shape != (self.dimension,):
                raise ValueError(f"embedding for image {rec['image_id']} has shape {vec.shape}")
            self._regions[_box_key(rec["image_id"], rec["box"], rec["scale"])] = vec

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PrecomputedBackend":
        with open(path) as fh:
            return cls(json.load(fh))

    def embed_text(self, prompts):
        missing = [p for p in prompts if p not in self._text]
        if missing:
            raise KeyError(f"no precomputed text embedding for {missing}")
        return np.stack([self._text[p] for p in prompts])

    def embed_region(self, item, box, scale_tag="1x"):
        key = _box_key(getattr(item, "image_id", item), box, scale_tag)
        try:
            return self._regions[key]
        except KeyError:
            raise KeyError(f"no precomputed embedding for {key}") from None

    def embed_regions(self, item, boxes, scale_tag="1x"):
        return np.stack([self.embed_region(item, b, scale_tag) for b in boxes])


def save_precomputed(path: str | os.PathLike, backend: ScoringBackend, labelspace: LabelSpace,
                     regions: Sequence[tuple[Any, BBox]]) -> None:
    """Cache ``backend`` embeddings for ``(item, box)`` pairs, at both scales, to JSON."""
    prompts = labelspace.prompts()
    text = np.asarray(backend.embed_text(prompts), dtype=float)
    records = []
    for item, box in regions:
        extent = _extent_of(item)
        image_id = getattr(item, "image_id", None)
        for tag, b in (("1x", box), ("1.5x", expand_box(box, EXPANSION_FACTOR, extent))):
            records.append({"image_id": image_id, "box": b.as_array().tolist(), "scale": tag,
                            "embedding": np.asarray(backend.embed_region(item, b, tag)).tolist()})
    payload = {
        "manifest": {"dimension": int(text.shape[1]), "normalized": False,
                     "source": backend.identifier,
                     "default_temperature": backend.default_temperature},
        "text": {p: v.tolist() for p, v in zip(prompts, text)},
        "regions": records,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
