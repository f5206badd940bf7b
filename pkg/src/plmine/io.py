"""Datasets, split manifests, pseudo-label files and run manifests (all JSON).

Datasets use the COCO annotation layout with bbox in ``[x, y, w, h]``.
Two optional per-image extension fields are understood:
``plmine_split`` (``{"labeled": bool, "unlabeled": bool}``) and
``plmine_seed`` (the generating seed of a synthetic scene).
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .evaluation import GroundTruth
from .geometry import BBox, ImageExtent
from .miner import Candidate, PseudoLabel
from .synthetic import SyntheticScene

PathLike = str | os.PathLike
BUNDLED_CORPUS = Path(__file__).with_name("data") / "synthetic_corpus.json"
BUNDLED_LABELSPACE = Path(__file__).with_name("data") / "novel_labelspace.json"
SCALING_RATIOS = (0, 1, 5, 10, 20)
SSOD_FRACTIONS = (0.01, 0.02, 0.05, 0.10)

# COCO zero-shot split: 48 base and 17 novel categories (COCO category ids)
COCO_ZS_BASE = (
    (1, "person"), (2, "bicycle"), (3, "car"), (4, "motorcycle"), (7, "train"), (8, "truck"), (9, "boat"),
    (15, "bench"), (16, "bird"), (19, "horse"), (20, "sheep"), (23, "bear"), (24, "zebra"), (25, "giraffe"),
    (27, "backpack"), (31, "handbag"), (33, "suitcase"), (34, "frisbee"), (35, "skis"), (38, "kite"),
    (42, "surfboard"), (44, "bottle"), (48, "fork"), (50, "spoon"), (51, "bowl"), (52, "banana"),
    (53, "apple"), (54, "sandwich"), (55, "orange"), (56, "broccoli"), (57, "carrot"), (59, "pizza"),
    (60, "donut"), (62, "chair"), (65, "bed"), (70, "toilet"), (72, "tv"), (73, "laptop"), (74, "mouse"),
    (75, "remote"), (78, "microwave"), (79, "oven"), (80, "toaster"), (82, "refrigerator"), (84, "book"),
    (85, "clock"), (86, "vase"), (90, "toothbrush"),
)
COCO_ZS_NOVEL = (
    (5, "airplane"), (6, "bus"), (17, "cat"), (18, "dog"), (21, "cow"), (22, "elephant"), (28, "umbrella"),
    (32, "tie"), (36, "snowboard"), (41, "skateboard"), (47, "cup"), (49, "knife"), (61, "cake"),
    (63, "couch"), (76, "keyboard"), (81, "sink"), (87, "scissors"),
)


class DatasetError(ValueError):
    """Schema or integrity violation; the message starts with a JSON path."""


@dataclass(frozen=True)
class ImageRecord:
    id: Any
    width: int
    height: int
    file_name: str | None = None
    labeled: bool = True
    unlabeled: bool = False
    seed: int | None = None

    @property
    def extent(self) -> ImageExtent:
        return ImageExtent(self.width, self.height)


@dataclass(frozen=True)
class Annotation:
    image_id: Any
    category_id: int
    box: BBox
    id: int | None = None


@dataclass
class DetectionDataset:
    images: list[ImageRecord]
    annotations: list[Annotation]
    categories: list[tuple[int, str]]
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        ids = [im.id for im in self.images]
        if len(set(ids)) != len(ids):
            raise DatasetError("$.images: duplicate image ids")
        cat_ids = [c for c, _ in self.categories]
        if len(set(cat_ids)) != len(cat_ids):
            raise DatasetError("$.categories: duplicate category ids")
        by_id = {im.id: im for im in self.images}
        cats = set(cat_ids)
        for k, a in enumerate(self.annotations):
            if a.image_id not in by_id:
                raise DatasetError(f"$.annotations[{k}].image_id: unknown image id {a.image_id!r}")
            if a.category_id not in cats:
                raise DatasetError(f"$.annotations[{k}].category_id: unknown category id {a.category_id!r}")
            if not by_id[a.image_id].extent.contains(a.box):
                raise DatasetError(f"$.annotations[{k}].bbox: box {a.box.to_xywh()} outside image {a.image_id!r}")

    @property
    def image_ids(self) -> list:
        return [im.id for im in self.images]

    def image(self, image_id) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def ground_truth(self, categories: Iterable[int] | None = None) -> list[GroundTruth]:
        keep = None if categories is None else set(categories)
        return [GroundTruth(a.image_id, a.category_id, a.box) for a in self.annotations
                if keep is None or a.category_id in keep]

    def with_split(self, manifest: "SplitManifest") -> "DetectionDataset":
        lab, unl = set(manifest.labeled_ids), set(manifest.unlabeled_ids)
        images = [replace(im, labeled=im.id in lab, unlabeled=im.id in unl) for im in self.images]
        return DetectionDataset(images, list(self.annotations), list(self.categories), dict(self.info))

    # -- COCO layout

    def to_coco(self) -> dict:
        images = []
        for im in self.images:
            rec = {"id": im.id, "width": im.width, "height": im.height,
                   "plmine_split": {"labeled": im.labeled, "unlabeled": im.unlabeled}}
            if im.file_name is not None:
                rec["file_name"] = im.file_name
            if im.seed is not None:
                rec["plmine_seed"] = im.seed
            images.append(rec)
        anns = []
        for k, a in enumerate(self.annotations):
            x, y, w, h = a.box.to_xywh()
            anns.append({"id": a.id if a.id is not None else k + 1, "image_id": a.image_id,
                         "category_id": a.category_id, "bbox": [x, y, w, h], "area": w * h, "iscrowd": 0})
        cats = [{"id": c, "name": n} for c, n in self.categories]
        return {"info": self.info, "images": images, "annotations": anns, "categories": cats}

    @classmethod
    def from_coco(cls, d: Any) -> "DetectionDataset":
        if not isinstance(d, Mapping):
            raise DatasetError("$: expected an object")
        for key in ("images", "annotations", "categories"):
            if not isinstance(d.get(key), list):
                raise DatasetError(f"$.{key}: expected an array")
        images = []
        for k, rec in enumerate(d["images"]):
            path = f"$.images[{k}]"
            _require(rec, ("id", "width", "height"), path)
            split = rec.get("plmine_split", {})
            try:
                images.append(ImageRecord(rec["id"], int(rec["width"]), int(rec["height"]), rec.get("file_name"),
                                          bool(split.get("labeled", True)), bool(split.get("unlabeled", False)),
                                          rec.get("plmine_seed")))
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}: {exc}") from None
        cats = []
        for k, rec in enumerate(d["categories"]):
            _require(rec, ("id", "name"), f"$.categories[{k}]")
            cats.append((int(rec["id"]), str(rec["name"])))
        anns = []
        for k, rec in enumerate(d["annotations"]):
            path = f"$.annotations[{k}]"
            _require(rec, ("image_id", "category_id", "bbox"), path)
            bbox = rec["bbox"]
            if not (isinstance(bbox, list) and len(bbox) == 4):
                raise DatasetError(f"{path}.bbox: expected [x, y, w, h]")
            try:
                anns.append(Annotation(rec["image_id"], int(rec["category_id"]), BBox.from_xywh(bbox), rec.get("id")))
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{path}.bbox: {exc}") from None
        return cls(images, anns, cats, dict(d.get("info", {})))

    # -- synthetic scenes

    @classmethod
    def from_scenes(cls, scenes: Sequence[SyntheticScene], categories: Sequence[tuple[int, str]],
                    info: dict | None = None) -> "DetectionDataset":
        images = [ImageRecord(s.image_id, s.extent.width, s.extent.height, seed=s.seed) for s in scenes]
        anns = [Annotation(s.image_id, c, b) for s in scenes for c, b in s.objects]
        return cls(images, anns, list(categories), dict(info or {}))

    def to_scenes(self) -> list[SyntheticScene]:
        """Synthetic scenes for the oracle backends; images need a ``plmine_seed``."""
        by: dict[Any, list] = {im.id: [] for im in self.images}
        for a in self.annotations:
            by[a.image_id].append((a.category_id, a.box))
        out = []
        for k, im in enumerate(self.images):
            if im.seed is None:
                raise DatasetError(f"$.images[{k}].plmine_seed: oracle backends need the scene seed")
            out.append(SyntheticScene(im.extent, tuple(by[im.id]), int(im.seed), tuple(self.categories), im.id))
        return out


def _require(rec, keys, path):
    if not isinstance(rec, Mapping):
        raise DatasetError(f"{path}: expected an object")
    for key in keys:
        if key not in rec:
            raise DatasetError(f"{path}.{key}: missing field")


def load_coco_json(path: PathLike) -> DetectionDataset:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"$: not valid JSON ({exc})") from None
    return DetectionDataset.from_coco(d)


def save_coco_json(dataset: DetectionDataset, path: PathLike) -> None:
    write_json(path, dataset.to_coco())


def load_bundled_corpus() -> DetectionDataset:
    return load_coco_json(BUNDLED_CORPUS)


def build_bundled_corpus(n_scenes: int = 24, seed: int = 7) -> tuple[DetectionDataset, dict]:
    """Regenerate the bundled synthetic corpus and its novel-category label space."""
    from .benchmark import default_world, make_scenes
    world = default_world()
    scenes = make_scenes(world, n_scenes, seed)
    info = {"description": "synthetic desk scenes", "n_scenes": n_scenes, "seed": seed,
            "base": world.base_ids, "novel": world.novel_ids}
    return DetectionDataset.from_scenes(scenes, world.categories, info), world.novel_labelspace().to_dict()


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitManifest:
    """Base/novel category partition (OVD) or labeled/unlabeled image partition (SSOD)."""

    kind: str
    base: tuple = ()
    novel: tuple = ()
    labeled_ids: tuple = ()
    unlabeled_ids: tuple = ()
    seed: int | None = None
    labeled_fraction: float | None = None

    def __post_init__(self):
        if self.kind not in ("ovd", "ssod"):
            raise ValueError(f"unknown split kind {self.kind!r}")
        if set(self.base) & set(self.novel):
            raise ValueError("base and novel categories overlap")
        if set(self.labeled_ids) & set(self.unlabeled_ids):
            raise ValueError("labeled and unlabeled images overlap")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "base": [list(c) for c in self.base], "novel": [list(c) for c in self.novel],
                "labeled_ids": list(self.labeled_ids), "unlabeled_ids": list(self.unlabeled_ids),
                "seed": self.seed, "labeled_fraction": self.labeled_fraction}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(d["kind"], tuple(tuple(c) for c in d.get("base", ())),
                   tuple(tuple(c) for c in d.get("novel", ())), tuple(d.get("labeled_ids", ())),
                   tuple(d.get("unlabeled_ids", ())), d.get("seed"), d.get("labeled_fraction"))


def coco_zs_manifest() -> SplitManifest:
    return SplitManifest("ovd", COCO_ZS_BASE, COCO_ZS_NOVEL)


def apply_ovd_manifest(dataset: DetectionDataset, manifest: SplitManifest) -> tuple[list[int], list[int]]:
    """Dataset category ids of the manifest's base and novel partitions (matched by name)."""
    by_name = {n: c for c, n in dataset.categories}
    missing = [n for _, n in manifest.base + manifest.novel if n not in by_name]
    if missing:
        raise DatasetError(f"$.categories: manifest categories missing from dataset: {missing}")
    covered = {n for _, n in manifest.base + manifest.novel}
    extra = sorted(n for n in by_name if n not in covered)
    if extra:
        raise DatasetError(f"$.categories: categories not covered by the manifest: {extra}")
    return [by_name[n] for _, n in manifest.base], [by_name[n] for _, n in manifest.novel]


def make_ssod_split(dataset: DetectionDataset, labeled_fraction: float, seed: int) -> SplitManifest:
    """Seeded labeled/unlabeled image partition with ``floor(fraction * N)`` labeled images."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError("labeled_fraction must be in (0, 1]")
    ids = dataset.image_ids
    n_lab = int(np.floor(labeled_fraction * len(ids) + 1e-9))
    if n_lab == 0:
        raise ValueError(f"fraction {labeled_fraction} of {len(ids)} images labels no image")
    order = np.random.default_rng(seed).permutation(len(ids))
    lab = sorted((ids[i] for i in order[:n_lab]), key=_sort_key)
    unl = sorted((ids[i] for i in order[n_lab:]), key=_sort_key)
    return SplitManifest("ssod", labeled_ids=tuple(lab), unlabeled_ids=tuple(unl), seed=seed,
                         labeled_fraction=labeled_fraction)


def scaling_splits(dataset: DetectionDataset, n_labeled: int, ratios: Sequence[int] = SCALING_RATIOS,
                   seed: int = 0) -> dict[int, SplitManifest]:
    """Fixed labeled set with ``ratio * n_labeled`` unlabeled images per ratio.

    Unlabeled sets are nested prefixes of one seeded permutation.
    """
    ids = dataset.image_ids
    need = n_labeled * (1 + max(ratios))
    if n_labeled < 1 or need > len(ids):
        raise ValueError(f"ratios up to 1:{max(ratios)} need {need} images, dataset has {len(ids)}")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    lab = tuple(sorted(order[:n_labeled], key=_sort_key))
    rest = order[n_labeled:]
    return {int(r): SplitManifest("ssod", labeled_ids=lab,
                                  unlabeled_ids=tuple(sorted(rest[:r * n_labeled], key=_sort_key)), seed=seed)
            for r in ratios}


def _sort_key(x):
    return (0, x, "") if isinstance(x, (int, np.integer)) else (1, 0, str(x))


# ---------------------------------------------------------------------------
# pseudo-label, candidate and manifest files


def write_json(path: PathLike, payload: Any) -> None:
    """Deterministic JSON: sorted keys, fixed separators, trailing newline."""
    text = json.dumps(payload, sort_keys=True, indent=1, separators=(",", ": "))
    Path(path).write_text(text + "\n")


def read_json(path: PathLike) -> Any:
    with open(path) as fh:
        return json.load(fh)


def save_pseudo_labels(path: PathLike, pls: Sequence[PseudoLabel]) -> None:
    write_json(path, [p.to_record() for p in pls])


def load_pseudo_labels(path: PathLike) -> list[PseudoLabel]:
    recs = read_json(path)
    if not isinstance(recs, list):
        raise DatasetError("$: expected an array of pseudo-label records")
    out = []
    for k, r in enumerate(recs):
        _require(r, ("image_id", "category_id", "bbox", "score"), f"$[{k}]")
        out.append(PseudoLabel.from_record(r))
    return out


def save_candidates(path: PathLike, cands: Sequence[Candidate]) -> None:
    write_json(path, [c.to_record() for c in cands])


def load_candidates(path: PathLike) -> list[Candidate]:
    recs = read_json(path)
    if not isinstance(recs, list):
        raise DatasetError("$: expected an array of candidate records")
    out = []
    for k, r in enumerate(recs):
        _require(r, ("image_id", "category_id", "bbox", "score"), f"$[{k}]")
        out.append(Candidate.from_record(r))
    return out


def file_sha256(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    labelspace: dict | None
    backends: dict
    inputs: dict[str, str]          # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "seed": self.seed, "labelspace": self.labelspace,
                "backends": self.backends, "inputs": self.inputs, "outputs": self.outputs, "stats": self.stats}

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(d["command"], d["config"], d.get("seed"), d.get("labelspace"), d.get("backends", {}),
                   d.get("inputs", {}), d.get("outputs", {}), d.get("stats", {}))

    def save(self, path: PathLike) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: PathLike) -> "RunManifest":
        return cls.from_dict(read_json(path))
