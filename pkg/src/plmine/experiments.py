"""Toy student experiments: open-vocabulary and semi-supervised training with pseudo labels.

Each candidate region of a scene gets a feature vector built from its
overlaps with the scene's objects: an overlap-weighted sum of per-category
prototypes (plus noise), the overlap-weighted offset to the best-overlapping
object, and a bias. A :class:`~plmine.losses.ToyDetector` trained on these
features can only learn a category from images where that category is
labeled, either by ground truth or by pseudo labels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Any, Sequence

import numpy as np

from .benchmark import Benchmark, BenchmarkConfig, World, default_world, make_scenes, scene_ground_truth
from .evaluation import Detection, GroundTruth, ap50, coco_map
from .geometry import BBox, boxes_to_array, iou_matrix, nms_indices
from .losses import TargetSet, TrainConfig, TrainImage, ToyDetector, TrainResult, train_toy_student
from .miner import Candidate, MinerConfig, PseudoLabel, merge_teacher_pls, threshold_and_nms
from .proposals import generate_proposals
from .synthetic import SyntheticProposalSource, SyntheticRpnConfig, SyntheticScene, keyed_rng

ALPHA_SWEEP = (0.0, 0.5, 1.0)
N_GEOMETRIC = 5     # offset (4) + bias, the trailing feature columns


@dataclass(frozen=True)
class FeatureConfig:
    dim: int = 16
    noise: float = 0.4
    offset_scale: float = 1.0
    seed: int = 11
    candidates_per_image: int = 64
    candidate_nms: float = 0.7


class ToyFeatures:
    """Per-candidate features for a fixed world of categories."""

    def __init__(self, world: World, config: FeatureConfig = FeatureConfig()):
        self.world = world
        self.config = config
        rng = np.random.default_rng(config.seed)
        proto = rng.standard_normal((len(world.categories), config.dim))
        self.prototypes = proto / np.linalg.norm(proto, axis=1, keepdims=True)
        self.index = {cid: k for k, (cid, _) in enumerate(world.categories)}
        self.source = SyntheticProposalSource(SyntheticRpnConfig())

    @property
    def n_features(self) -> int:
        return self.config.dim + N_GEOMETRIC

    def candidates(self, scene: SyntheticScene) -> np.ndarray:
        props = generate_proposals(self.source, scene, self.config.candidates_per_image, self.config.candidate_nms)
        return boxes_to_array([p.box for p in props])

    def features(self, scene: SyntheticScene, boxes: np.ndarray) -> np.ndarray:
        ext = np.array([scene.extent.width, scene.extent.height] * 2, dtype=float)
        n = boxes.shape[0]
        out = np.zeros((n, self.n_features))
        out[:, -1] = 1.0
        noise = keyed_rng(scene.seed, "toy-features", self.config.seed).standard_normal((n, self.config.dim))
        out[:, :self.config.dim] = self.config.noise * noise
        if scene.objects:
            gt = scene.box_array
            ious = iou_matrix(boxes, gt)
            cats = [self.index[c] for c in scene.category_ids]
            out[:, :self.config.dim] += ious @ self.prototypes[cats]
            best = ious.argmax(axis=1)
            w = ious[np.arange(n), best][:, None]
            out[:, self.config.dim:self.config.dim + 4] = self.config.offset_scale * w * (gt[best] - boxes) / ext
        return out

    def image(self, scene: SyntheticScene, gt: Sequence[tuple[int, BBox]] = (),
              pseudo: Sequence[PseudoLabel] = (), in_labeled: bool = True, in_unlabeled: bool = False) -> TrainImage:
        boxes = self.candidates(scene)
        ext = np.array([scene.extent.width, scene.extent.height] * 2, dtype=float)

        def targets(labels, bxs, conf=None):
            if not labels:
                return TargetSet.empty()
            return TargetSet(labels, boxes_to_array(bxs) / ext, conf)

        gt_t = targets([self.index[c] for c, _ in gt], [b for _, b in gt])
        pl_t = targets([self.index[p.category_id] for p in pseudo], [p.box for p in pseudo],
                       [p.confidence for p in pseudo])
        return TrainImage(scene.image_id, self.features(scene, boxes), boxes / ext, gt_t, pl_t,
                          in_labeled, in_unlabeled)


def detect(detector: ToyDetector, feats: ToyFeatures, scene: SyntheticScene,
           nms_threshold: float = 0.5) -> list[Detection]:
    """Class-wise NMS'd detections; each candidate reports its best non-background category."""
    boxes = feats.candidates(scene)
    if boxes.size == 0:
        return []
    ext = np.array([scene.extent.width, scene.extent.height] * 2, dtype=float)
    pred = detector.predict(feats.features(scene, boxes), boxes / ext)
    probs = pred.probs[:, :-1]
    k = probs.argmax(axis=1)
    score = probs[np.arange(len(k)), k]
    px = pred.boxes * ext
    px[:, [0, 2]] = np.clip(px[:, [0, 2]], 0, scene.extent.width)
    px[:, [1, 3]] = np.clip(px[:, [1, 3]], 0, scene.extent.height)
    ok = (px[:, 2] > px[:, 0]) & (px[:, 3] > px[:, 1])
    out = []
    for cat in np.unique(k[ok]):
        idx = np.flatnonzero(ok & (k == cat))
        for i in idx[nms_indices(px[idx], score[idx], nms_threshold)]:
            out.append(Detection(scene.image_id, feats.world.categories[cat][0], BBox.from_array(px[i]),
                                 float(score[i])))
    return out


def detect_all(detector: ToyDetector, feats: ToyFeatures, scenes: Sequence[SyntheticScene]) -> list[Detection]:
    return [d for s in scenes for d in detect(detector, feats, s)]


def _pls_by_image(pls: Sequence[PseudoLabel]) -> dict[Any, list[PseudoLabel]]:
    out: dict[Any, list[PseudoLabel]] = {}
    for p in pls:
        out.setdefault(p.image_id, []).append(p)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 60
    n_test: int = 40
    seed: int = 0
    train: TrainConfig = TrainConfig(box_features=N_GEOMETRIC)
    features: FeatureConfig = FeatureConfig()
    miner: MinerConfig = MinerConfig()
    teacher_noise: float = 0.45
    labeled_fraction: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


def _benchmarks(config: ExperimentConfig, world: World) -> tuple[Benchmark, list[SyntheticScene]]:
    bench = Benchmark.build(replace(BenchmarkConfig(), n_scenes=config.n_train, seed=1000 + config.seed), world)
    test = make_scenes(world, config.n_test, 5000 + config.seed, first_image_id=100000)
    return bench, test


@dataclass
class StudentRun:
    name: str
    result: TrainResult
    novel_ap50: float
    ap50: float
    mAP: float

    def to_dict(self) -> dict:
        return {"name": self.name, "novel_ap50": self.novel_ap50, "ap50": self.ap50, "mAP": self.mAP,
                "alpha": self.result.config.alpha, "losses": list(self.result.losses)}


def _evaluate(name, result, feats, test, world) -> StudentRun:
    dets = detect_all(result.detector, feats, test)
    gt = scene_ground_truth(test)
    gt_novel = [g for g in gt if g.category_id in set(world.novel_ids)]
    return StudentRun(name, result, ap50(dets, gt_novel, world.novel_ids), ap50(dets, gt),
                      coco_map(dets, gt))


def ovd_experiment(config: ExperimentConfig = ExperimentConfig(), alphas: Sequence[float] = ALPHA_SWEEP,
                   world: World | None = None) -> dict[str, Any]:
    """Students trained on base ground truth plus novel pseudo labels at several ``alpha``.

    Every training image is both labeled (base GT) and unlabeled (novel
    PLs). ``alpha = 0`` is the base-only student.
    """
    world = default_world() if world is None else world
    bench, test = _benchmarks(config, world)
    cands = bench.candidates(config.miner, world.novel_labelspace())
    pls = _pls_by_image(threshold_and_nms(cands, config.miner))
    feats = ToyFeatures(world, config.features)
    base = set(world.base_ids)
    images = [feats.image(s, [(c, b) for c, b in s.objects if c in base], pls.get(s.image_id, []), True, True)
              for s in bench.scenes]
    runs = {}
    for a in alphas:
        res = train_toy_student(images, len(world.categories), replace(config.train, alpha=float(a)))
        runs[f"alpha={a:g}"] = _evaluate(f"alpha={a:g}", res, feats, test, world)
    n_pl = sum(len(v) for v in pls.values())
    return {"runs": runs, "pl_per_image": n_pl / len(bench.scenes), "config": config.to_dict()}


def ssod_experiment(config: ExperimentConfig = ExperimentConfig()) -> dict[str, Any]:
    """Teacher-only PLs against teacher PLs merged with VL PLs, over the full label space.

    A ``labeled_fraction`` of training images carries full ground truth;
    the rest are unlabeled and supervised only by pseudo labels. The
    teacher is the same pipeline run with a much noisier scorer.
    """
    world = default_world()
    bench, test = _benchmarks(config, world)
    ls = world.full_labelspace()
    n_lab = max(1, int(round(config.labeled_fraction * len(bench.scenes))))
    order = keyed_rng(config.seed, "ssod-split").permutation(len(bench.scenes))
    labeled = {bench.scenes[i].image_id for i in order[:n_lab]}
    unlabeled = [s for s in bench.scenes if s.image_id not in labeled]

    def cands_for(scenes, miner, backends):
        sub = Benchmark(world, bench.config, list(scenes))
        return sub.candidates(miner, ls, backends)

    teacher_c: list[Candidate] = cands_for(unlabeled, config.miner, bench.backends(config.teacher_noise, noise_key=1))
    vl_c: list[Candidate] = cands_for(unlabeled, config.miner, bench.backends())
    pl_sets = {
        "teacher_only": threshold_and_nms(teacher_c, config.miner),
        "merged": merge_teacher_pls(vl_c, teacher_c, config.miner, ls.target_ids),
    }
    feats = ToyFeatures(world, config.features)
    runs = {}
    for name, pls in pl_sets.items():
        by = _pls_by_image(pls)
        images = [feats.image(s, list(s.objects), (), True, False) if s.image_id in labeled
                  else feats.image(s, (), by.get(s.image_id, []), False, True) for s in bench.scenes]
        res = train_toy_student(images, len(world.categories), config.train)
        runs[name] = _evaluate(name, res, feats, test, world)
    return {"runs": runs, "n_labeled": n_lab, "n_unlabeled": len(unlabeled),
            "pl_counts": {k: len(v) for k, v in pl_sets.items()}, "config": config.to_dict()}
