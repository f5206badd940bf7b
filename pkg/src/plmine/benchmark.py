"""Seeded desk-scale benchmark for pseudo-label ablations.

A *world* has base and novel categories; scenes mix both. Mining targets
the novel categories and AP@PL is measured against novel ground truth, so
base objects act as distractors exactly as in the open-vocabulary setting.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .evaluation import GroundTruth, pl_quality
from .geometry import ImageExtent
from .miner import Candidate, MinerBackends, MinerConfig, score_candidates, threshold_and_nms
from .scoring import LabelSpace, build_text_embeddings
from .synthetic import (ContractionRefiner, ContractionRefinerConfig, OracleBackend, SyntheticProposalSource,
                        SyntheticRpnConfig, SyntheticScene, generate_scene)

BASE_NAMES = ("mug", "book", "laptop", "phone")
NOVEL_NAMES = ("stapler", "scissors", "lamp", "plant")
TAU_SWEEP = (0.05, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95, 0.99)


@dataclass(frozen=True)
class World:
    base: tuple[tuple[int, str], ...]
    novel: tuple[tuple[int, str], ...]

    @property
    def categories(self) -> tuple[tuple[int, str], ...]:
        return self.base + self.novel

    @property
    def base_ids(self) -> list[int]:
        return [i for i, _ in self.base]

    @property
    def novel_ids(self) -> list[int]:
        return [i for i, _ in self.novel]

    @property
    def names(self) -> list[str]:
        return [n for _, n in self.categories]

    def world_labelspace(self) -> LabelSpace:
        return LabelSpace(self.categories)

    def novel_labelspace(self, background_mode: str = "none") -> LabelSpace:
        bg = tuple(n for _, n in self.base) if background_mode in ("base_as_background", "background_set") else ()
        return LabelSpace(self.novel, background_mode, bg)

    def full_labelspace(self) -> LabelSpace:
        """Every category as a target (the semi-supervised label space)."""
        return LabelSpace(self.categories)


def default_world() -> World:
    base = tuple((i + 1, n) for i, n in enumerate(BASE_NAMES))
    novel = tuple((len(BASE_NAMES) + i + 1, n) for i, n in enumerate(NOVEL_NAMES))
    return World(base, novel)


@dataclass(frozen=True)
class BenchmarkConfig:
    n_scenes: int = 100
    extent: ImageExtent = ImageExtent(256, 256)
    objects_per_scene: tuple[int, int] = (3, 6)
    seed: int = 2022
    rpn: SyntheticRpnConfig = SyntheticRpnConfig()
    refiner: ContractionRefinerConfig = ContractionRefinerConfig()
    scorer_noise: float = 0.3
    scorer_temperature: float = 0.25
    scorer_background_weight: float = 0.3


def make_scenes(world: World, n_scenes: int, seed: int, extent: ImageExtent = ImageExtent(256, 256),
                objects_per_scene: tuple[int, int] = (3, 6), first_image_id: int = 1) -> list[SyntheticScene]:
    rng = np.random.default_rng(seed)
    lo, hi = objects_per_scene
    scenes = []
    for k in range(n_scenes):
        n_obj = int(rng.integers(lo, hi + 1))
        scene_seed = int(rng.integers(2 ** 31))
        scenes.append(generate_scene(world.world_labelspace(), extent, n_obj, scene_seed,
                                     image_id=first_image_id + k))
    return scenes


def scene_ground_truth(scenes: Sequence[SyntheticScene], categories: Sequence[int] | None = None) -> list[GroundTruth]:
    keep = None if categories is None else set(categories)
    return [GroundTruth(s.image_id, c, b) for s in scenes for c, b in s.objects if keep is None or c in keep]


@dataclass
class Benchmark:
    world: World
    config: BenchmarkConfig
    scenes: list[SyntheticScene] = field(default_factory=list)

    @classmethod
    def build(cls, config: BenchmarkConfig = BenchmarkConfig(), world: World | None = None) -> "Benchmark":
        world = default_world() if world is None else world
        scenes = make_scenes(world, config.n_scenes, config.seed, config.extent, config.objects_per_scene)
        return cls(world, config, scenes)

    def backends(self, noise: float | None = None, noise_key: int = 0) -> MinerBackends:
        noise = self.config.scorer_noise if noise is None else noise
        return MinerBackends(
            source=SyntheticProposalSource(self.config.rpn),
            scorer=OracleBackend(self.world.names, noise, self.config.scorer_temperature, noise_key,
                                 self.config.scorer_background_weight),
            refiner=ContractionRefiner(self.config.refiner),
        )

    @property
    def image_ids(self) -> list[int]:
        return [s.image_id for s in self.scenes]

    def novel_gt(self) -> list[GroundTruth]:
        return scene_ground_truth(self.scenes, self.world.novel_ids)

    def candidates(self, config: MinerConfig = MinerConfig(), labelspace: LabelSpace | None = None,
                   backends: MinerBackends | None = None) -> list[Candidate]:
        """Pre-threshold candidates over every scene."""
        labelspace = self.world.novel_labelspace() if labelspace is None else labelspace
        backends = self.backends() if backends is None else backends
        text = build_text_embeddings(labelspace, backends.scorer)
        out: list[Candidate] = []
        for s in self.scenes:
            out.extend(score_candidates(s, labelspace, backends, config, text))
        return out

    def quality(self, candidates: Sequence[Candidate], tau: float,
                config: MinerConfig = MinerConfig()) -> tuple[float, float]:
        """(AP@PL, #@PL) of the PLs emitted from ``candidates`` at ``tau``."""
        pls = threshold_and_nms(candidates, replace(config, tau=tau))
        return pl_quality(pls, self.novel_gt(), self.world.novel_ids, self.image_ids)


def tune_tau_for_count(bench: Benchmark, candidates: Sequence[Candidate], target: float,
                       config: MinerConfig = MinerConfig()) -> float:
    """Threshold whose #@PL is closest to ``target``.

    Greedy NMS after a threshold keeps exactly the survivors of NMS at a
    lower threshold that clear the higher one, so the count curve is read
    off a single zero-threshold run.
    """
    n_img = len(bench.scenes)
    if config.gate != "fused":
        # class-prob gate is not the NMS ranking score; recount on a grid
        best, best_gap = 0.0, np.inf
        for t in np.unique([c.class_prob for c in candidates] + [0.0]):
            n = len(threshold_and_nms(candidates, replace(config, tau=float(t)))) / n_img
            if abs(n - target) < best_gap:
                best, best_gap = float(t), abs(n - target)
        return best
    survivors = threshold_and_nms(candidates, replace(config, tau=0.0))
    if not survivors:
        return 0.0
    scores = np.sort([p.fused_score for p in survivors])[::-1]
    counts = np.arange(1, scores.size + 1) / n_img
    k = int(np.argmin(np.abs(counts - target)))
    return float(min(1.0, scores[k]))
