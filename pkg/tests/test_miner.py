import logging

import numpy as np
import pytest

from plmine.benchmark import Benchmark, BenchmarkConfig
from plmine.geometry import BBox, ImageExtent, boxes_to_array, iou_matrix
from plmine.miner import (Candidate, LabelSpaceMismatchError, MinerBackends, MinerConfig, MiningError, PseudoLabel,
                          fuse_scores, merge_teacher_pls, mine_dataset, mine_image, score_candidates,
                          threshold_and_nms)
from plmine.proposals import Proposal
from plmine.scoring import LabelSpace, ScoreDistribution
from plmine.synthetic import (ContractionRefiner, OracleBackend, SyntheticProposalSource, SyntheticScene,
                              generate_scene)

EXT = ImageExtent(256, 256)
LS = LabelSpace(((1, "cat"), (2, "dog")), "bg_text")


def _backends(noise=0.0):
    return MinerBackends(SyntheticProposalSource(), OracleBackend(LS.target_names, noise=noise), ContractionRefiner())


class FlakySource:
    """Synthetic source that fails on one image id."""

    shareable = True

    def __init__(self, bad_id):
        self.bad_id = bad_id
        self.inner = SyntheticProposalSource()

    def propose(self, item):
        if item.image_id == self.bad_id:
            raise RuntimeError("corrupt image")
        return self.inner.propose(item)


def test_config_defaults_and_validation():
    c = MinerConfig()
    assert (c.tau, c.roi_steps, c.top_k, c.rpn_nms, c.pl_nms, c.fusion_enabled, c.nms_mode) == \
        (0.8, 10, 1000, 0.3, 0.5, True, "classwise")
    assert MinerConfig.from_dict(c.to_dict()) == c
    for bad in ({"tau": 1.1}, {"pl_nms": -0.1}, {"roi_steps": -1}, {"top_k": 0}, {"nms_mode": "x"},
                {"gate": "x"}, {"max_over": "x"}):
        with pytest.raises(ValueError):
            MinerConfig(**bad)
    with pytest.raises(ValueError):
        MinerConfig.from_dict({"tua": 0.5})


def test_fuse_scores_examples():
    assert fuse_scores(1.0, 1.0) == 1.0
    assert fuse_scores(0.6, 0.8) == pytest.approx(0.7, abs=1e-15)
    assert fuse_scores(0.9, 0.68) == pytest.approx(0.79, abs=1e-15) and fuse_scores(0.9, 0.68) < 0.8
    assert fuse_scores(0.2, ScoreDistribution(np.array([0.3, 0.7]))) == pytest.approx(0.45)
    assert fuse_scores(0.2, 0.7, fusion_enabled=False) == 0.7
    with pytest.raises(ValueError):
        fuse_scores(1.5, 0.5)


def test_dropped_below_tau():
    c = Candidate(1, BBox(0, 0, 10, 10), 1, fuse_scores(0.9, 0.68))
    assert threshold_and_nms([c], MinerConfig(tau=0.8)) == []


@pytest.mark.parametrize("seed", range(10))
def test_two_object_zero_noise_example(seed):
    s = generate_scene(LS, EXT, 2, seed)
    pls = mine_image(s, LS, _backends(), MinerConfig(tau=0.8))
    assert len(pls) == 2
    ious = iou_matrix(boxes_to_array([p.box for p in pls]), s.box_array)
    assert sorted(ious.argmax(1).tolist()) == [0, 1]
    for p, row in zip(pls, ious):
        assert row.max() >= 0.9
        assert p.category_id == s.category_ids[row.argmax()]


def test_tau_above_max_score_empty():
    s = generate_scene(LS, EXT, 3, 1)
    cands = score_candidates(s, LS, _backends(0.2))
    top = max(c.score for c in cands)
    assert threshold_and_nms(cands, MinerConfig(tau=min(1.0, top + 1e-9))) == [] or top == 1.0
    assert mine_image(s, LS, _backends(0.2), MinerConfig(tau=1.0)) == [] or top == 1.0


def test_empty_scene_yields_empty_not_error():
    s = SyntheticScene(EXT, (), 3, LS.target_categories)
    assert mine_image(s, LS, _backends()) == []


@pytest.mark.parametrize("seed", range(5))
def test_emitted_labels_respect_gate_and_targets(seed):
    s = generate_scene(LS, EXT, 4, seed)
    for cfg in (MinerConfig(tau=0.3), MinerConfig(tau=0.5, nms_mode="class_agnostic"),
                MinerConfig(tau=0.5, gate="class_prob"), MinerConfig(tau=0.4, fusion_enabled=False)):
        pls = mine_image(s, LS, _backends(0.5), cfg)
        assert all(p.confidence == p.fused_score for p in pls)
        assert all(p.category_id in LS.target_ids for p in pls)
        if cfg.gate == "fused":
            assert all(p.confidence >= cfg.tau for p in pls)
        boxes = boxes_to_array([p.box for p in pls])
        ious = iou_matrix(boxes, boxes)
        np.fill_diagonal(ious, 0)
        if cfg.nms_mode == "class_agnostic":
            assert ious.max(initial=0) <= cfg.pl_nms
        else:
            cats = np.array([p.category_id for p in pls])
            assert not np.any((ious > cfg.pl_nms) & (cats[:, None] == cats[None, :]))


def test_threshold_monotone():
    b = Benchmark.build(BenchmarkConfig(n_scenes=10))
    cands = b.candidates()
    taus = np.linspace(0.05, 0.95, 19)
    pre = [{c for c in cands if c.score >= t} for t in taus]
    assert all(b2 <= b1 for b1, b2 in zip(pre, pre[1:]))
    counts = [len(threshold_and_nms(cands, MinerConfig(tau=float(t)))) for t in taus]
    assert all(c2 <= c1 for c1, c2 in zip(counts, counts[1:]))


def test_nms_classwise_keeps_overlapping_other_class():
    a = Candidate(1, BBox(0, 0, 10, 10), 1, 0.9)
    b = Candidate(1, BBox(0, 0, 10, 11), 2, 0.85)
    assert len(threshold_and_nms([a, b], MinerConfig(tau=0.5))) == 2
    assert threshold_and_nms([a, b], MinerConfig(tau=0.5, nms_mode="class_agnostic"))[0].category_id == 1


def test_pseudo_label_invariants():
    with pytest.raises(ValueError):
        PseudoLabel(1, BBox(0, 0, 1, 1), 1, 0.0, 0.0)
    with pytest.raises(ValueError):
        PseudoLabel(1, BBox(0, 0, 1, 1), 1, 0.9, 0.9, "human")
    p = PseudoLabel(1, BBox(0, 0, 1, 2), 3, 0.9, 0.9, "teacher")
    assert PseudoLabel.from_record(p.to_record()) == p
    c = Candidate(2, BBox(1, 2, 3, 4), 1, 0.5, 0.4, 0.6)
    assert Candidate.from_record(c.to_record()) == c


def test_merge_empty_teacher_equals_vl():
    s = generate_scene(LS, EXT, 4, 2)
    vl = score_candidates(s, LS, _backends(0.3))
    assert merge_teacher_pls(vl, [], MinerConfig(tau=0.6)) == threshold_and_nms(vl, MinerConfig(tau=0.6))


def test_merge_duplicate_teacher_wins():
    box = BBox(10, 10, 50, 50)
    vl = [Candidate(1, box, 1, 0.85)]
    teacher = [Candidate(1, box, 1, 0.9)]
    out = merge_teacher_pls(vl, teacher, MinerConfig())
    assert len(out) == 1 and out[0].source == "teacher" and out[0].confidence == 0.9


def test_merge_disjoint_union():
    vl = [Candidate(1, BBox(10, 10, 50, 50), 1, 0.85)]
    teacher = [Candidate(1, BBox(100, 100, 150, 150), 2, 0.9)]
    out = merge_teacher_pls(vl, teacher, MinerConfig(), category_ids=[1, 2])
    assert {(p.source, p.category_id) for p in out} == {("vl", 1), ("teacher", 2)}


def test_merge_label_space_mismatch():
    vl = [Candidate(1, BBox(10, 10, 50, 50), 1, 0.85)]
    teacher = [Candidate(1, BBox(100, 100, 150, 150), 9, 0.9)]
    with pytest.raises(LabelSpaceMismatchError):
        merge_teacher_pls(vl, teacher, MinerConfig(), category_ids=[1, 2])


def test_merge_warns_on_score_scale_gap(caplog):
    vl = [Candidate(1, BBox(10, 10, 50, 50), 1, 0.95)]
    teacher = [Candidate(1, BBox(100, 100, 150, 150), 1, 0.3)]
    with caplog.at_level(logging.WARNING, logger="plmine.miner"):
        merge_teacher_pls(vl, teacher)
    assert "medians differ" in caplog.text


def _scenes(n):
    return [generate_scene(LS, EXT, 3, 40 + i, image_id=i + 1) for i in range(n)]


def test_mine_dataset_deterministic_across_workers():
    scenes = _scenes(8)
    one = mine_dataset(scenes, LS, _backends(0.3), MinerConfig(tau=0.6), workers=1)
    many = mine_dataset(list(reversed(scenes)), LS, _backends(0.3), MinerConfig(tau=0.6), workers=3)
    assert one.pseudo_labels == many.pseudo_labels
    assert [p.image_id for p in one.pseudo_labels] == sorted(p.image_id for p in one.pseudo_labels)


def test_mine_dataset_skips_and_records_failures():
    scenes = _scenes(5)
    be = MinerBackends(FlakySource(3), OracleBackend(LS.target_names), ContractionRefiner())
    res = mine_dataset(scenes, LS, be, MinerConfig(tau=0.6), workers=2)
    assert list(res.failures) == [3] and "corrupt image" in res.failures[3]
    assert res.failure_rate == 0.2
    assert {p.image_id for p in res.pseudo_labels} == {1, 2, 4, 5}
    with pytest.raises(MiningError, match="image 3"):
        mine_image(scenes[2], LS, be)


def test_candidates_only_mode():
    scenes = _scenes(2)
    res = mine_dataset(scenes, LS, _backends(0.3), candidates_only=True)
    assert res.pseudo_labels and all(isinstance(c, Candidate) for c in res.pseudo_labels)
    assert res.pseudo_labels == score_candidates(scenes[0], LS, _backends(0.3)) + \
        score_candidates(scenes[1], LS, _backends(0.3))


def test_rpn_score_travels_through_refinement():
    s = generate_scene(LS, EXT, 2, 9)
    be = _backends()
    cands = score_candidates(s, LS, be, MinerConfig(roi_steps=5))
    raw = {p.rpn_score for p in SyntheticProposalSource().propose(s)}
    assert {c.rpn_score for c in cands} <= raw
