import json

import pytest

from conftest import GOLDEN
from plmine.benchmark import default_world, make_scenes
from plmine.geometry import BBox
from plmine.io import (COCO_ZS_BASE, COCO_ZS_NOVEL, SCALING_RATIOS, SSOD_FRACTIONS, Annotation, DatasetError,
                       DetectionDataset, ImageRecord, RunManifest, SplitManifest, apply_ovd_manifest,
                       build_bundled_corpus, coco_zs_manifest, file_sha256, load_bundled_corpus,
                       load_candidates, load_coco_json, load_pseudo_labels, make_ssod_split, read_json,
                       save_candidates, save_coco_json, save_pseudo_labels, scaling_splits, write_json)
from plmine.miner import Candidate, PseudoLabel
from plmine.scoring import LabelSpace

WORLD = default_world()


def _dataset(n=100, seed=3):
    return DetectionDataset.from_scenes(make_scenes(WORLD, n, seed), WORLD.categories)


def _coco():
    return {"images": [{"id": 1, "width": 100, "height": 80}, {"id": 2, "width": 50, "height": 50}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [10, 10, 20, 30]}],
            "categories": [{"id": 3, "name": "cup"}]}


def test_roundtrip(tmp_path):
    ds = _dataset(10)
    save_coco_json(ds, tmp_path / "d.json")
    back = load_coco_json(tmp_path / "d.json")
    assert back.images == ds.images and back.categories == ds.categories
    assert [(a.image_id, a.category_id, a.box) for a in back.annotations] == \
        [(a.image_id, a.category_id, a.box) for a in ds.annotations]
    save_coco_json(back, tmp_path / "e.json")
    assert (tmp_path / "d.json").read_bytes() == (tmp_path / "e.json").read_bytes()


def test_xywh_conversion():
    ds = DetectionDataset.from_coco(_coco())
    assert ds.annotations[0].box == BBox(10, 10, 30, 40)
    assert ds.to_coco()["annotations"][0]["bbox"] == [10, 10, 20, 30]


def test_missing_image_id_error_names_it():
    d = _coco()
    d["annotations"][0]["image_id"] = 77
    with pytest.raises(DatasetError, match=r"\$\.annotations\[0\]\.image_id.*77"):
        DetectionDataset.from_coco(d)


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d.pop("images"), r"\$\.images"),
    (lambda d: d["images"][1].pop("width"), r"\$\.images\[1\]\.width"),
    (lambda d: d["annotations"][0].update(bbox=[1, 2, 3]), r"\$\.annotations\[0\]\.bbox"),
    (lambda d: d["annotations"][0].update(category_id=9), r"\$\.annotations\[0\]\.category_id"),
    (lambda d: d["annotations"][0].update(bbox=[90, 10, 20, 30]), r"\$\.annotations\[0\]\.bbox"),
])
def test_schema_errors_carry_json_path(mutate, path):
    d = _coco()
    mutate(d)
    with pytest.raises(DatasetError, match=path):
        DetectionDataset.from_coco(d)


def test_invalid_json_file(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(DatasetError, match=r"^\$"):
        load_coco_json(tmp_path / "bad.json")


def test_coco_zs_partition():
    m = coco_zs_manifest()
    assert len(m.base) == 48 and len(m.novel) == 17
    assert len({n for _, n in COCO_ZS_BASE + COCO_ZS_NOVEL}) == 65
    cats = sorted(COCO_ZS_BASE + COCO_ZS_NOVEL)
    ds = DetectionDataset([ImageRecord(1, 10, 10)], [], cats)
    base, novel = apply_ovd_manifest(ds, m)
    assert len(base) == 48 and len(novel) == 17 and not set(base) & set(novel)
    with pytest.raises(DatasetError):
        apply_ovd_manifest(DetectionDataset([ImageRecord(1, 10, 10)], [], cats[:-1]), m)


def test_split_manifest_invariants():
    with pytest.raises(ValueError):
        SplitManifest("ovd", ((1, "a"),), ((1, "a"),))
    with pytest.raises(ValueError):
        SplitManifest("ssod", labeled_ids=(1, 2), unlabeled_ids=(2, 3))
    with pytest.raises(ValueError):
        SplitManifest("other")
    m = make_ssod_split(_dataset(20), 0.1, 1)
    assert SplitManifest.from_dict(json.loads(json.dumps(m.to_dict()))) == m


def test_ssod_golden_split():
    m = make_ssod_split(_dataset(), 0.05, 2022)
    assert m.to_dict() == read_json(GOLDEN / "ssod_split_005.json")
    assert len(m.labeled_ids) == 5 and len(m.unlabeled_ids) == 95


def test_ssod_fraction_one_and_zero():
    ds = _dataset(20)
    m = make_ssod_split(ds, 1.0, 0)
    assert sorted(m.labeled_ids) == sorted(ds.image_ids) and m.unlabeled_ids == ()
    with pytest.raises(ValueError):
        make_ssod_split(ds, 0.01, 0)
    with pytest.raises(ValueError):
        make_ssod_split(ds, 0.0, 0)
    assert SSOD_FRACTIONS == (0.01, 0.02, 0.05, 0.10)


def test_split_tags_and_both_membership():
    ds = _dataset(10)
    tagged = ds.with_split(make_ssod_split(ds, 0.3, 5))
    assert sum(im.labeled for im in tagged.images) == 3
    assert all(im.labeled != im.unlabeled for im in tagged.images)
    both = DetectionDataset([ImageRecord(1, 10, 10, labeled=True, unlabeled=True)], [], [(1, "a")])
    assert DetectionDataset.from_coco(both.to_coco()).images[0].unlabeled


def test_scaling_splits():
    ds = _dataset(100)
    splits = scaling_splits(ds, 4, SCALING_RATIOS, seed=1)
    assert sorted(splits) == [0, 1, 5, 10, 20]
    lab = {m.labeled_ids for m in splits.values()}
    assert len(lab) == 1
    sizes = [len(splits[r].unlabeled_ids) for r in SCALING_RATIOS]
    assert sizes == [0, 4, 20, 40, 80]
    for a, b in zip(SCALING_RATIOS, SCALING_RATIOS[1:]):
        assert set(splits[a].unlabeled_ids) <= set(splits[b].unlabeled_ids)
    with pytest.raises(ValueError):
        scaling_splits(ds, 5, SCALING_RATIOS)


def test_bundled_corpus_matches_regeneration(tmp_path):
    ds, ls = build_bundled_corpus()
    save_coco_json(ds, tmp_path / "c.json")
    from plmine.io import BUNDLED_CORPUS, BUNDLED_LABELSPACE
    assert (tmp_path / "c.json").read_bytes() == BUNDLED_CORPUS.read_bytes()
    assert read_json(BUNDLED_LABELSPACE) == ls
    loaded = load_bundled_corpus()
    assert len(loaded.images) == 24
    assert LabelSpace.from_dict(ls).target_ids == WORLD.novel_ids


def test_to_scenes_roundtrip():
    scenes = make_scenes(WORLD, 5, 9)
    ds = DetectionDataset.from_scenes(scenes, WORLD.categories)
    assert ds.to_scenes() == scenes
    with pytest.raises(DatasetError):
        DetectionDataset.from_coco(_coco()).to_scenes()


def test_pl_and_candidate_files(tmp_path):
    pls = [PseudoLabel(1, BBox(1.5, 2, 30, 40.25), 5, 0.91, 0.91), PseudoLabel(2, BBox(0, 0, 3, 3), 6, 0.8, 0.8,
                                                                                "teacher")]
    save_pseudo_labels(tmp_path / "p.json", pls)
    assert load_pseudo_labels(tmp_path / "p.json") == pls
    rec = read_json(tmp_path / "p.json")[0]
    assert set(rec) == {"image_id", "category_id", "bbox", "score", "source"}
    cands = [Candidate(1, BBox(1, 2, 3, 4), 5, 0.4, 0.3, 0.5)]
    save_candidates(tmp_path / "c.json", cands)
    assert load_candidates(tmp_path / "c.json") == cands
    write_json(tmp_path / "x.json", [{"image_id": 1}])
    with pytest.raises(DatasetError, match=r"\$\[0\]\.category_id"):
        load_pseudo_labels(tmp_path / "x.json")


def test_write_json_deterministic(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": [1.0, 2]})
    write_json(tmp_path / "b.json", {"a": [1.0, 2], "b": 1})
    assert file_sha256(tmp_path / "a.json") == file_sha256(tmp_path / "b.json")


def test_run_manifest_roundtrip(tmp_path):
    m = RunManifest("mine", {"tau": 0.8}, 3, {"targets": []}, {"scorer": "oracle"}, {"d.json": "ab"},
                    {"p.json": "cd"}, {"n": 1})
    m.save(tmp_path / "m.json")
    assert RunManifest.load(tmp_path / "m.json") == m
