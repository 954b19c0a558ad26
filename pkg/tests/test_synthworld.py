import json
import os
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uvlg import synthworld as W
from uvlg.tasks import read_corpus


def world(**kw):
    return W.World(W.DatasetManifest(**kw))


def test_default_world_sizes():
    m = W.DatasetManifest()
    assert (len(m.objects), len(m.attributes), m.n_regions) == (24, 12, 8)
    assert "fire hydrant" in m.objects


def test_scene_shape_and_region_ids():
    s = W.gen_scene(np.random.default_rng(0), world(), "x")
    assert [r["region_id"] for r in s["regions"]] == list(range(1, 9))
    assert len(s["detections"]) == 8
    areas = [W.box_area(r["box"]) for r in s["regions"]]
    assert areas == sorted(areas, reverse=True)
    for r in s["regions"]:
        x1, y1, x2, y2 = r["box"]
        assert 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1
        assert len(r["roi"]) == 64
    assert len({r["object"] for r in s["regions"]}) == 8


def test_scene_determinism():
    a = W.scene_to_json(W.gen_scene(np.random.default_rng(7), world(), "x"))
    b = W.scene_to_json(W.gen_scene(np.random.default_rng(7), world(), "x"))
    assert a == b


def test_zero_noise_same_labels_same_roi():
    w = world(roi_sigma=0.0, objects=["cube"], attributes=["red"], distinct="none")
    s = W.gen_scene(np.random.default_rng(0), w, "x")
    assert s["regions"][0]["roi"] == s["regions"][1]["roi"]


def test_impossible_distinctness():
    with pytest.raises(W.ManifestError) as e:
        world(objects=["a", "b", "c"])
    assert e.value.field == "distinct"


def test_vqa_template_from_scene():
    w = world()
    scene = {"scene_id": "s", "qa": [["what color is the shirt?", "blue"]]}
    ex = W._vqa(scene, np.random.default_rng(0))
    assert (ex.input, ex.target) == ("vqa: what color is the shirt?", "blue")
    assert ex.aux["answers"] == {"blue": 10}
    assert w is not None


def test_split_answers():
    top, ood = W.split_answers({"blue": 10, "red": 5, "mauve": 1}, 2)
    assert (top, ood) == (["blue", "red"], ["mauve"])
    assert W.split_answers({"blue": 10, "red": 5}, 5) == (["blue", "red"], [])
    assert W.split_answers({"b": 1, "a": 1, "c": 2}, 2) == (["c", "a"], ["b"])
    with pytest.raises(ValueError):
        W.split_answers({"a": 1}, 0)


def test_iou_reference_values():
    assert W.iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert W.iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert abs(W.iou([0, 0, 1, 1], [0.5, 0, 1.5, 1]) - 1 / 3) < 1e-12
    assert W.iou([0, 0, 0, 0], [0, 0, 0, 0]) == 0.0


@given(st.lists(st.floats(0, 1), min_size=8, max_size=8))
def test_iou_symmetric_and_bounded(v):
    a = [min(v[0], v[2]), min(v[1], v[3]), max(v[0], v[2]), max(v[1], v[3])]
    b = [min(v[4], v[6]), min(v[5], v[7]), max(v[4], v[6]), max(v[5], v[7])]
    x = W.iou(a, b)
    assert 0.0 <= x <= 1.0 + 1e-12
    assert x == W.iou(b, a)


def test_detector_sim_noise_free_and_degenerate():
    w = world()
    s = W.gen_scene(np.random.default_rng(0), w, "x")
    clean = W.detector_sim(s, 0.0, 0.0, np.random.default_rng(1), w.m.objects, w.m.attributes)
    assert [(d["object"], d["attribute"], d["box"]) for d in clean] == \
        [(r["object"], r["attribute"], r["box"]) for r in s["regions"]]
    single = W.detector_sim(s, 1.0, 0.0, np.random.default_rng(1), [s["regions"][0]["object"]],
                            [s["regions"][0]["attribute"]])
    assert single[0]["object"] == s["regions"][0]["object"]
    assert single[0]["attribute"] == s["regions"][0]["attribute"]
    flipped = W.detector_sim(s, 1.0, 0.0, np.random.default_rng(1), w.m.objects, w.m.attributes)
    assert all(d["object"] != r["object"] for d, r in zip(flipped, s["regions"]))


def test_detector_jitter_keeps_boxes_valid():
    w = world()
    rng = np.random.default_rng(0)
    for i in range(125):
        s = W.gen_scene(rng, w, f"s{i}")
        for d in W.detector_sim(s, 0.0, 0.05, rng, w.m.objects, w.m.attributes):
            x1, y1, x2, y2 = d["box"]
            assert 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1


def test_cipher_by_hand():
    assert W.cipher("a red cube", {"r": "R"}) == "a Red cube"
    w = world()
    assert W.cipher("a red cube", w.cipher_map) == W.cipher("a red cube", world().cipher_map)
    assert sorted(w.cipher_map.values()) == sorted(w.cipher_map)


def test_nlvr_false_statement():
    w = world()
    rng = np.random.default_rng(3)
    s1, s2 = W.gen_scene(rng, w, "l"), W.gen_scene(rng, w, "r")
    for _ in range(50):
        ex = W._nlvr(s1, s2, rng, w)
        side = s1 if "left" in ex.input else s2
        words = ex.input.split(" contains a ")[1]
        present = {f"{d['attribute']} {d['object']}" for d in side["detections"]}
        assert ex.target == ("true" if words in present else "false")


def test_manifest_validation_and_errors(tmp_path):
    with pytest.raises(W.ManifestError) as e:
        W.DatasetManifest(scenes={"train": 10}).validate()
    assert e.value.field == "scenes"
    with pytest.raises(W.ManifestError) as e:
        W.DatasetManifest.from_dict({"colour": 3})
    assert e.value.field == "colour"
    bad = tmp_path / "m.json"
    bad.write_text('{\n  "seed": 1,\n  "n_regions": ,\n}')
    with pytest.raises(W.ManifestError, match="line 3"):
        W.DatasetManifest.load(bad)
    with pytest.raises(W.ManifestError):
        W.DatasetManifest(answer_k=0).validate()


def test_manifest_round_trip():
    m = W.DatasetManifest(seed=5, n_regions=6)
    assert W.DatasetManifest.from_dict(json.loads(m.to_json())) == m


# -- synthesized directory -----------------------------------------------------

def test_splits_disjoint(small_world):
    ids = {s: set(small_world.scenes(s).records) for s in W.SPLITS}
    assert not ids["train"] & ids["val"] and not ids["train"] & ids["test"] and not ids["val"] & ids["test"]


def test_out_of_domain_answers_not_in_topk(small_world):
    top = set(small_world.topk)
    assert set(small_world.answers["out_of_domain"]).isdisjoint(top)
    for split in W.SPLITS:
        for ex in read_corpus(small_world.corpus_path(split, "vqa")):
            assert ex.aux["in_domain"] == (ex.target in top)


def test_targets_consistent_with_latents(small_world):
    for split in W.SPLITS:
        recs = small_world.scenes(split).records
        for ex in read_corpus(small_world.corpus_path(split, "vqa")):
            obj = ex.input[len("vqa: what color is the "):-1]
            (region,) = [r for r in recs[ex.scene_ids[0]]["regions"] if r["object"] == obj]
            assert ex.target == region["attribute"]
        for ex in read_corpus(small_world.corpus_path(split, "refexp")):
            k = int(ex.target[len("<vis_"):-1])
            r = recs[ex.scene_ids[0]]["regions"][k - 1]
            assert ex.input == f"visual grounding: {r['attribute']} {r['object']}"
            assert ex.aux["box"] == r["box"]


def test_vcr_corpus_groups(small_world):
    exs = read_corpus(small_world.corpus_path("train", "vcr_qa"))
    by_q = {}
    for ex in exs:
        by_q.setdefault(ex.aux["qid"], []).append(ex)
    assert len(by_q) == 80 // 4
    for group in by_q.values():
        assert len(group) == 4
        assert sum(e.target == "true" for e in group) == 1


@pytest.mark.filterwarnings("ignore:answer_k")
def test_synth_is_byte_identical(tmp_path):
    m = W.DatasetManifest(scenes={"train": 20, "val": 5, "test": 5}, examples={"train": 20, "val": 8, "test": 8})
    W.synth(m, tmp_path / "a")
    W.synth(m, tmp_path / "b")
    for root, _, files in os.walk(tmp_path / "a"):
        for f in files:
            pa = os.path.join(root, f)
            pb = pa.replace(str(tmp_path / "a"), str(tmp_path / "b"))
            with open(pa, "rb") as fa, open(pb, "rb") as fb:
                assert fa.read() == fb.read(), pa


def test_k_covering_all_answers_warns(tmp_path):
    m = W.DatasetManifest(scenes={"train": 20, "val": 5, "test": 5}, examples={"train": 20, "val": 8, "test": 8},
                          answer_k=50, tasks=["vqa"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        info = W.synth(m, tmp_path)
    assert info["out_of_domain"] == []
    assert any("out-of-domain subset is empty" in str(w.message) for w in caught)
