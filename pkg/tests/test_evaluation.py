"""Localization metrics, difficulty stratification, report schema."""

import json

import numpy as np
import pytest

from avalign.dataset import DatasetRecord, compose_dataset, load_dataset
from avalign.evaluation import (DEFAULT_LEVEL_TAU, TAU_GRID, EvalReport,
                                GroundTruthMask, LevelScores, auc, ciou,
                                ciou_class, evaluate_method, format_report,
                                ground_truth_from_record, split_by_level)
from avalign.config import RunConfig, apply_assignments
from avalign.model import build_model

RNG = np.random.default_rng(17)


def _record(level, boxes, y_a=None, y_v=None, rid=0):
    c = 6
    ya = np.zeros(c, dtype=np.uint8) if y_a is None else np.asarray(y_a, dtype=np.uint8)
    yv = np.zeros(c, dtype=np.uint8) if y_v is None else np.asarray(y_v, dtype=np.uint8)
    return DatasetRecord(id=rid, split="test", level=level, y_a=ya, y_v=yv,
                         boxes=tuple(boxes), offsets={})


def test_tau_grid_is_twenty_even_steps():
    assert len(TAU_GRID) == 20
    assert TAU_GRID[0] == 0.05 and TAU_GRID[-1] == 1.0
    assert np.allclose(np.diff(TAU_GRID), 0.05)


def test_ciou_perfect_match_is_one():
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:5, 3:6] = True
    assert ciou(mask.astype(float), mask, 0.5) == 1.0


def test_ciou_disjoint_is_zero():
    mask = np.zeros((8, 8), dtype=bool)
    mask[:2] = True
    heat = np.zeros((8, 8))
    heat[6:] = 1.0
    assert ciou(heat, mask, 0.5) == 0.0


def test_ciou_hand_counted_overlap():
    # activation 4x4 (16 px), mask 4x2 (8 px), overlap 4x2=8 -> 8 / 16
    heat = np.zeros((8, 8))
    heat[0:4, 0:4] = 0.9
    mask = np.zeros((8, 8), dtype=bool)
    mask[0:4, 2:4] = True
    assert np.isclose(ciou(heat, mask, 0.5), 8 / 16)


def test_ciou_threshold_inclusive():
    heat = np.full((2, 2), 0.5)
    mask = np.ones((2, 2), dtype=bool)
    assert ciou(heat, mask, 0.5) == 1.0


def test_ciou_matches_loop_oracle():
    for _ in range(50):
        heat = RNG.random((10, 10))
        mask = RNG.random((10, 10)) > 0.6
        if not mask.any():
            mask[0, 0] = True
        tau = float(RNG.uniform(0.1, 0.9))
        inter = sum(1 for i in range(10) for j in range(10)
                    if heat[i, j] >= tau and mask[i, j])
        union = sum(1 for i in range(10) for j in range(10)
                    if heat[i, j] >= tau or mask[i, j])
        assert np.isclose(ciou(heat, mask, tau), inter / union, atol=1e-12)


def test_ciou_rejects_empty_mask_and_shape_mismatch():
    with pytest.raises(ValueError):
        ciou(np.ones((4, 4)), np.zeros((4, 4), dtype=bool), 0.5)
    with pytest.raises(ValueError):
        ciou(np.ones((4, 4)), np.ones((5, 5), dtype=bool), 0.5)


def test_ciou_activation_set_shrinks_with_tau():
    heat = RNG.random((12, 12))
    mask = np.zeros((12, 12), dtype=bool)
    mask[4:8, 4:8] = True
    prev = None
    for tau in (0.2, 0.4, 0.6, 0.8):
        act = int((heat >= tau).sum())
        if prev is not None:
            assert act <= prev
        prev = act
        assert 0.0 <= ciou(heat, mask, tau) <= 1.0


def test_auc_matches_loop_oracle():
    for _ in range(20):
        heat = RNG.random((9, 9))
        mask = RNG.random((9, 9)) > 0.5
        if not mask.any():
            mask[0, 0] = True
        want = np.mean([1.0 if ciou(heat, mask, t) >= t else 0.0 for t in TAU_GRID])
        assert np.isclose(auc(heat, mask), want, atol=1e-12)


def test_auc_extremes():
    mask = np.zeros((6, 6), dtype=bool)
    mask[1:4, 1:4] = True
    assert auc(mask.astype(float), mask) == 1.0
    assert auc(np.zeros((6, 6)), mask) == 0.0


def test_ciou_class_single_class_reduces_to_ciou():
    masks = np.zeros((3, 8, 8), dtype=bool)
    masks[1, 2:6, 2:6] = True
    gt = GroundTruthMask(masks=masks, theta=np.array([0, 1, 0]))
    heat = RNG.random((8, 8))
    got = ciou_class({1: heat}, gt, 0.4)
    assert np.isclose(got, ciou(heat, masks[1], 0.4))


def test_ciou_class_averages_over_sounding_only():
    masks = np.zeros((3, 8, 8), dtype=bool)
    masks[0, :4, :4] = True
    masks[2, 4:, 4:] = True
    gt = GroundTruthMask(masks=masks, theta=np.array([1, 0, 1]))
    maps = {0: masks[0].astype(float), 2: np.zeros((8, 8))}
    # class 0 perfect (IoU 1), class 2 misses completely (IoU 0) -> mean 0.5
    assert np.isclose(ciou_class(maps, gt, 0.5), 0.5)


def test_ciou_class_matches_brute_force():
    for _ in range(20):
        c = 4
        masks = np.zeros((c, 6, 6), dtype=bool)
        theta = np.zeros(c, dtype=np.uint8)
        for cls in range(c):
            if RNG.random() < 0.6:
                y, x = RNG.integers(0, 4, size=2)
                masks[cls, y:y + 2, x:x + 2] = True
                theta[cls] = 1
        if not theta.any():
            masks[0, :2, :2] = True
            theta[0] = 1
        gt = GroundTruthMask(masks=masks, theta=theta)
        maps = {cls: RNG.random((6, 6)) for cls in range(c)}
        want = np.mean([ciou(maps[cls], masks[cls], 0.3)
                        for cls in range(c) if theta[cls]])
        assert np.isclose(ciou_class(maps, gt, 0.3), want, atol=1e-12)


def test_ciou_class_permutation_invariant():
    masks = np.zeros((3, 6, 6), dtype=bool)
    masks[0, :3, :3] = True
    masks[1, 3:, 3:] = True
    gt = GroundTruthMask(masks=masks, theta=np.array([1, 1, 0]))
    maps = {0: RNG.random((6, 6)), 1: RNG.random((6, 6))}
    a = ciou_class(maps, gt, 0.5)
    perm = np.array([1, 0, 2])
    gt_p = GroundTruthMask(masks=masks[perm], theta=gt.theta[perm])
    maps_p = {0: maps[1], 1: maps[0]}
    assert np.isclose(a, ciou_class(maps_p, gt_p, 0.5), atol=1e-12)


def test_ciou_class_requires_a_sounding_class():
    gt = GroundTruthMask(masks=np.zeros((2, 4, 4), dtype=bool), theta=np.array([0, 0]))
    with pytest.raises(ValueError):
        ciou_class({0: np.zeros((4, 4))}, gt, 0.5)


def test_ground_truth_mask_consistency_enforced():
    with pytest.raises(ValueError):
        GroundTruthMask(masks=np.zeros((2, 4, 4), dtype=bool), theta=np.array([1, 0]))
    m = np.zeros((2, 4, 4), dtype=bool)
    m[0, 1, 1] = True
    with pytest.raises(ValueError):
        GroundTruthMask(masks=m, theta=np.array([0, 0]))


def test_ground_truth_from_record_rasterizes_sounding_boxes():
    rec = _record(1, [(2, 1, 1, 3, 4, 1), (4, 5, 5, 2, 2, 0)],
                  y_a=[0, 0, 1, 0, 0, 0], y_v=[0, 0, 1, 0, 1, 0])
    gt = ground_truth_from_record(rec, 6, (8, 8))
    want = np.zeros((8, 8), dtype=bool)
    want[1:4, 1:5] = True
    assert np.array_equal(gt.masks[2], want)
    assert not gt.masks[4].any()          # visible but silent: no mask
    assert gt.sounding_classes() == (2,)
    assert np.array_equal(gt.union, want)


def test_union_is_elementwise_or():
    rec = _record(2, [(0, 0, 0, 2, 2, 1), (1, 4, 4, 2, 2, 1)])
    gt = ground_truth_from_record(rec, 6, (8, 8))
    assert np.array_equal(gt.union, gt.masks[0] | gt.masks[1])


def test_split_by_level_groups_and_sorts():
    recs = [_record(2, [], rid=0), _record(1, [], rid=1), _record(2, [], rid=2),
            _record(3, [], rid=3)]
    got = split_by_level(recs)
    assert list(got) == [1, 2, 3]
    assert [r.id for r in got[2]] == [0, 2]


def test_default_level_taus():
    assert DEFAULT_LEVEL_TAU == {1: 0.5, 2: 0.5, 3: 0.3}


def _report():
    return EvalReport(method="ours",
                      levels={1: LevelScores(0.5, 0.4, 0.3, 10, 0.5),
                              2: LevelScores(0.2, 0.3, 0.1, 7, 0.5)},
                      class_agnostic=False, meta={"tau_cls": 0.5})


def test_report_json_round_trip():
    rep = _report()
    back = EvalReport.from_json(rep.to_json())
    assert back.method == "ours"
    assert back.levels[1].ciou == 0.5 and back.levels[2].count == 7
    assert back.total_count == 17
    assert back.meta["tau_cls"] == 0.5
    assert json.loads(rep.to_json())["schema_version"] == 1


def test_report_rejects_bad_method_and_range():
    with pytest.raises(ValueError):
        EvalReport(method="sota", levels={}, class_agnostic=False)
    with pytest.raises(ValueError):
        EvalReport(method="ours", levels={1: LevelScores(1.5, 0, 0, 1, 0.5)},
                   class_agnostic=False)


def test_report_rejects_unknown_schema():
    doc = json.loads(_report().to_json())
    doc["schema_version"] = 99
    with pytest.raises(ValueError):
        EvalReport.from_json(json.dumps(doc))


def test_format_report_table():
    text = format_report(_report())
    assert "method=ours" in text
    assert "cIoU_class" in text
    assert "0.5000" in text


@pytest.fixture(scope="module")
def tiny_eval_setup(tmp_path_factory):
    cfg = RunConfig()
    cfg = apply_assignments(cfg, ["scene.seed=5", "n_train=4", "n_test=6"])
    root = tmp_path_factory.mktemp("eval_ds")
    compose_dataset(cfg.scene, cfg.n_train, cfg.n_test, str(root))
    data = load_dataset(str(root))
    model = build_model(6, cfg.encoder, cfg.alignment, seed=0)
    return model, data


@pytest.mark.parametrize("method", ["avc", "multitask", "ours"])
def test_evaluate_method_smoke(tiny_eval_setup, method):
    model, data = tiny_eval_setup
    rep = evaluate_method(model, data, method)
    assert rep.method == method
    assert rep.class_agnostic == (method == "avc")
    assert rep.total_count == 6
    assert rep.meta["n_test"] == 6
    for lvl, s in rep.levels.items():
        assert s.tau == DEFAULT_LEVEL_TAU[lvl]
        for v in (s.ciou, s.auc, s.ciou_class):
            assert 0.0 <= v <= 1.0
    if method == "avc":
        # one agnostic map scored against the union for both columns
        for s in rep.levels.values():
            assert s.ciou == s.ciou_class


def test_evaluate_method_rejects_unknown(tiny_eval_setup):
    model, data = tiny_eval_setup
    with pytest.raises(ValueError):
        evaluate_method(model, data, "oracle")
