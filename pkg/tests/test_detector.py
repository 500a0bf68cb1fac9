from __future__ import annotations

import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fracdet import oracles
from fracdet.complexity import count_params
from fracdet.core import Tensor, make_rng
from fracdet.detector.metrics import IOU_THRESHOLDS, average_precision, evaluate_map, iou, match_detections, nms
from fracdet.detector.model import HEAD_CHANNELS, DetectorConfig, base_param_formula, build_model
from fracdet.detector.scenes import (
    export_scene, generate_dataset, generate_scene, import_scene, read_pgm, write_pgm,
)
from fracdet.detector.train import (
    TrainingDiverged, build_targets, decode, detection_loss, evaluate, gradcam, heatmap, train,
)
from fracdet.dfa import DfaParams
from fracdet.mc import McParams
from fracdet.verify import _random_instance

SMALL = DetectorConfig(widths=(4, 8, 8), dfa_mlp_hidden=8)


def first_seed(pred, start=0):
    return next(s for s in itertools.count(start) if pred(generate_scene(s)))


class TestScenes:
    def test_deterministic(self):
        a, b = generate_scene(11), generate_scene(11)
        np.testing.assert_array_equal(a.image, b.image)
        assert a.boxes == b.boxes

    def test_different_seeds_differ(self):
        assert not np.array_equal(generate_scene(1).image, generate_scene(2).image)

    def test_no_fracture_seed_has_no_boxes(self):
        s = generate_scene(first_seed(lambda sc: not sc.boxes))
        assert s.boxes == [] and s.labels == []

    def test_fracture_rate(self):
        frac = np.mean([bool(generate_scene(s).boxes) for s in range(200)])
        assert 0.7 <= frac <= 0.9

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.sampled_from([32, 48, 64]), st.sampled_from([32, 64, 80]))
    def test_invariants(self, seed, h, w):
        s = generate_scene(seed, h, w)
        assert s.image.shape == (1, h, w)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert len(s.boxes) <= 3 and len(s.labels) == len(s.boxes)
        for x0, y0, x1, y1 in s.boxes:
            assert 0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h

    def test_too_small(self):
        with pytest.raises(ValueError):
            generate_scene(0, 16, 64)

    def test_noise_level(self):
        # background pixels far from any band are 0.1 plus N(0, 0.05) noise, clipped at 0
        s = generate_scene(first_seed(lambda sc: sc.image[0].mean() < 0.3))
        bg = s.image[0][s.image[0] < 0.3]
        assert 0.03 < bg.std() < 0.07

    def test_export_round_trip(self, tmp_path):
        s = generate_scene(first_seed(lambda sc: bool(sc.boxes)))
        img_path, meta_path = export_scene(s, tmp_path, "scene-0000")
        assert img_path.read_bytes().startswith(b"P5\n64 64\n255\n")
        back = import_scene(tmp_path, "scene-0000")
        assert back.boxes == s.boxes and back.labels == s.labels and back.seed == s.seed
        np.testing.assert_allclose(back.image, s.image, atol=0.5 / 255 + 1e-12)

    def test_pgm_with_comment(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# note\n2 1\n255\n" + bytes([0, 255]))
        np.testing.assert_array_equal(read_pgm(path), [[0.0, 1.0]])

    def test_pgm_rejects_ascii(self, tmp_path):
        path = tmp_path / "a.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(ValueError):
            read_pgm(path)

    def test_write_pgm_rounds(self, tmp_path):
        write_pgm(tmp_path / "x.pgm", np.array([[0.0, 0.5, 1.0]]))
        assert (tmp_path / "x.pgm").read_bytes()[-3:] == bytes([0, 128, 255])


class TestIou:
    def test_identical(self):
        assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0

    def test_offset(self):
        np.testing.assert_allclose(iou((0, 0, 2, 2), (1, 1, 3, 3)), 1 / 7, rtol=1e-15)

    def test_disjoint(self):
        assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0

    def test_touching_edges(self):
        assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0

    @given(st.lists(st.floats(0, 50), min_size=8, max_size=8))
    def test_symmetric_and_bounded(self, v):
        a = (v[0], v[1], v[0] + v[2] + 0.1, v[1] + v[3] + 0.1)
        b = (v[4], v[5], v[4] + v[6] + 0.1, v[5] + v[7] + 0.1)
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0


class TestAveragePrecision:
    GT = (0.0, 0.0, 10.0, 10.0)

    def box_with_iou(self, target):
        # same height, shifted right so that IoU = (10 - s) / (10 + s)
        s = 10 * (1 - target) / (1 + target)
        return (s, 0.0, 10.0 + s, 10.0)

    def test_single_match(self):
        box = self.box_with_iou(0.6)
        np.testing.assert_allclose(iou(box, self.GT), 0.6, rtol=1e-12)
        assert evaluate_map([[(box, 0.9)]], [[self.GT]]).ap50 == 1.0

    def test_below_threshold(self):
        assert evaluate_map([[(self.box_with_iou(0.4), 0.9)]], [[self.GT]]).ap50 == 0.0

    def test_tp_fp_tp(self):
        g2 = (20.0, 20.0, 30.0, 30.0)
        preds = [[(self.GT, 0.9), ((40.0, 40.0, 45.0, 45.0), 0.8), (g2, 0.7)]]
        flags, n_gt = match_detections(preds, [[self.GT, g2]], 0.5)
        assert flags == [True, False, True]
        np.testing.assert_allclose(average_precision(flags, n_gt), 0.5 * 1.0 + 0.5 * (2 / 3), rtol=1e-15)

    def test_empty_convention(self):
        assert average_precision([], 0) == 1.0
        assert average_precision([False], 0) == 0.0
        assert average_precision([], 3) == 0.0
        assert evaluate_map([[]], [[]]).map == 1.0

    def test_one_to_one(self):
        preds = [[(self.GT, 0.9), (self.GT, 0.8)]]
        flags, _ = match_detections(preds, [[self.GT]], 0.5)
        assert flags == [True, False]

    def test_thresholds(self):
        assert IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)
        res = evaluate_map([[(self.box_with_iou(0.72), 0.9)]], [[self.GT]])
        expected = [1.0 if t <= 0.72 else 0.0 for t in IOU_THRESHOLDS]
        assert list(res.ap_per_threshold.values()) == expected
        np.testing.assert_allclose(res.map, 0.5)

    def test_image_count_mismatch(self):
        with pytest.raises(ValueError):
            evaluate_map([[]], [[], []])

    @pytest.mark.parametrize("seed", range(5))
    def test_enumeration_oracle(self, seed):
        rng = make_rng(seed)
        for _ in range(30):
            preds, gts = _random_instance(rng)
            for t in (0.5, 0.75):
                flags, n_gt = match_detections(preds, gts, t)
                assert abs(average_precision(flags, n_gt) - oracles.ap_by_enumeration(preds, gts, t)) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_duplicate_never_raises_ap(self, seed):
        rng = make_rng(100 + seed)
        for _ in range(30):
            preds, gts = _random_instance(rng)
            flags, n_gt = match_detections(preds, gts, 0.5)
            before = average_precision(flags, n_gt)
            ranked = sorted(((-c, i, k) for i, ps in enumerate(preds) for k, (_, c) in enumerate(ps)))
            for (negc, i, k), hit in zip(ranked, flags):
                if not hit:
                    continue
                dup = [list(p) for p in preds]
                box, conf = preds[i][k]
                dup[i].append((box, conf * 0.5))
                assert average_precision(*match_detections(dup, gts, 0.5)) <= before + 1e-15


class TestNms:
    def test_suppresses_overlap(self):
        boxes = [(0, 0, 10, 10), (1, 0, 11, 10), (20, 20, 30, 30)]
        assert nms(boxes, [0.9, 0.8, 0.7]) == [0, 2]

    def test_keeps_below_threshold(self):
        boxes = [(0, 0, 10, 10), (6, 0, 16, 10)]
        assert nms(boxes, [0.5, 0.9]) == [1, 0]


class TestModel:
    def test_base_closed_form(self):
        cfg = DetectorConfig(with_dfa=False, with_mc=False)
        assert count_params(build_model(cfg, 0)) == base_param_formula(cfg)

    def test_dfa_adds_its_count(self):
        base = DetectorConfig(with_dfa=False, with_mc=False)
        with_dfa = replace(base, with_dfa=True)
        dfa = count_params(DfaParams.init(with_dfa.dfa_config(), make_rng(0)))
        assert with_dfa.dfa_config().channels == 32
        assert count_params(build_model(with_dfa, 0)) - count_params(build_model(base, 0)) == dfa

    def test_mc_adds_its_count(self):
        base = DetectorConfig(with_dfa=False, with_mc=False)
        with_mc = replace(base, with_mc=True)
        mc = count_params(McParams.init(with_mc.mc_config(), make_rng(0)))
        assert count_params(build_model(with_mc, 0)) - count_params(build_model(base, 0)) == mc

    def test_residual_identity_at_init(self):
        x = Tensor(generate_scene(3).image[None])
        a = build_model(replace(SMALL, with_dfa=True, with_mc=False), 4)(x).data
        b = build_model(replace(SMALL, with_dfa=False, with_mc=False), 4)(x).data
        np.testing.assert_array_equal(a, b)

    def test_toggles_share_backbone(self):
        a = build_model(DetectorConfig(), 9)
        b = build_model(DetectorConfig(with_dfa=False, with_mc=False), 9)
        np.testing.assert_array_equal(a.backbone[0].down_w.data, b.backbone[0].down_w.data)
        np.testing.assert_array_equal(a.head_w.data, b.head_w.data)

    def test_output_shape(self):
        out = build_model(SMALL, 0)(Tensor(np.zeros((2, 1, 64, 48))))
        assert out.shape == (2, HEAD_CHANNELS, 8, 6)
        assert SMALL.stride == 8

    def test_invalid_widths(self):
        with pytest.raises(ValueError):
            DetectorConfig(widths=(8, 0))


class TestTargets:
    def test_centre_cell_and_offsets(self):
        s = generate_scene(first_seed(lambda sc: len(sc.boxes) == 1))
        obj, off, pos = build_targets([s], 8)
        (gy, gx), = zip(*np.nonzero(obj[0]))
        x0, y0, x1, y1 = s.boxes[0]
        assert (gx, gy) == (int((x0 + x1) / 2 // 8), int((y0 + y1) / 2 // 8))
        px, py = (gx + 0.5) * 8, (gy + 0.5) * 8
        np.testing.assert_allclose(off[0, :, gy, gx], [(px - x0) / 8, (py - y0) / 8, (x1 - px) / 8, (y1 - py) / 8])
        assert pos.sum() == 1

    def test_empty_scene_has_no_positive(self):
        s = generate_scene(first_seed(lambda sc: not sc.boxes))
        obj, _, pos = build_targets([s], 8)
        assert not obj.any() and not pos.any()

    def test_decode_recovers_target_box(self):
        s = generate_scene(first_seed(lambda sc: len(sc.boxes) == 1))
        obj, off, _ = build_targets([s], 8)
        out = np.concatenate([np.where(obj > 0, 20.0, -20.0)[:, None], off], axis=1)
        dets = decode(out, 8, (64, 64))
        assert len(dets[0]) == 1
        np.testing.assert_allclose(dets[0][0][0], s.boxes[0], atol=1e-9)
        assert 0 < dets[0][0][1] < 1

    def test_decode_applies_floor(self):
        out = np.full((1, 5, 4, 4), -10.0)
        assert decode(out, 8, (32, 32)) == [[]]

    def test_loss_is_zero_for_perfect_offsets_and_large_logits(self):
        s = generate_scene(first_seed(lambda sc: bool(sc.boxes)))
        obj, off, pos = build_targets([s], 8)
        out = np.concatenate([np.where(obj > 0, 40.0, -40.0)[:, None], off], axis=1)
        assert detection_loss(Tensor(out), obj, off, pos).item() < 1e-15


class TestTraining:
    def scenes(self, n=3):
        return generate_dataset(range(n))

    def test_zero_lr_constant_history(self):
        res = train(build_model(SMALL, 0), self.scenes(), 3, 0.0, 1, batch_size=2)
        assert len(res.history) == 3
        assert res.history == [res.initial_loss] * 3

    def test_same_seed_same_history(self):
        a = train(build_model(SMALL, 0), self.scenes(), 2, 0.003, 5, batch_size=2)
        b = train(build_model(SMALL, 0), self.scenes(), 2, 0.003, 5, batch_size=2)
        assert a.history == b.history and a.steps == b.steps == 4

    def test_loss_decreases(self):
        res = train(build_model(SMALL, 0), self.scenes(4), 5, 0.003, 2, batch_size=2)
        assert res.history[-1] < res.initial_loss

    def test_divergence_is_reported(self):
        with pytest.raises(TrainingDiverged) as info:
            train(build_model(SMALL, 0), self.scenes(2), 5, 1e6, 3, batch_size=1)
        assert len(info.value.history) < 5

    def test_epochs_must_be_positive(self):
        with pytest.raises(ValueError):
            train(build_model(SMALL, 0), self.scenes(1), 0, 0.1, 0)

    def test_evaluate_summary_keys(self):
        res = evaluate(build_model(SMALL, 0), self.scenes(2)).summary()
        assert set(res) == {"ap50", "map_50_95", "ap_per_threshold"}
        assert len(res["ap_per_threshold"]) == 10


class TestHeatmap:
    def test_zero_gradient_gives_zero_map(self):
        cam = gradcam(np.ones((4, 8, 8)), np.zeros((4, 8, 8)))
        assert cam.shape == (8, 8) and not cam.any()

    def test_constant_features_negative_weight(self):
        assert not gradcam(np.ones((2, 3, 3)), -np.ones((2, 3, 3))).any()

    @pytest.mark.parametrize("seed", range(4))
    def test_range(self, seed):
        model = build_model(SMALL, seed)
        cam = heatmap(model, make_rng(seed).uniform(size=(1, 64, 64)))
        assert cam.shape == (8, 8)
        assert cam.min() >= 0.0 and cam.max() <= 1.0
        assert cam.max() in (0.0, 1.0)

    def test_explicit_cell(self):
        model = build_model(SMALL, 1)
        cam = heatmap(model, generate_scene(2).image, (3, 4))
        assert cam.shape == (8, 8) and cam.min() >= 0.0 and cam.max() <= 1.0
