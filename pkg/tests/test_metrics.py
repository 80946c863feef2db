"""Entropy/MI/VIF identities and the hand-traced mAP cases."""

import numpy as np
import pytest

from fusedet import metrics as met


def _uniform_256() -> np.ndarray:
    """16x16 image hitting each of the 256 levels exactly once."""
    return (np.arange(256, dtype=np.float64) / 255.0).reshape(16, 16)


class TestEntropy:
    def test_constant_image_is_zero(self):
        assert met.entropy_en(np.full((8, 8), 0.37)) == 0.0

    def test_exact_uniform_is_eight_bits(self):
        assert met.entropy_en(_uniform_256()) == pytest.approx(8.0, abs=1e-9)

    def test_two_equal_levels_is_one_bit(self):
        img = np.zeros((4, 4))
        img[:, 2:] = 1.0
        assert met.entropy_en(img) == pytest.approx(1.0, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(8, 8))
        perm = rng.permutation(64)
        assert met.entropy_en(img) == pytest.approx(
            met.entropy_en(img.reshape(-1)[perm].reshape(8, 8)), abs=1e-12
        )

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            met.entropy_en(np.zeros((0, 4)))


class TestMutualInformation:
    def test_identity_channel_gives_twice_entropy(self):
        img = _uniform_256()
        assert met.mutual_information(img, img, img) == pytest.approx(
            2.0 * met.entropy_en(img), abs=1e-9
        )

    def test_symmetry_of_pair_term(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(16, 16))
        b = rng.uniform(size=(16, 16))
        assert met._mi_pair(a, b) == pytest.approx(met._mi_pair(b, a), abs=1e-12)

    def test_independent_noise_is_near_zero(self):
        # 16-level quantized noise keeps the plug-in estimator bias far below 0.05 bits
        rng = np.random.default_rng(2)
        size = (256, 256)
        u = np.floor(rng.uniform(size=size) * 16) / 16.0
        x = np.floor(rng.uniform(size=size) * 16) / 16.0
        y = np.floor(rng.uniform(size=size) * 16) / 16.0
        assert met.mutual_information(u, x, y) < 0.05

    def test_bounded_by_marginal_entropies(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            x = rng.uniform(size=(12, 12))
            u = np.clip(x + rng.normal(size=(12, 12)) * 0.1, 0, 1)
            mi = met._mi_pair(x, u)
            assert mi <= min(met.entropy_en(x), met.entropy_en(u)) + 1e-9
            assert mi >= -1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shapes"):
            met.mutual_information(np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((5, 5)))


class TestVif:
    def test_identity_is_exactly_two(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(size=(64, 64))
        assert met.vif_fusion(x, x, x) == pytest.approx(2.0, abs=1e-9)

    def test_independent_noise_has_negligible_fidelity(self):
        rng = np.random.default_rng(5)
        # natural-ish texture: smoothed noise
        base = rng.uniform(size=(72, 72))
        texture = base
        for _ in range(2):
            texture = (texture + np.roll(texture, 1, 0) + np.roll(texture, 1, 1)) / 3.0
        x = (texture - texture.min()) / (texture.max() - texture.min())
        u = rng.uniform(size=(72, 72))
        assert met._vif_single(x, u) < 0.05

    def test_contrast_amplification_exceeds_one(self):
        rng = np.random.default_rng(6)
        base = rng.uniform(size=(64, 64))
        smooth = base
        for _ in range(2):
            smooth = (smooth + np.roll(smooth, 1, 0) + np.roll(smooth, 1, 1)) / 3.0
        x = 0.2 + 0.5 * (smooth - smooth.min()) / (smooth.max() - smooth.min())
        u = np.clip(1.2 * x, 0.0, 1.0)
        assert met._vif_single(x, u) > 1.0

    def test_too_small_image_rejected(self):
        with pytest.raises(ValueError, match="too small"):
            met.vif_fusion(np.zeros((12, 12)), np.zeros((12, 12)), np.zeros((12, 12)))


class TestIou:
    def test_identical_boxes(self):
        assert met.iou([0.5, 0.5, 0.2, 0.2], [0.5, 0.5, 0.2, 0.2]) == 1.0

    def test_disjoint_boxes(self):
        assert met.iou([0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]) == 0.0

    def test_half_overlapping_unit_squares(self):
        # unit squares offset by half a side: intersection 0.5, union 1.5
        a = [0.0, 0.0, 1.0, 1.0]
        b = [0.5, 0.0, 1.0, 1.0]
        assert met.iou(a, b) == pytest.approx(1.0 / 3.0)


class TestMapEval:
    def test_perfect_detector(self):
        gt = [np.array([[0.5, 0.5, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1]])]
        preds = [(gt[0].copy(), np.array([1.0, 1.0]))]
        ev = met.map_eval(preds, gt)
        assert ev.map5095 == pytest.approx(1.0)
        assert all(v == pytest.approx(1.0) for v in ev.ap_per_threshold.values())

    def test_zero_predictions(self):
        gt = [np.array([[0.5, 0.5, 0.2, 0.2]])]
        ev = met.map_eval([(np.zeros((0, 4)), np.zeros(0))], gt)
        assert ev.map5095 == 0.0

    def test_hand_traced_two_prediction_case(self):
        """One GT; a 0.6-IoU hit at score 0.9 and a 0.3-IoU miss at score 0.8."""
        gt_box = np.array([0.5, 0.5, 0.4, 0.4])
        # same-size box shifted to land at the target IoU
        def shifted(target_iou):
            lo, hi = 0.0, gt_box[2]
            for _ in range(60):
                mid = (lo + hi) / 2
                b = gt_box + np.array([mid, 0, 0, 0])
                if met.iou(gt_box, b) > target_iou:
                    lo = mid
                else:
                    hi = mid
            return gt_box + np.array([(lo + hi) / 2, 0, 0, 0])

        p1 = shifted(0.6)
        p2 = shifted(0.3)
        assert met.iou(gt_box, p1) == pytest.approx(0.6, abs=1e-6)
        assert met.iou(gt_box, p2) == pytest.approx(0.3, abs=1e-6)
        ev = met.map_eval(
            [(np.stack([p1, p2]), np.array([0.9, 0.8]))], [gt_box.reshape(1, 4)]
        )
        assert ev.ap_per_threshold[0.50] == pytest.approx(1.0)
        assert ev.ap_per_threshold[0.75] == pytest.approx(0.0)

    def test_thresholds_are_the_ten_coco_points(self):
        assert met.IOU_THRESHOLDS == tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
        assert len(met.IOU_THRESHOLDS) == 10

    def test_map5095_is_mean_of_threshold_aps(self):
        rng = np.random.default_rng(7)
        gt = [rng.uniform(0.3, 0.7, size=(2, 4)) * [1, 1, 0.3, 0.3] + [0, 0, 0.1, 0.1]]
        preds = [(gt[0] + rng.normal(size=(2, 4)) * 0.02, np.array([0.9, 0.8]))]
        ev = met.map_eval(preds, gt)
        assert ev.map5095 == pytest.approx(np.mean(list(ev.ap_per_threshold.values())))

    def test_adding_correct_prediction_never_decreases_ap(self):
        rng = np.random.default_rng(8)
        gt = [np.array([[0.5, 0.5, 0.2, 0.2], [0.25, 0.25, 0.15, 0.15]])]
        base_pred = (gt[0][:1].copy(), np.array([0.9]))
        more_pred = (gt[0].copy(), np.array([0.9, 0.85]))
        ev1 = met.map_eval([base_pred], gt)
        ev2 = met.map_eval([more_pred], gt)
        for thr in met.IOU_THRESHOLDS:
            assert ev2.ap_per_threshold[float(thr)] >= ev1.ap_per_threshold[float(thr)] - 1e-12

    def test_adding_lowest_score_miss_never_increases_ap(self):
        gt = [np.array([[0.5, 0.5, 0.2, 0.2]])]
        hit = (gt[0].copy(), np.array([0.9]))
        with_miss = (
            np.vstack([gt[0], [[0.05, 0.05, 0.05, 0.05]]]),
            np.array([0.9, 0.01]),
        )
        ev1 = met.map_eval([hit], gt)
        ev2 = met.map_eval([with_miss], gt)
        for thr in met.IOU_THRESHOLDS:
            assert ev2.ap_per_threshold[float(thr)] <= ev1.ap_per_threshold[float(thr)] + 1e-12

    def test_degenerate_boxes_rejected(self):
        gt = [np.array([[0.5, 0.5, 0.2, 0.2]])]
        with pytest.raises(ValueError, match="degenerate"):
            met.map_eval([(np.array([[0.5, 0.5, 0.0, 0.2]]), np.array([0.5]))], gt)

    def test_scores_outside_unit_interval_rejected(self):
        gt = [np.array([[0.5, 0.5, 0.2, 0.2]])]
        with pytest.raises(ValueError, match="scores"):
            met.map_eval([(gt[0].copy(), np.array([1.5]))], gt)


class TestReports:
    def test_write_reports_layout(self, tmp_path):
        per_scene = [{"scene-id": "s0", "en": 5.0, "mi": 2.0, "vif": 1.0, "map50": 0.5, "map5095": 0.25}]
        aggregate = {"en": 5.0, "mi": 2.0, "vif": 1.0, "map50": 0.5, "map5095": 0.25}
        jp, cp = met.write_reports(tmp_path, per_scene, aggregate)
        assert jp.exists() and cp.exists()
        lines = cp.read_text().strip().splitlines()
        assert lines[0] == "scene-id,en,mi,vif,map50,map5095"
        assert lines[-1].startswith("aggregate,")
