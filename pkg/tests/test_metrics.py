"""Metric oracles: IoU, polyline sampling, Chamfer distances, AP, reports."""
import numpy as np
import pytest

from bevmap.geometry import BevConfig
from bevmap.maps import CLASS_NAMES, Polyline, VectorMap, polyline_cells
from bevmap.metrics import (
    average_precision,
    chamfer,
    chamfer_directed,
    class_masks,
    evaluate,
    iou,
    sample_polyline,
)
from bevmap.numerics import Grid2D


class TestIou:
    def test_identical_and_disjoint(self):
        a = np.zeros((4, 4, 1)); a[1, 1, 0] = 1.0
        b = np.zeros((4, 4, 1)); b[2, 2, 0] = 1.0
        assert iou(Grid2D(a), Grid2D(a))[0] == 1.0
        assert iou(Grid2D(a), Grid2D(b))[0] == 0.0

    def test_empty_conventions(self):
        z = Grid2D(np.zeros((3, 3, 1)))
        nz = np.zeros((3, 3, 1)); nz[0, 0, 0] = 1.0
        assert iou(z, z)[0] == 1.0
        assert iou(Grid2D(nz), z)[0] == 0.0
        assert iou(z, Grid2D(nz))[0] == 0.0

    def test_matches_cell_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = (rng.uniform(size=(16, 16, 3)) < 0.3).astype(float)
            g = (rng.uniform(size=(16, 16, 3)) < 0.3).astype(float)
            got = iou(Grid2D(p), Grid2D(g))
            for ch in range(3):
                ps = {(r, c) for r, c in zip(*np.nonzero(p[:, :, ch]))}
                gs = {(r, c) for r, c in zip(*np.nonzero(g[:, :, ch]))}
                want = len(ps & gs) / len(ps | gs) if (ps | gs) else 1.0
                assert got[ch] == pytest.approx(want, abs=1e-12)

    def test_symmetric_and_permutation_invariant(self):
        rng = np.random.default_rng(1)
        p = (rng.uniform(size=(8, 8, 2)) < 0.4).astype(float)
        g = (rng.uniform(size=(8, 8, 2)) < 0.4).astype(float)
        assert np.array_equal(iou(Grid2D(p), Grid2D(g)), iou(Grid2D(g), Grid2D(p)))
        pr = rng.permutation(8)
        pc = rng.permutation(8)
        a = iou(Grid2D(p), Grid2D(g))
        b = iou(Grid2D(p[pr][:, pc]), Grid2D(g[pr][:, pc]))
        assert np.array_equal(a, b)

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            iou(Grid2D(np.full((2, 2, 1), 0.5)), Grid2D(np.zeros((2, 2, 1))))


class TestSamplePolyline:
    def test_segment_of_length_spacing_is_two_endpoints(self):
        p = Polyline("divider", [[0.0, 0.0], [0.0, 2.0]])
        got = sample_polyline(p, 2.0)
        assert got.shape == (2, 2)
        assert np.allclose(got, [[0, 0], [0, 2]])

    def test_one_meter_at_quarter_spacing(self):
        p = Polyline("divider", [[0.0, 0.0], [1.0, 0.0]])
        got = sample_polyline(p, 0.25)
        assert got.shape == (5, 2)
        assert np.allclose(got[:, 0], [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_gaps_never_exceed_spacing(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            pts = rng.uniform(-5, 5, size=(rng.integers(2, 7), 2))
            while np.any(np.all(pts[1:] == pts[:-1], axis=1)):
                pts = rng.uniform(-5, 5, size=(len(pts), 2))
            p = Polyline("boundary", pts)
            spacing = float(rng.uniform(0.1, 2.0))
            got = sample_polyline(p, spacing)
            gaps = np.linalg.norm(np.diff(got, axis=0), axis=1)
            assert np.all(gaps <= spacing + 1e-9)
            assert np.allclose(got[0], pts[0])
            assert np.allclose(got[-1], pts[-1])

    def test_rejects_nonpositive_spacing(self):
        p = Polyline("divider", [[0, 0], [1, 0]])
        with pytest.raises(ValueError):
            sample_polyline(p, 0.0)


class TestChamfer:
    def test_identical_sets_zero(self):
        a = np.array([[0.0, 0.0], [1.0, 2.0]])
        assert chamfer_directed(a, a, 99.0) == 0.0
        r = chamfer(a, a, 99.0)
        assert r.sum == 0.0 and r.average == 0.0

    def test_three_four_five(self):
        a = np.array([[0.0, 0.0]])
        b = np.array([[3.0, 4.0]])
        assert chamfer_directed(a, b, 99.0) == pytest.approx(5.0, abs=1e-12)
        r = chamfer(a, b, 99.0)
        assert r.sum == pytest.approx(10.0, abs=1e-12)
        assert r.average == pytest.approx(5.0, abs=1e-12)

    def test_directed_is_asymmetric(self):
        a = np.array([[0.0, 0.0], [10.0, 0.0]])
        b = np.array([[0.0, 0.0]])
        assert chamfer_directed(a, b, 99.0) == pytest.approx(5.0)
        assert chamfer_directed(b, a, 99.0) == 0.0

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            a = rng.uniform(-10, 10, size=(rng.integers(1, 25), 2))
            b = rng.uniform(-10, 10, size=(rng.integers(1, 25), 2))
            want = np.mean([min(np.hypot(*(p - q)) for q in b) for p in a])
            assert chamfer_directed(a, b, 99.0) == pytest.approx(want, abs=1e-12)
            r = chamfer(a, b, 99.0)
            assert r.sum == pytest.approx(
                chamfer_directed(a, b, 99.0) + chamfer_directed(b, a, 99.0), abs=1e-15)

    def test_empty_side_uses_cap(self):
        a = np.zeros((0, 2))
        b = np.array([[1.0, 1.0]])
        assert chamfer_directed(a, b, 42.0) == 42.0
        assert chamfer_directed(b, a, 42.0) == 42.0


def _line(name, y, x0=0.0, x1=4.0, conf=1.0):
    return Polyline(name, [[x0, y], [x1, y]], conf)


class TestAveragePrecision:
    def test_perfect_single_prediction(self):
        gt = [_line("divider", 0.0)]
        pred = [_line("divider", 0.0, conf=0.9)]
        assert average_precision(pred, gt, 0.5, 0.25) == 1.0

    def test_no_predictions(self):
        assert average_precision([], [_line("divider", 0.0)], 0.5, 0.25) == 0.0

    def test_no_ground_truth(self):
        assert average_precision([_line("divider", 0.0)], [], 0.5, 0.25) == 0.0

    def test_hand_enumerated_pr_curve(self):
        # confidence order: TP, FP, TP against 2 GTs
        # precision/recall walk: (1.0, 0.5), (0.5, 0.5), (0.667, 1.0)
        # interpolated AP = (5 * 1.0 + 5 * 2/3) / 10
        gts = [_line("divider", 0.0), _line("divider", 5.0)]
        preds = [
            _line("divider", 0.05, conf=0.9),
            _line("divider", 2.5, conf=0.8),
            _line("divider", 5.05, conf=0.7),
        ]
        got = average_precision(preds, gts, 0.5, 0.25)
        assert got == pytest.approx((5 * 1.0 + 5 * (2.0 / 3.0)) / 10.0, abs=1e-12)

    def test_confidence_scaling_leaves_ap_unchanged(self):
        rng = np.random.default_rng(4)
        gts = [_line("divider", float(y)) for y in range(3)]
        preds = [_line("divider", float(y) + rng.uniform(-0.4, 0.4), conf=float(c))
                 for y, c in zip(range(3), rng.uniform(0.1, 1.0, 3))]
        base = average_precision(preds, gts, 0.5, 0.25)
        scaled = [Polyline(p.class_name, p.points, p.confidence * 7.5) for p in preds]
        assert average_precision(scaled, gts, 0.5, 0.25) == base

    def test_monotonic_in_threshold(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            gts = [_line("divider", float(y)) for y in range(rng.integers(1, 5))]
            preds = [
                _line("divider", float(rng.uniform(-1, 5)), conf=float(rng.uniform()))
                for _ in range(rng.integers(0, 6))
            ]
            a = average_precision(preds, gts, 0.2, 0.25)
            b = average_precision(preds, gts, 0.5, 0.25)
            c = average_precision(preds, gts, 1.0, 0.25)
            assert a <= b <= c

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            average_precision([], [_line("divider", 0.0)], 0.0, 0.25)


class TestClassMasks:
    def test_matches_direct_rasterization(self):
        bev = BevConfig(0.0, 6.0, 0.0, 6.0, 1.0)
        vm = VectorMap(bev, [
            _line("divider", 1.5, 0.5, 4.5),
            _line("boundary", 1.5, 0.5, 4.5),  # same cells, different channel
        ])
        masks = class_masks(vm, bev, thickness=1)
        want = np.zeros((6, 6))
        for r, c in polyline_cells(vm.elements[0], bev, 1):
            want[r, c] = 1.0
        assert np.array_equal(masks.data[:, :, 0], want)
        assert np.array_equal(masks.data[:, :, 2], want)
        assert np.all(masks.data[:, :, 1] == 0.0)


class TestEvaluate:
    def _fixture(self):
        bev = BevConfig(0.0, 8.0, -4.0, 4.0, 0.5)
        gt = VectorMap(bev, [
            _line("divider", 0.0, 0.5, 7.5),
            _line("boundary", -3.0, 0.5, 7.5),
            _line("boundary", 3.0, 0.5, 7.5),
            Polyline("ped_crossing", [[4.0, -3.0], [4.0, 3.0]]),
        ])
        return bev, gt

    def test_perfect_prediction_scores_perfect(self):
        bev, gt = self._fixture()
        masks = class_masks(gt, bev)
        report = evaluate(gt, gt, masks, masks)
        for m in list(report.classes.values()) + [report.all_classes]:
            assert m.iou == 1.0
            assert m.cd_p == 0.0 and m.cd_l == 0.0
            assert m.cd_sum == 0.0 and m.cd_avg == 0.0
            assert all(v == 1.0 for v in m.ap.values())
            assert m.mean_ap == 1.0

    def test_empty_prediction_flagged_and_capped(self):
        bev, gt = self._fixture()
        pred = VectorMap(bev, [])
        masks_gt = class_masks(gt, bev)
        masks_pred = Grid2D(np.zeros_like(masks_gt.data))
        report = evaluate(pred, gt, masks_pred, masks_gt)
        for name in CLASS_NAMES:
            m = report.classes[name]
            assert m.iou == 0.0
            assert m.cd_p == pytest.approx(bev.diagonal)
            assert all(v == 0.0 for v in m.ap.values())
            assert any("empty prediction" in f for f in m.flags)

    def test_shifted_divider_ap_steps_at_thresholds(self):
        bev = BevConfig(0.0, 8.0, -4.0, 4.0, 0.5)
        gt = VectorMap(bev, [_line("divider", 0.0, 0.5, 7.5)])
        pred = VectorMap(bev, [_line("divider", 0.3, 0.5, 7.5, conf=0.9)])
        masks_gt = class_masks(gt, bev)
        masks_pred = class_masks(pred, bev)
        report = evaluate(pred, gt, masks_pred, masks_gt)
        m = report.classes["divider"]
        # parallel lines 0.3 m apart: bidirectional-average CD is 0.3
        assert m.ap[0.2] == 0.0
        assert m.ap[0.5] == 1.0
        assert m.ap[1.0] == 1.0

    def test_all_row_is_unweighted_class_mean(self):
        bev, gt = self._fixture()
        masks = class_masks(gt, bev)
        report = evaluate(gt, gt, masks, masks)
        rows = list(report.classes.values())
        assert report.all_classes.iou == pytest.approx(np.mean([m.iou for m in rows]))
        assert report.all_classes.mean_ap == pytest.approx(
            np.mean([m.mean_ap for m in rows]))

    def test_mismatched_bev_rejected(self):
        bev, gt = self._fixture()
        other = VectorMap(BevConfig(0.0, 4.0, -4.0, 4.0, 0.5), [])
        masks = class_masks(gt, bev)
        with pytest.raises(ValueError):
            evaluate(other, gt, masks, masks)

    def test_report_serialization(self):
        bev, gt = self._fixture()
        masks = class_masks(gt, bev)
        report = evaluate(gt, gt, masks, masks)
        doc = report.to_json_dict()
        assert set(doc["classes"]) == set(CLASS_NAMES)
        assert doc["classes"]["divider"]["iou"] == 1.0
        assert doc["all"]["map"] == 1.0
        txt = report.to_text()
        assert "IoU" in txt and "mAP" in txt and "divider" in txt
