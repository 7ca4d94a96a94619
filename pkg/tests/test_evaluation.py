import itertools

import numpy as np
import pytest

from conftest import toy_world, TOY_RENDER
from s2tpv.errors import DimensionError, RangeError
from s2tpv.evaluation import (
    ConfusionMatrix, EvalReport, ablate_temporal_range, confusion, emit_heatmap, evaluate, gain_vs_count, miou,
    read_pgm, read_prediction, sop_mask, write_ablation_csv, write_gain_csv, write_prediction,
)
from s2tpv.oracles import iou_sets
from s2tpv.synthetic import SceneDataset


def counting_confusion(pred, gt, k, mask=None):
    cm = np.zeros((k, k), dtype=np.int64)
    pred, gt = np.ravel(pred), np.ravel(gt)
    keep = np.ones(len(gt), bool) if mask is None else np.ravel(mask)
    for p, g, m in zip(pred, gt, keep):
        if m:
            cm[g][p] += 1
    return cm


class TestConfusion:
    def test_identity_is_diagonal(self):
        x = np.array([[0, 1], [2, 2]])
        np.testing.assert_array_equal(confusion(x, x, 3).counts, np.diag([1, 1, 2]))

    def test_constant_prediction_single_column(self):
        gt = np.array([0, 1, 2, 1])
        cm = confusion(np.zeros(4, int), gt, 3).counts
        assert (cm[:, 1:] == 0).all() and cm[:, 0].sum() == 4

    @pytest.mark.parametrize("seed", range(5))
    def test_counting_oracle(self, seed):
        rng = np.random.default_rng(seed)
        gt, pred = rng.integers(0, 4, size=(10, 10, 2)), rng.integers(0, 4, size=(10, 10, 2))
        mask = rng.random((10, 10, 2)) < 0.6
        cm = confusion(pred, gt, 4, mask)
        np.testing.assert_array_equal(cm.counts, counting_confusion(pred, gt, 4, mask))
        assert cm.total == mask.sum()

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            confusion(np.zeros(3, int), np.zeros(4, int), 2)

    def test_label_out_of_range(self):
        with pytest.raises(RangeError):
            confusion(np.array([0, 5]), np.array([0, 1]), 2)

    def test_sop_mask(self):
        gt = np.array([2, 2, 0, 1])
        pred = np.array([2, 0, 2, 2])
        np.testing.assert_array_equal(sop_mask(gt, pred, 2), [False, True, True, True])


class TestMiou:
    def test_hand_matrix(self):
        iou, mean = miou(ConfusionMatrix(np.array([[1, 1], [1, 1]])), [0, 1])
        np.testing.assert_allclose(iou, [1 / 3, 1 / 3])
        assert mean == pytest.approx(1 / 3)

    def test_perfect(self):
        x = np.array([0, 1, 2, 2, 1])
        iou, mean = miou(confusion(x, x, 3), [0, 1, 2])
        assert mean == 1.0 and (iou == 1.0).all()

    def test_disjoint_class_is_zero(self):
        iou, _ = miou(confusion(np.array([1, 1]), np.array([0, 0]), 2), [0, 1])
        np.testing.assert_array_equal(iou, [0.0, 0.0])

    def test_absent_class_excluded(self):
        iou, mean = miou(confusion(np.array([0, 0]), np.array([0, 0]), 3), [0, 1, 2])
        assert np.isnan(iou[1]) and mean == 1.0

    def test_empty_inclusion(self):
        with pytest.raises(ValueError):
            miou(ConfusionMatrix.zeros(2), [])

    def test_exhaustive_against_sets(self):
        """Every pair of 3-class labelings on a 2x2x2 grid would be 3^16; sweep all gt with sampled preds."""
        rng = np.random.default_rng(0)
        for gt in itertools.islice(itertools.product(range(3), repeat=8), 0, None, 7):
            gt = np.array(gt).reshape(2, 2, 2)
            pred = rng.integers(0, 3, size=(2, 2, 2))
            iou, _ = miou(confusion(pred, gt, 3), [0, 1, 2])
            for c in range(3):
                ref = iou_sets(pred, gt, c)
                assert (np.isnan(iou[c]) and ref is None) or iou[c] == pytest.approx(ref, abs=1e-15)


class TestReports:
    def report(self):
        cm = ConfusionMatrix(np.array([[3, 1, 0], [0, 2, 1], [1, 0, 0]]))
        iou, mean = miou(cm, [0, 1])
        return EvalReport(iou, mean, cm, np.array([10, 5]), class_names=("a", "b"), meta={"m": 1})

    def test_write_read(self, tmp_path):
        rep = self.report()
        rep.write(tmp_path)
        back = EvalReport.read(tmp_path)
        np.testing.assert_array_equal(back.confusion.counts, rep.confusion.counts)
        assert back.miou == rep.miou
        assert (tmp_path / "per_class.csv").read_text().splitlines()[0] == "class_id,class,iou,gt_points"

    def test_gain_rows(self, tmp_path):
        base = self.report()
        better = EvalReport(base.iou + 0.1, base.miou + 0.1, base.confusion, base.gt_counts)
        rows = gain_vs_count(base, better, ("a", "b"))
        assert [r[0] for r in rows] == ["a", "b"]
        assert rows[0][2] == pytest.approx(1.0) and rows[0][3] == pytest.approx(0.1)
        write_gain_csv(tmp_path / "g.csv", rows)
        assert (tmp_path / "g.csv").read_text().count("\n") == 3


class TestHeatmap:
    def test_constant_plane_uniform(self, tmp_path):
        img = emit_heatmap(np.ones((3, 4, 2)), tmp_path / "c.pgm")
        assert (img == img.flat[0]).all()

    def test_hot_cell(self, tmp_path):
        plane = np.zeros((5, 5, 3))
        plane[2, 3] = [1.0, -2.0, 0.5]
        img = emit_heatmap(plane, tmp_path / "h.pgm")
        assert img[2, 3] == 255 and (np.delete(img.ravel(), 2 * 5 + 3) == 0).all()

    def test_read_back(self, tmp_path):
        yy, xx = np.mgrid[0:6, 0:9]
        field = np.stack([np.sin(yy / 2.0) + 2, xx / 9.0], axis=-1)
        emit_heatmap(field, tmp_path / "f.pgm")
        back = read_pgm(tmp_path / "f.pgm").astype(np.float64)
        norms = np.linalg.norm(field, axis=-1)
        expect = (norms - norms.min()) / (norms.max() - norms.min()) * 255
        assert np.abs(back - expect).max() <= 0.5 + 1e-9

    def test_unwritable(self, tmp_path):
        with pytest.raises(OSError):
            emit_heatmap(np.ones((2, 2, 1)), tmp_path / "missing" / "x.pgm")


class TestPredictionDump:
    def test_round_trip(self, tmp_path):
        labels = np.random.default_rng(0).integers(0, 9, size=(4, 3, 2))
        write_prediction(tmp_path / "p.bin", labels, 9)
        back, k = read_prediction(tmp_path / "p.bin")
        assert k == 9
        np.testing.assert_array_equal(back, labels)
        assert (tmp_path / "p.bin").read_bytes().startswith(b"S2TPVGRID")

    def test_rejects_bad_labels(self, tmp_path):
        with pytest.raises(RangeError):
            write_prediction(tmp_path / "p.bin", np.full((1, 1, 1), 9), 9)


class TestHarness:
    @pytest.fixture
    def dataset(self):
        return SceneDataset([toy_world(seed=s, n_frames=3) for s in range(2)], TOY_RENDER)

    def test_m0_sweep_equals_plain_eval(self, toy_model, dataset):
        model = toy_model()
        [(m, rep)] = ablate_temporal_range(model, dataset, [0])
        plain = evaluate(model, dataset, 0)
        assert m == 0
        np.testing.assert_array_equal(rep.confusion.counts, plain.confusion.counts)

    def test_too_long_history(self, toy_model, dataset):
        with pytest.raises(RangeError):
            ablate_temporal_range(toy_model(), dataset, [0, 3])

    def test_static_world_flat_curve(self, toy_model):
        world = toy_world(n_frames=4)
        world.trajectory = [(float(k), 0.0, 0.0, 0.0) for k in range(4)]
        ds = SceneDataset([world], TOY_RENDER)
        rows = ablate_temporal_range(toy_model(), ds, [1, 2, 3])
        ref = rows[0][1].miou
        assert all(abs(rep.miou - ref) < 1e-9 for _, rep in rows)

    def test_csv_shape(self, toy_model, dataset, tmp_path):
        rows = ablate_temporal_range(toy_model(), dataset, [0, 1, 2])
        write_ablation_csv(tmp_path / "a.csv", rows)
        lines = (tmp_path / "a.csv").read_text().splitlines()
        assert lines[0].startswith("m,miou,iou_drivable") and len(lines) == 4

    def test_score_empty_includes_empty(self, toy_model, dataset):
        rep = evaluate(toy_model(), dataset, 1, score_empty=True)
        assert rep.confusion.total == 2 * 4 * 4 * 2
