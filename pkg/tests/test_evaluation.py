import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from palseg.corruption import dilate
from palseg.datasets import generate_synthetic
from palseg.evaluation import DiceReport, binarize, dice, evaluate_model, results_table
from palseg.models import SegNetConfig, build_segnet

pairs = st.integers(2, 16).flatmap(
    lambda n: st.tuples(arrays(np.uint8, (n, n), elements=st.integers(0, 1)),
                        arrays(np.uint8, (n, n), elements=st.integers(0, 1))))


class TestBinarize:
    def test_above(self):
        assert binarize(np.full((3, 3), 0.7)).all()

    def test_tie_is_foreground(self):
        assert binarize(np.full((3, 3), 0.5)).all()
        assert binarize(torch.full((2,), 0.5)).tolist() == [1, 1]

    def test_below(self):
        assert not binarize(np.full((3, 3), 0.49)).any()

    @pytest.mark.parametrize("thr", [0.0, 1.0, 1.5])
    def test_invalid_threshold(self, thr):
        with pytest.raises(ValueError):
            binarize(np.zeros(2), thr)


class TestDice:
    def test_identity(self):
        m = np.zeros((5, 5), np.uint8)
        m[1:3, 1:4] = 1
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8)
        a[0, :] = 1
        b[3, :] = 1
        assert dice(a, b) == 0.0

    def test_hand_case(self):
        pred, gt = np.zeros((4, 4), np.uint8), np.zeros((4, 4), np.uint8)
        pred[0, 0:4] = 1
        gt[0, 2:4] = 1
        gt[1, 0:2] = 1
        assert pred.sum() == gt.sum() == 4 and (pred & gt).sum() == 2
        assert dice(pred, gt) == 0.5

    def test_both_empty(self):
        z = np.zeros((3, 3), np.uint8)
        assert dice(z, z) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((2, 2)), np.zeros((3, 3)))

    @settings(max_examples=200)
    @given(pairs)
    def test_symmetric_bounded(self, ab):
        a, b = ab
        v = dice(a, b)
        assert 0.0 <= v <= 1.0 and v == dice(b, a)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(3, 6), st.integers(3, 6), st.integers(12, 20), st.integers(12, 20))
    def test_monotone_under_dilation(self, h, w, cy, cx):
        gt = np.zeros((40, 40), np.uint8)
        gt[cy - h // 2:cy + h // 2 + 1, cx - w // 2:cx + w // 2 + 1] = 1
        scores = [dice(gt, dilate(gt, r)) for r in range(1, 8)]
        assert all(b <= a for a, b in zip(scores, scores[1:]))


class TestEvaluateModel:
    def test_untrained_in_range_and_order_invariant(self):
        d = generate_synthetic(6, 32, 2, seed=0)
        net = build_segnet(SegNetConfig(n_classes=2, depth=3, base_width=4), 0)
        rep = evaluate_model(net, d, batch_size=4)
        assert set(rep.per_class) == {"class0", "class1"}
        assert 0.0 <= rep.average <= 1.0
        assert rep.average == pytest.approx(np.mean(list(rep.per_class.values())), abs=1e-9)
        rev = evaluate_model(net, d.subset(list(range(len(d)))[::-1]), batch_size=4)
        assert rev.per_class == pytest.approx(rep.per_class, abs=1e-12)

    def test_matches_per_sample_dice(self):
        d = generate_synthetic(5, 32, 1, seed=3)
        net = build_segnet(SegNetConfig(n_classes=1, depth=2, base_width=4), 1, torch.float64)
        rep = evaluate_model(net, d)
        net.eval()
        with torch.no_grad():
            probs = torch.sigmoid(net(torch.from_numpy(np.stack([s.image for s in d])[:, None])))
        expected = np.mean([dice(binarize(probs[i, 0].numpy()), s.masks[0]) for i, s in enumerate(d)])
        assert rep.per_class["class0"] == pytest.approx(expected, abs=1e-12)

    def test_empty(self):
        from palseg.datasets import Dataset

        net = build_segnet(SegNetConfig(n_classes=1, depth=2, base_width=4), 0)
        with pytest.raises(ValueError):
            evaluate_model(net, Dataset((), ("c",)))


def test_table_average_arithmetic():
    rep = DiceReport({"lungs": 0.943, "heart": 0.941, "clavicles": 0.862})
    assert round(rep.average, 3) == 0.915


def _fake_run(root, name, strategy, fraction, rmin=5, rmax=13, dices=(0.5, 0.8, 0.7)):
    run = root / name
    run.mkdir()
    noise = {"fraction": fraction, "radius_min": rmin, "radius_max": rmax, "op_policy": "random_either", "seed": 0}
    (run / "config.json").write_text(json.dumps({"train": {"strategy": strategy}, "noise": noise}))
    with open(run / "metrics.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "split", "dice_class0", "dice_average", "mean_loss"])
        for e, v in enumerate(dices):
            w.writerow([e, "eval", v, v, 0.1])
    return run


class TestResultsTable:
    def test_grid_rows_sorted(self, tmp_path):
        runs = []
        for frac in (0.5, 0.25):
            for strat in ("qam_ocm", "baseline", "qam"):
                runs.append(_fake_run(tmp_path, f"{strat}_{frac}", strat, frac))
        table = results_table(runs)
        assert len(table.rows) == 6
        assert [(r.noise_fraction, r.strategy) for r in table.rows] == [
            (0.25, "baseline"), (0.25, "qam"), (0.25, "qam_ocm"),
            (0.5, "baseline"), (0.5, "qam"), (0.5, "qam_ocm")]
        assert table.rows[0].average == 0.8 and table.rows[0].epoch == 1
        text = table.render()
        assert "Average" in text and "25%" in text
        table.to_csv(tmp_path / "t.csv")
        assert len(list(csv.reader(open(tmp_path / "t.csv")))) == 7

    def test_empty(self):
        assert results_table([]).rows == []

    def test_missing_metrics_skipped(self, tmp_path):
        (tmp_path / "broken").mkdir()
        ok = _fake_run(tmp_path, "ok", "baseline", 0.0)
        table = results_table([tmp_path / "broken", ok])
        assert len(table.rows) == 1 and table.skipped == [str(tmp_path / "broken")]
        assert table.rows[0].radius_range == "-"
