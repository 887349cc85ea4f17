import os

import numpy as np
import pytest

from lplp.bagdata import Bag, Instance
from lplp.evaluation import ConfusionMatrix, accuracy, evaluate, miou
from lplp.nets import Mlp, MlpSpec, ModelTriple, save_checkpoint


def linear_triple(g_params, h_params, d=2, C=2):
    f = Mlp(MlpSpec((d, d)), np.concatenate([np.eye(d).ravel(), np.zeros(d)]))
    return ModelTriple(f, Mlp(MlpSpec((d, 1)), np.asarray(g_params, float)),
                       Mlp(MlpSpec((d, C)), np.asarray(h_params, float)))


def bags_from(points, labels, C=2):
    inst = tuple(Instance(np.asarray(x, float), int(c), i) for i, (x, c) in enumerate(zip(points, labels)))
    Y = int(any(labels))
    p = None
    if Y:
        counts = np.bincount([c for c in labels if c], minlength=C + 1)[1:]
        p = counts / counts.sum()
    return [Bag(inst, Y, p, 0)]


class TestAccuracy:
    def test_identical(self):
        assert accuracy([0, 1, 2], [0, 1, 2]) == 1.0

    def test_disjoint(self):
        assert accuracy([1, 2, 0], [0, 1, 2]) == 0.0

    def test_count(self):
        assert accuracy([0, 1, 1, 2], [0, 0, 1, 2]) == 0.75

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([0, 1], [0])


class TestMiou:
    def test_diagonal(self):
        iou, m = miou(ConfusionMatrix(np.diag([3, 4, 5])))
        assert np.all(iou == 1.0) and m == 1.0

    def test_worked_example(self):
        iou, m = miou(ConfusionMatrix.from_labels([0, 0, 1, 1], [0, 1, 1, 1], 2))
        assert iou.tolist() == [1 / 2, 2 / 3] and m == 7 / 12

    def test_absent_class_excluded(self):
        iou, m = miou(ConfusionMatrix.from_labels([0, 0, 1, 1], [0, 1, 1, 1], 3))
        assert np.isnan(iou[2]) and m == 7 / 12

    def test_all_empty(self):
        with pytest.raises(ValueError):
            miou(ConfusionMatrix(np.zeros((3, 3), dtype=int)))

    def test_confusion_counts(self):
        cm = ConfusionMatrix.from_labels([0, 1, 2, 2], [0, 2, 2, 1], 3)
        assert cm.counts.tolist() == [[1, 0, 0], [0, 0, 1], [0, 1, 1]] and cm.total == 4


def test_evaluate_worked_miou():
    # score = sigmoid(x): 1-d points chosen so predictions are (0, 1, 1, 1)
    f = Mlp(MlpSpec((1, 1)), np.array([1.0, 0.0]))
    model = ModelTriple(f, Mlp(MlpSpec((1, 1)), np.array([1.0, 0.0])), Mlp(MlpSpec((1, 1)), np.zeros(2)))
    rep = evaluate(model, bags_from([[-5.0], [1.0], [5.0], [5.0]], [0, 0, 1, 1], C=1))
    assert rep.per_class_iou.tolist() == [1 / 2, 2 / 3] and rep.miou == 7 / 12
    assert rep.accuracy == 0.75


def three_class_points(n=30, seed=0):
    rng = np.random.default_rng(seed)
    centers = {0: (-5.0, 0.0), 1: (5.0, 5.0), 2: (5.0, -5.0)}
    labels = np.repeat([0, 1, 2], n)
    pts = np.array([centers[c] for c in labels]) + rng.normal(scale=0.3, size=(3 * n, 2))
    return pts, labels


def test_evaluate_oracle_model():
    pts, labels = three_class_points()
    oracle = linear_triple([1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0, 0.0, 0.0])
    rep = evaluate(oracle, bags_from(pts, labels))
    assert rep.accuracy == 1.0 and rep.miou == 1.0 and rep.binary_accuracy == 1.0


def test_evaluate_constant_model():
    pts, labels = three_class_points()
    constant = linear_triple([0.0, 0.0, 10.0], [0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    rep = evaluate(constant, bags_from(pts, labels))
    assert rep.accuracy == pytest.approx(1 / 3, abs=1e-12)


def test_evaluate_does_not_touch_checkpoint(tmp_path):
    pts, labels = three_class_points(5)
    path = tmp_path / "c.txt"
    save_checkpoint(path, linear_triple([1.0, 0.0, 0.0], [0.0, 0.0, 1.0, -1.0, 0.0, 0.0]))
    before = path.read_bytes()
    os.chmod(path, 0o444)
    rep = evaluate(str(path), bags_from(pts, labels))
    assert rep.accuracy == 1.0 and path.read_bytes() == before
