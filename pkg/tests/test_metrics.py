import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from mscan_lab.errors import UndefinedMetricError
from mscan_lab.metrics import auc, auc_bruteforce, rel_impr


def test_auc_hand_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_perfect_and_tied():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_matches_bruteforce_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        # coarse rounding forces plenty of ties
        scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
        assert auc(scores, labels) == auc_bruteforce(scores, labels)


def test_auc_agrees_with_sklearn():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=500)
    labels = (scores + rng.normal(size=500) > 0).astype(int)
    assert auc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


@pytest.mark.parametrize('scores,labels', [
    ([0.1, 0.2], [1, 1]),
    ([0.1, 0.2], [0, 0]),
    ([0.1, float('nan')], [0, 1]),
    ([0.1, 0.2], [0, 2]),
    ([0.1, 0.2, 0.3], [0, 1]),
])
def test_auc_undefined(scores, labels):
    with pytest.raises(UndefinedMetricError):
        auc(scores, labels)


@pytest.mark.parametrize('model,base,expected', [
    (0.6782, 0.6557, 3.43),
    (0.6513, 0.6061, 7.46),
    (0.8070, 0.7611, 6.03),
])
def test_rel_impr_known_cells(model, base, expected):
    assert rel_impr(model, base) == pytest.approx(expected, abs=0.01)


def test_rel_impr_identity_and_errors():
    assert rel_impr(0.7, 0.7) == 0.0
    with pytest.raises(UndefinedMetricError):
        rel_impr(0.7, 0.0)


@pytest.mark.parametrize('transform', [lambda x: 2.5 * x + 7.0, lambda x: x ** 3, lambda x: np.exp(x / 10.0)])
def test_auc_ignores_strictly_increasing_transforms(transform):
    rng = np.random.default_rng(11)
    for _ in range(50):
        scores = rng.integers(-20, 21, 40).astype(float)
        labels = rng.integers(0, 2, 40)
        labels[:2] = [0, 1]
        assert auc(transform(scores), labels) == auc(scores, labels)
