import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metaweight.metrics import (
    MetricsReport,
    balanced_accuracy,
    confusion,
    confusion_csv,
    per_class_accuracy,
)
from metaweight.nn import MlpModel

# Per-class test accuracy (%) for seven skin-lesion classes, three training schemes.
REWEIGHT = [74.48, 69.59, 54.38, 80.65, 55.81, 62.86, 61.3]
UNWEIGHTED = [7.04, 0.0, 39.63, 49.46, 2.33, 0.0, 0.0]
SAMPLER = [86.25, 0.0, 26.27, 4.30, 0.0, 0.0, 0.0]


def fixture_matrix(percent, support=10_000):
    """Confusion matrix whose row recalls are exactly ``percent``; misses go to the next class."""
    k = len(percent)
    cm = np.zeros((k, k), dtype=np.int64)
    for c, p in enumerate(percent):
        hit = round(p * support / 100)
        cm[c, c] = hit
        cm[c, (c + 1) % k] = support - hit
    return cm


class TestFixtures:
    def test_reweight_column(self):
        got = 100 * balanced_accuracy(fixture_matrix(REWEIGHT))
        assert abs(got - 65.58) <= 0.005
        assert abs(got - 65.56) <= 0.05

    def test_unweighted_column(self):
        assert abs(100 * balanced_accuracy(fixture_matrix(UNWEIGHTED)) - 14.07) <= 0.05

    def test_sampler_column(self):
        assert abs(100 * balanced_accuracy(fixture_matrix(SAMPLER)) - 16.69) <= 0.05

    def test_ordering(self):
        accs = [balanced_accuracy(fixture_matrix(c)) for c in (REWEIGHT, SAMPLER, UNWEIGHTED)]
        assert accs == sorted(accs, reverse=True)


def test_confusion_counts():
    cm = confusion([0, 1, 1, 2], [0, 1, 2, 2], 3)
    np.testing.assert_array_equal(cm, [[1, 0, 0], [0, 1, 0], [0, 1, 1]])
    np.testing.assert_allclose(per_class_accuracy(cm), [1, 1, 0.5])
    assert balanced_accuracy(cm) == pytest.approx(2.5 / 3)


def test_perfect_predictions():
    assert balanced_accuracy(np.eye(4, dtype=int) * 7) == 1.0


def test_skewed_but_perfect_recall_counts_each_class_once():
    # overall accuracy is dominated by class 0; the balanced one is not
    cm = np.array([[90, 0], [5, 5]])
    assert balanced_accuracy(cm) == pytest.approx(0.75)
    assert MetricsReport.from_confusion(cm).overall_accuracy == pytest.approx(0.95)


def test_empty_class_row_is_an_error():
    with pytest.raises(ValueError, match=r"\[1\]"):
        balanced_accuracy(np.array([[3, 0], [0, 0]]))


def test_bad_inputs():
    with pytest.raises(ValueError):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        confusion([0], [0, 1], 2)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(2, 6), reps=st.integers(2, 4))
def test_duplicating_every_example_changes_nothing(seed, k, reps):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(k), rng.integers(0, k, 20)])
    preds = rng.integers(0, k, len(labels))
    once = confusion(preds, labels, k)
    many = confusion(np.tile(preds, reps), np.tile(labels, reps), k)
    assert balanced_accuracy(many) == pytest.approx(balanced_accuracy(once), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(2, 6))
def test_report_consistency(seed, k):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.arange(k), rng.integers(0, k, 30)])
    preds = rng.integers(0, k, len(labels))
    rep = MetricsReport.from_confusion(confusion(preds, labels, k))
    cm = np.array(rep.confusion)
    assert cm.sum() == len(labels)
    assert rep.overall_accuracy == pytest.approx(np.mean(preds == labels))
    assert rep.overall_accuracy == pytest.approx(np.trace(cm) / cm.sum())
    assert 0.0 <= rep.balanced_accuracy <= 1.0
    assert rep.balanced_accuracy == pytest.approx(np.mean(rep.per_class_accuracy))


def test_tied_logits_predict_the_lowest_class():
    model = MlpModel([np.zeros((3, 3))])
    preds = model.predict(np.ones((4, 2)))
    cm = confusion(preds, [0, 1, 2, 0], 3)
    np.testing.assert_array_equal(cm[:, 0], [2, 1, 1])


def test_serialization():
    rep = MetricsReport.from_confusion([[2, 1], [0, 3]])
    doc = json.loads(rep.to_json())
    assert set(doc) == {"per_class_accuracy", "balanced_accuracy", "overall_accuracy", "confusion"}
    assert rep.to_json() == MetricsReport.from_confusion([[2, 1], [0, 3]]).to_json()
    assert confusion_csv([[2, 1], [0, 3]]) == "2,1\n0,3\n"
