import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apu_fdi.fdi import (
    ConfusionMatrix, HealthClass, class_of, classify, confusion, improvement, macro_metrics, rmse,
)


@pytest.mark.parametrize("value,cls", [
    (1.01, HealthClass.HEALTHY), (0.98, HealthClass.HEALTHY), (0.9799999, HealthClass.MINOR),
    (0.96, HealthClass.MINOR), (0.95, HealthClass.MEDIUM), (0.94, HealthClass.MEDIUM),
    (0.9399999, HealthClass.SEVERE), (0.5, HealthClass.SEVERE),
])
def test_class_boundaries(value, cls):
    assert class_of(value) is cls


def test_classify_uses_window_mean():
    theta = np.concatenate([np.ones(100), np.full(50, 0.95)])
    assert classify(theta, (100, 150)) is HealthClass.MEDIUM
    assert classify(theta, slice(0, 100)) is HealthClass.HEALTHY
    with pytest.raises(ValueError):
        classify(theta, (10, 10))


def test_rmse_and_improvement():
    assert rmse([1.0, 2.0, 3.0], [1.0, 2.0, 5.0]) == pytest.approx(np.sqrt(4 / 3))
    with pytest.raises(ValueError):
        rmse([1.0], [1.0, 2.0])
    assert improvement(2.0, 1.5) == pytest.approx(25.0)
    assert improvement(2.0, 3.0) == pytest.approx(-50.0)
    with pytest.raises(ZeroDivisionError):
        improvement(0.0, 1.0)


def test_confusion_counts_and_rates():
    actual = [0, 0, 1, 1, 2, 3, 3, 3]
    pred = [0, 1, 1, 1, 3, 3, 3, 2]
    cm = confusion(actual, pred)
    assert cm.total == 8
    assert cm.counts[0, 1] == 1 and cm.counts[3, 2] == 1
    rates = cm.rates()
    np.testing.assert_allclose(rates.sum(axis=1), 1.0)
    assert cm.true_positive_rate(HealthClass.SEVERE) == pytest.approx(2 / 3)
    assert cm.accuracy() == pytest.approx(5 / 8)
    with pytest.raises(ValueError):
        confusion([0], [0, 1])


def test_macro_metrics_by_hand():
    counts = np.array([[8, 2, 0, 0], [1, 9, 0, 0], [0, 0, 10, 0], [0, 0, 5, 5]])
    m = macro_metrics(ConfusionMatrix(counts))
    precision = np.array([8 / 9, 9 / 11, 10 / 15, 1.0])
    recall = np.array([0.8, 0.9, 1.0, 0.5])
    f1 = 2 * precision * recall / (precision + recall)
    assert m["precision"] == pytest.approx(precision.mean())
    assert m["recall"] == pytest.approx(recall.mean())
    assert m["f1"] == pytest.approx(f1.mean())
    assert m["accuracy"] == pytest.approx(32 / 40)


def test_macro_metrics_zero_division_and_absent_classes():
    counts = np.zeros((4, 4), dtype=int)
    counts[0, 1] = 5                      # healthy always called minor; minor never occurs
    m = macro_metrics(ConfusionMatrix(counts))
    assert m["f1"] == 0.0 and m["precision"] == 0.0
    assert list(m["per_class"]) == ["Healthy"]
    with pytest.raises(ValueError):
        macro_metrics(ConfusionMatrix(np.zeros((4, 4))))


def test_confusion_matrix_validation():
    with pytest.raises(ValueError):
        ConfusionMatrix(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        ConfusionMatrix(-np.ones((4, 4)))


labels = st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=200)


@settings(max_examples=100, deadline=None)
@given(labels)
def test_metric_ranges(pairs):
    actual, pred = zip(*pairs)
    cm = confusion(actual, pred)
    m = macro_metrics(cm)
    for key in ("precision", "recall", "f1", "accuracy"):
        assert 0.0 <= m[key] <= 1.0
    assert cm.total == len(pairs)
    perfect = macro_metrics(confusion(actual, actual))
    assert perfect["f1"] == 1.0 and perfect["accuracy"] == 1.0


@settings(max_examples=50, deadline=None)
@given(labels, labels)
def test_pooling_adds_counts(a, b):
    ca = confusion(*zip(*a))
    cb = confusion(*zip(*b))
    np.testing.assert_array_equal((ca + cb).counts, confusion(*zip(*(a + b))).counts)
