import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lora_forensics.errors import LabelNotInClassSet, LengthMismatch, TooFewRepeats, ZeroTruthLabel
from lora_forensics.metrics import adjacent_error_fraction, aggregate, evaluate, summarize

CLASSES = [1, 10, 20, 30, 40, 50]


def test_hand_examples():
    r = evaluate([1, 2, 3], [1, 3, 5], [1, 2, 3, 4, 5])
    assert abs(r.mae - 1.0) < 1e-12
    assert abs(r.accuracy - 100 / 3) < 1e-12
    assert abs(r.mape - 100 * (0 + 1 / 3 + 2 / 5) / 3) < 1e-12
    assert abs(evaluate([9], [10], range(1, 11)).mape - 10.0) < 1e-12


def test_identity():
    r = evaluate(CLASSES, CLASSES, CLASSES)
    assert (r.mae, r.mape, r.accuracy) == (0.0, 0.0, 100.0)
    np.testing.assert_array_equal(r.confusion, np.eye(6, dtype=int))


def test_confusion_indexed_truth_then_prediction():
    r = evaluate([10, 10, 20], [20, 10, 20], CLASSES)
    assert r.confusion[2, 1] == 1 and r.confusion[1, 1] == 1 and r.confusion[2, 2] == 1
    assert r.confusion.sum() == 3


def test_errors():
    with pytest.raises(LengthMismatch):
        evaluate([1, 2], [1], [1, 2])
    with pytest.raises(LengthMismatch):
        evaluate([], [], [1])
    with pytest.raises(ZeroTruthLabel):
        evaluate([1], [0], [0, 1])
    with pytest.raises(LabelNotInClassSet):
        evaluate([7], [1], [1, 2])


def test_aggregate_examples():
    def fake(mae):
        return evaluate([1], [1], [1]).__class__(mae, 0.0, 100.0, np.eye(1, dtype=int), (1,), 1)

    agg = aggregate([fake(1.0)] * 3)
    assert agg.mean["mae"] == 1.0 and agg.std["mae"] == 0.0
    agg = aggregate([fake(0.0), fake(2.0)])
    assert agg.mean["mae"] == 1.0 and abs(agg.std["mae"] - math.sqrt(2)) < 1e-15
    with pytest.raises(TooFewRepeats):
        aggregate([fake(1.0)])
    single = summarize([fake(3.0)])
    assert single.std is None and single.mean["mae"] == 3.0 and single.repeat_count == 1


def test_aggregate_matches_independent_recomputation():
    rng = np.random.default_rng(10)
    results = [evaluate(rng.choice(CLASSES, 35), rng.choice(CLASSES, 35), CLASSES) for _ in range(10)]
    agg = aggregate(results)
    for name in ("mae", "mape", "accuracy"):
        values = [getattr(r, name) for r in results]
        assert abs(agg.mean[name] - statistics.fmean(values)) <= 1e-12 * max(1.0, abs(agg.mean[name]))
        assert abs(agg.std[name] - statistics.stdev(values)) <= 1e-12 * max(1.0, agg.std[name])
    assert agg.repeat_count == 10


def test_adjacent_examples():
    r = evaluate([10, 10], [20, 20], CLASSES)
    assert adjacent_error_fraction(r.confusion, CLASSES) == 1.0
    r = evaluate([50], [1], CLASSES)
    assert adjacent_error_fraction(r.confusion, CLASSES) == 0.0
    assert adjacent_error_fraction(np.eye(3, dtype=int)) == 1.0
    with pytest.raises(LengthMismatch):
        adjacent_error_fraction(np.eye(3), [1, 2])


def cell_walk(preds, truths, classes):
    pos = {c: i for i, c in enumerate(sorted(classes))}
    errors = [(t, p) for p, t in zip(preds, truths) if p != t]
    if not errors:
        return 1.0
    return sum(abs(pos[t] - pos[p]) == 1 for t, p in errors) / len(errors)


labels = st.sampled_from(CLASSES)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=60))
def test_metric_properties(pairs):
    preds, truths = zip(*pairs)
    r = evaluate(preds, truths, CLASSES)
    assert 0 <= r.accuracy <= 100 and r.mape >= 0
    assert r.mae <= max(CLASSES) - min(CLASSES)
    assert r.confusion.sum() == r.n_samples == len(pairs)
    np.testing.assert_array_equal(r.confusion.sum(axis=1), [truths.count(c) for c in CLASSES])
    assert abs(r.accuracy - 100 * np.trace(r.confusion) / r.n_samples) < 1e-12
    assert adjacent_error_fraction(r.confusion, CLASSES) == pytest.approx(cell_walk(preds, truths, CLASSES), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(labels, labels), min_size=1, max_size=40), st.randoms())
def test_permutation_invariance(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = evaluate(*zip(*pairs), CLASSES)
    b = evaluate(*zip(*shuffled), CLASSES)
    assert (a.mae, a.accuracy) == (b.mae, b.accuracy)
    assert abs(a.mape - b.mape) < 1e-12
    np.testing.assert_array_equal(a.confusion, b.confusion)
