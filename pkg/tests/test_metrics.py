import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swrisk.errors import DomainError, UndefinedMetricError
from swrisk.metrics import confusion, evaluate, metrics_from_confusion, roc_auc

import oracles


def test_perfect_scores():
    labels = np.array([1, 0] * 50)
    m = evaluate(labels.astype(float), labels)
    assert (m.accuracy, m.f1, m.auroc) == (1.0, 1.0, 1.0)
    assert m.confusion == [[50, 0], [0, 50]] and m.n == 100


def test_confusion_arithmetic():
    acc, p, r, f1 = metrics_from_confusion([[45, 5], [10, 40]])
    assert acc == 0.85 and p == 40 / 45 and r == 0.8
    assert math.isclose(f1, 0.8421052631578947, rel_tol=1e-12)


def test_all_half_scores():
    labels = np.array([0, 1] * 10)
    m = evaluate(np.full(20, 0.5), labels)
    assert m.auroc == 0.5 and m.accuracy == 0.5
    assert m.confusion == [[10, 0], [10, 0]]
    assert m.f1 == 0.0 and m.precision == 0.0


def test_auroc_separation_examples():
    labels = [1, 1, 0, 0]
    assert roc_auc([0.9, 0.8, 0.1, 0.2], labels) == 1.0
    assert roc_auc([0.1, 0.2, 0.9, 0.8], labels) == 0.0


def test_single_class_is_undefined():
    with pytest.raises(UndefinedMetricError) as info:
        evaluate([0.2, 0.7, 0.9], [1, 1, 1])
    partial = info.value.metrics
    assert partial.accuracy == 2 / 3 and partial.auroc is None
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [0, 0])


@pytest.mark.parametrize("scores,labels", [([], []), ([0.1, 0.2], [0]), ([0.1], [2]),
                                           ([np.nan, 0.1], [0, 1])])
def test_bad_inputs(scores, labels):
    with pytest.raises(DomainError):
        evaluate(scores, labels)


def test_macro_f1():
    cm = [[45, 5], [10, 40]]
    _, _, _, f1_pos = metrics_from_confusion(cm)
    f1_neg = 2 * 45 / (2 * 45 + 5 + 10)
    assert math.isclose(metrics_from_confusion(cm, "macro")[3], 0.5 * (f1_pos + f1_neg))


def _instance(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(2, 51))
    labels = r.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = np.round(r.uniform(0, 1, n), int(r.integers(1, 3)))  # coarse rounding makes ties
    return scores, labels


@pytest.mark.parametrize("seed", range(40))
def test_auroc_matches_pairwise_oracle(seed):
    scores, labels = _instance(seed)
    assert abs(roc_auc(scores, labels) - oracles.auroc_pairs(scores, labels)) <= 1e-12


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0), st.floats(-5.0, 5.0))
def test_auroc_invariant_to_increasing_maps(seed, a, b):
    scores, labels = _instance(seed)
    base = roc_auc(scores, labels)
    assert roc_auc(np.exp(scores), labels) == base
    assert abs(roc_auc(a * scores + b, labels) - base) <= 1e-12


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_accuracy_is_one_minus_hamming(seed):
    scores, labels = _instance(seed)
    pred = (scores > 0.5).astype(int)
    m = evaluate(scores, labels)
    assert abs(m.accuracy - (1.0 - np.mean(pred != labels))) <= 1e-15
    assert sum(map(sum, m.confusion)) == m.n == labels.size


def test_confusion_layout():
    cm = confusion([0, 1, 1, 0, 1], [0, 1, 0, 1, 1])
    np.testing.assert_array_equal(cm, [[1, 1], [1, 2]])
