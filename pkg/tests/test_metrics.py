import numpy as np
import pytest
from scipy.stats import norm

from src.errors import DomainError, ShapeError, UndefinedMetricError
from src.services.metrics import auroc, confusion_matrix, dsc, macro_f1, wilcoxon_signed_rank


# ==================== macro_f1 ====================

def test_macro_f1_perfect():
    assert macro_f1(["a", "b", "a"], ["a", "b", "a"], ["a", "b"]) == 1.0


def test_macro_f1_all_one_class():
    # class 0: precision 0.5, recall 1 -> 2/3; class 1: 0
    assert macro_f1([0, 0, 0, 0], [0, 0, 1, 1], [0, 1]) == pytest.approx(1 / 3)


def test_macro_f1_absent_class_contributes_zero():
    assert macro_f1(["a", "b"], ["a", "b"], ["a", "b", "c"]) == pytest.approx(2 / 3)


def test_macro_f1_permutation_invariant():
    preds, labels = ["a", "b", "b", "c"], ["a", "b", "c", "c"]
    swap = {"a": "c", "b": "a", "c": "b"}
    assert macro_f1(preds, labels, ["a", "b", "c"]) == pytest.approx(
        macro_f1([swap[p] for p in preds], [swap[y] for y in labels], ["a", "b", "c"])
    )


def test_macro_f1_rejects_unknown_label():
    with pytest.raises(DomainError):
        macro_f1(["a"], ["z"], ["a"])


# ==================== auroc ====================

def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert auroc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5
    assert auroc([0.9, 0.2, 0.8, 0.3], [1, 0, 1, 0]) == 1.0


def test_auroc_monotone_transform_invariant(rng):
    scores = rng.normal(size=40)
    labels = rng.integers(0, 2, size=40)
    labels[:2] = [0, 1]
    assert auroc(scores, labels) == pytest.approx(auroc(np.exp(3 * scores), labels))


def test_auroc_single_class():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])


# ==================== dsc ====================

def test_dsc_examples():
    a = np.zeros((20, 20), bool)
    a[:10, :10] = True
    assert dsc(a, a) == 1.0
    assert dsc(a, ~a) == 0.0
    b = np.zeros((20, 20), bool)
    b[5:15, :10] = True          # 50 of 100 overlap
    assert dsc(a, b) == pytest.approx(0.5)
    assert dsc(a, b) == dsc(b, a)
    assert dsc(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(ShapeError):
        dsc(np.zeros((2, 2)), np.zeros((3, 3)))


# ==================== confusion matrix ====================

def test_confusion_matrix():
    classes = ["a", "b", "c"]
    labels = ["a", "a", "b", "c", "c"]
    preds = ["a", "b", "b", "c", "a"]
    m = confusion_matrix(preds, labels, classes)
    assert m.sum() == 5
    assert m.sum(axis=1).tolist() == [2, 1, 2]
    np.testing.assert_array_equal(confusion_matrix(labels, preds, classes), m.T)
    assert np.array_equal(confusion_matrix(labels, labels, classes), np.diag([2, 1, 2]))


# ==================== Wilcoxon ====================

def test_wilcoxon_all_positive():
    assert wilcoxon_signed_rank([1, 2, 3, 4, 5]) == pytest.approx(0.0625)


def test_wilcoxon_exact_mixed_signs():
    # W- = 6 over n = 6: 14 of 64 sign patterns are at least as extreme per tail
    assert wilcoxon_signed_rank([1, 2, 3, 4, 5, -6]) == pytest.approx(0.4375)


def test_wilcoxon_ties_use_corrected_normal():
    # 25 equal deltas: W+ = 325, mean 162.5, tie-corrected sd 32.5
    expected = 2 * norm.sf((162.5 - 0.5) / 32.5)
    assert wilcoxon_signed_rank([0.1] * 25) == pytest.approx(expected, rel=1e-6)
    assert wilcoxon_signed_rank([0.1] * 25, exact=True) == pytest.approx(expected, rel=1e-6)


def test_wilcoxon_symmetric_deltas():
    assert wilcoxon_signed_rank([-1, 1, -2, 2, -3, 3]) == pytest.approx(1.0)


def test_wilcoxon_exact_matches_normal_at_25(rng):
    deltas = rng.normal(0.3, 1.0, size=25)
    exact = wilcoxon_signed_rank(deltas, exact=True)
    approx = wilcoxon_signed_rank(deltas, exact=False)
    assert abs(exact - approx) < 0.01


def test_wilcoxon_errors():
    with pytest.raises(UndefinedMetricError):
        wilcoxon_signed_rank([0, 0, 0, 0, 0])
    with pytest.raises(DomainError):
        wilcoxon_signed_rank([1, 2, 3])
