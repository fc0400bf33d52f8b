import math
import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vbmtl.diffcore.tensor import Tensor
from vbmtl.metrics import (AbsentClassWarning, MomentSummary, UndefinedMetricError, ccc, ccc_loss, ccc_per_column,
                           confusion_matrix, cross_entropy, pearson, uar)

vectors = arrays(np.float64, st.integers(3, 30), elements=st.floats(-100, 100))


def _spread(x):
    return np.ptp(x) > 1e-3 * (1 + np.abs(x).max())


class TestCCC:
    def test_perfect_agreement(self):
        assert ccc([0.1, 0.5, 0.9], [0.1, 0.5, 0.9]) == pytest.approx(1.0, abs=1e-15)

    def test_scaled_copy(self):
        # population moments: cov 4/3, var 2/3 and 8/3, mean gap 2 -> 8/22
        assert ccc([1, 2, 3], [2, 4, 6]) == pytest.approx(8 / 22, abs=1e-12)

    def test_shift_closed_form(self, rng):
        x = rng.normal(size=50)
        c = 0.7
        assert ccc(x, x + c) == pytest.approx(2 * x.var() / (2 * x.var() + c * c), abs=1e-12)

    def test_degenerate_raises(self):
        with pytest.raises(UndefinedMetricError):
            ccc([2.0, 2.0, 2.0], [2.0, 2.0, 2.0])
        with pytest.raises(UndefinedMetricError):
            ccc([1.0], [1.0])

    def test_constant_with_offset_is_zero_not_error(self):
        assert ccc([1.0, 1.0], [2.0, 2.0]) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(vectors, st.data())
    def test_symmetric_and_attenuated(self, x, data):
        y = data.draw(arrays(np.float64, x.shape, elements=st.floats(-100, 100)))
        assume(_spread(x) and _spread(y))
        assert ccc(x, y) == ccc(y, x)
        assert abs(ccc(x, y)) <= abs(pearson(x, y)) + 1e-12

    def test_moment_invariant(self, rng):
        x, y = rng.normal(size=20), rng.normal(size=20)
        m = MomentSummary.of(x, y)
        assert m.var_x >= 0 and m.var_y >= 0
        assert abs(m.cov) <= math.sqrt(m.var_x * m.var_y) + 1e-12


class TestPearson:
    def test_affine(self, rng):
        x = rng.normal(size=30)
        assert pearson(x, 3 * x + 7) == pytest.approx(1.0, abs=1e-12)
        assert pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)

    def test_small_example(self):
        assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)

    def test_constant_raises(self):
        with pytest.raises(UndefinedMetricError):
            pearson([1.0, 2.0, 3.0], [4.0, 4.0, 4.0])

    @settings(max_examples=100, deadline=None)
    @given(vectors, st.data(), st.floats(0.01, 100), st.floats(-100, 100))
    def test_positive_affine_invariance(self, x, data, a, b):
        y = data.draw(arrays(np.float64, x.shape, elements=st.floats(-100, 100)))
        assume(_spread(x) and _spread(y))
        assert pearson(a * x + b, y) == pytest.approx(pearson(x, y), abs=1e-10)


class TestUAR:
    def test_perfect(self):
        assert uar([0, 1, 2, 2], [0, 1, 2, 2], 3) == 1.0

    def test_hand_example(self):
        assert uar([0, 0, 1, 1], [0, 1, 1, 1], 2) == pytest.approx(0.75, abs=1e-15)

    def test_chance(self, rng):
        true = rng.integers(0, 8, 20000)
        assert uar(true, rng.integers(0, 8, 20000), 8) == pytest.approx(0.125, abs=0.01)

    def test_absent_class_skipped_with_warning(self):
        with pytest.warns(AbsentClassWarning):
            assert uar([0, 0, 1], [0, 0, 0], 3) == pytest.approx(0.5)

    def test_label_range(self):
        with pytest.raises(ValueError):
            uar([0, 3], [0, 0], 3)

    def test_confusion_rows_are_support(self, rng):
        true, pred = rng.integers(0, 5, 100), rng.integers(0, 5, 100)
        cm = confusion_matrix(true, pred, 5)
        assert (cm >= 0).all()
        np.testing.assert_array_equal(cm.sum(axis=1), np.bincount(true, minlength=5))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=5, max_size=40), st.randoms(use_true_random=False))
    def test_relabel_invariance(self, true, random):
        true = np.array(true)
        pred = np.array([random.randrange(5) for _ in true])
        perm = np.array(random.sample(range(5), 5))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", AbsentClassWarning)
            assert uar(perm[true], perm[pred], 5) == pytest.approx(uar(true, pred, 5), abs=1e-15)


class TestCCCLoss:
    def test_zero_for_perfect(self, rng):
        t = rng.uniform(size=(6, 3))
        assert ccc_loss(t.copy(), t).item() == pytest.approx(0.0, abs=1e-12)

    def test_constant_at_mean_gives_one(self, rng):
        t = rng.uniform(size=(6, 1))
        assert ccc_loss(np.full((6, 1), t.mean()), t).item() == pytest.approx(1.0, abs=1e-12)

    def test_matches_metric_path(self, rng):
        p, t = rng.uniform(size=(8, 10)), rng.uniform(size=(8, 10))
        assert ccc_loss(p, t).item() == pytest.approx(np.mean(1 - ccc_per_column(p, t)), abs=1e-10)

    def test_shape_and_size_errors(self):
        with pytest.raises(ValueError):
            ccc_loss(np.zeros((4, 2)), np.zeros((4, 3)))
        with pytest.raises(UndefinedMetricError):
            ccc_loss(np.zeros((1, 2)), np.ones((1, 2)))
        with pytest.raises(UndefinedMetricError):
            ccc_loss(np.ones((3, 1)), np.ones((3, 1)))


class TestCrossEntropy:
    def test_uniform_logits(self):
        assert cross_entropy(np.zeros((5, 8)), np.arange(5)).item() == pytest.approx(math.log(8), abs=1e-12)

    def test_saturated_correct(self):
        logits = 20.0 * np.eye(8)[[1, 4]]
        assert cross_entropy(logits, [1, 4]).item() == pytest.approx(0.0, abs=1e-7)

    def test_scalar_example(self):
        assert cross_entropy([[1.0, 2.0]], [1]).item() == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)), st.lists(st.integers(0, 4), min_size=4, max_size=4))
    def test_nonnegative(self, logits, labels):
        assert cross_entropy(Tensor(logits), labels).item() >= 0.0
