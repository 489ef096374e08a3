import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cssr.head import softmax_from_distances
from cssr.prototype import (PrototypeModel, check_mae_monotonicity, find_mse_counterexample, prototype_loss,
                            prototype_prob, reciprocal_prob, reciprocal_reg)

SIGMOID_1 = 1 / (1 + math.exp(-1))


def test_equidistant_point_splits_evenly():
    model = PrototypeModel.single([[0.0, 0.0], [2.0, 0.0]], "mse")
    np.testing.assert_allclose(prototype_prob([1.0, 5.0], model), [0.5, 0.5])


@pytest.mark.parametrize("norm", ["mse", "mae"])
def test_one_d_prototype_probability(norm):
    p = prototype_prob([0.0], PrototypeModel.single([0.0, 1.0], norm))
    assert p[0] == pytest.approx(SIGMOID_1, abs=1e-12)
    assert p[0] == pytest.approx(0.7311, abs=1e-4)


def test_reciprocal_probabilities():
    model = PrototypeModel.single([0.0, 1.0])
    p = reciprocal_prob([1.0], model)
    assert p[0] == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert reciprocal_prob([0.0], model)[1] > 0.5
    np.testing.assert_allclose(reciprocal_prob([0.5], model), [0.5, 0.5])


def test_multi_point_sets_use_min_and_sum():
    model = PrototypeModel([np.array([[0.0], [10.0]]), np.array([[4.0]])], "mse")
    # nearest point of class 0 is 10 -> distance 1; class 1 distance 25
    np.testing.assert_allclose(prototype_prob([9.0], model), softmax_from_distances(np.array([1.0, 25.0]), 1.0))
    np.testing.assert_allclose(reciprocal_prob([9.0], model), softmax_from_distances(np.array([82.0, 25.0]), -1.0))


def test_prototype_loss():
    model = PrototypeModel([np.array([[0.0, 0.0], [10.0, 10.0]]), np.array([[1.0, 1.0]])])
    assert prototype_loss([0.0, 0.0], 0, model) == 0.0
    assert prototype_loss([3.0, 4.0], 0, model) == 25.0
    assert prototype_loss([9.0, 10.0], 0, model) == 1.0
    with pytest.raises(ValueError):
        prototype_loss([0.0, 0.0], 2, model)


def test_reciprocal_regularizer():
    model = PrototypeModel.single([[0.0, 0.0], [5.0, 5.0]], margins=np.array([1.0, 0.0]))
    assert reciprocal_reg([1.0, 0.0], 0, model) == 0.0
    assert reciprocal_reg([1.0, 1.0], 0, model) == 1.0
    assert reciprocal_reg([5.0, 7.0], 1, model) == 16.0
    with pytest.raises(ValueError):
        reciprocal_reg([0.0, 0.0], -1, model)
    with pytest.raises(ValueError):
        reciprocal_reg([0.0, 0.0], 0, PrototypeModel.single([[0.0], [1.0]]))


def test_empty_point_set_rejected():
    with pytest.raises(ValueError):
        PrototypeModel([np.zeros((0, 2)), np.zeros((1, 2))])


def test_mae_shift_outward_keeps_probability():
    model = PrototypeModel.single([0.0, 1.0], "mae")
    assert prototype_prob([-0.5], model)[0] == pytest.approx(prototype_prob([0.0], model)[0], abs=1e-15)


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=6, unique=True), st.integers(0, 5))
def test_zero_offset_is_equality(points, c):
    c = c % len(points)
    model = PrototypeModel.single(points, "mae")
    u = model.points[c][0]
    assert prototype_prob(u + 0.0, model)[c] == prototype_prob(u, model)[c]


@given(st.integers(2, 6), st.integers(1, 8), st.integers(0, 2**31))
def test_mae_probability_peaks_at_prototype(m, d, seed):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(m, d))
    model = PrototypeModel.single(u, "mae")
    eps = rng.normal(size=d) * rng.uniform(0.01, 5)
    c = int(rng.integers(m))
    assert prototype_prob(u[c] + eps, model)[c] <= prototype_prob(u[c], model)[c] + 1e-9


def test_monotonicity_report_clean():
    report = check_mae_monotonicity(trials=20, seed=3)
    assert report.passed
    assert report.checks == 20 * 50
    assert "PASS" in report.summary()


def test_canonical_mse_witness():
    w = find_mse_counterexample(seed=0)
    assert w.c == 0
    np.testing.assert_array_equal(w.prototypes.ravel(), [0.0, 1.0])
    assert w.p_at_prototype == pytest.approx(SIGMOID_1, abs=1e-12)
    expected = math.exp(-0.25) / (math.exp(-0.25) + math.exp(-2.25))
    assert w.p_at_offset == pytest.approx(expected, abs=1e-12)
    assert w.p_at_offset > w.p_at_prototype


def test_shift_toward_other_prototype_is_not_a_witness():
    model = PrototypeModel.single([0.0, 1.0], "mse")
    assert prototype_prob([0.5], model)[0] < prototype_prob([0.0], model)[0]


@pytest.mark.parametrize("m", [3, 4])
def test_random_search_finds_witnesses(m):
    w = find_mse_counterexample(seed=5, num_classes=m)
    assert w.p_at_offset > w.p_at_prototype


def test_single_class_has_no_witness():
    with pytest.raises(ValueError):
        find_mse_counterexample(num_classes=1)


def test_prototype_and_head_softmax_agree():
    d = np.array([0.3, 1.7, 0.9])
    model = PrototypeModel.single(np.zeros((3, 1)), "mae")
    # inject the same distances into both normalization paths
    model.points = [np.array([[v]]) for v in d]
    np.testing.assert_allclose(prototype_prob([0.0], model, gamma=0.1), softmax_from_distances(d, 0.1), atol=1e-15)
