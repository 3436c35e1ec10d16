"""
Tests for the linear SVM and the classification metrics
"""

import numpy as np
import pytest
from scipy.optimize import minimize

from tensor_grading.classify import (
    EmptyConfusionError,
    FeatureDimensionError,
    InvalidConfusionError,
    InvalidFeatureTableError,
    InvalidSoftMarginError,
    LinearSvmModel,
    SingleClassError,
    metrics,
    svm_predict,
    svm_train,
)


def _blobs(seed, count=20, gap=2.0):
    rng = np.random.default_rng(seed)
    labels = np.where(np.arange(count) < count // 2, 1.0, -1.0)
    features = rng.normal(scale=0.5, size=(count, 2)) + gap * labels[:, np.newaxis]
    return features, labels


def test_two_points_on_a_line():
    model = svm_train(np.array([[-1.0], [1.0]]), np.array([-1.0, 1.0]), C=1.0)
    assert model.w[0] == pytest.approx(1.0, abs=1e-9)
    assert model.b == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(model.alpha, [0.5, 0.5], atol=1e-9)


def test_one_dimensional_features_accept_a_flat_array():
    model = svm_train(np.array([-2.0, -1.0, 1.0, 2.0]), np.array([-1, -1, 1, 1]))
    labels, _ = svm_predict(model, np.array([[-1.5], [1.5]]))
    np.testing.assert_array_equal(labels, [-1, 1])


def test_separable_data_is_separated_with_margin():
    features, labels = _blobs(1)
    model = svm_train(features, labels, C=100.0)
    margins = labels * model.decision_function(features)
    assert margins.min() >= 1.0 - 1e-6
    assert model.duality_gap == pytest.approx(0.0, abs=1e-6)


def test_dual_constraints_hold():
    features, labels = _blobs(2, count=30, gap=0.3)
    model = svm_train(features, labels, C=0.5)
    assert np.all(model.alpha >= 0.0)
    assert np.all(model.alpha <= 0.5)
    assert abs(model.alpha @ labels) < 1e-9
    np.testing.assert_allclose(model.w, features.T @ (model.alpha * labels), atol=1e-12)
    assert model.duality_gap >= -1e-9


def test_single_class():
    with pytest.raises(SingleClassError) as error:
        svm_train(np.zeros((3, 2)), np.ones(3))
    assert str(error.value) == "SVM training needs examples of both classes."


def test_invalid_labels_and_penalty():
    with pytest.raises(InvalidFeatureTableError) as error:
        svm_train(np.zeros((2, 1)), np.array([1, 0]))
    assert str(error.value) == "Class labels should be -1 or +1."
    with pytest.raises(InvalidSoftMarginError) as error:
        svm_train(np.zeros((2, 1)), np.array([1, -1]), C=0.0)
    assert str(error.value) == "SVM penalty C should be positive."


def test_row_count_mismatch():
    with pytest.raises(FeatureDimensionError) as error:
        svm_train(np.zeros((3, 2)), np.array([1, -1]))
    assert str(error.value) == "Got 3 feature rows for 2 labels."


def test_prediction_dimension_mismatch():
    model = svm_train(*_blobs(3))
    with pytest.raises(FeatureDimensionError) as error:
        svm_predict(model, np.zeros(3))
    assert str(error.value) == "Feature vector has 3 dimensions, the model expects 2."


def test_zero_score_counts_as_positive():
    model = LinearSvmModel(w=np.array([1.0, 0.0]), b=-1.0, alpha=np.zeros(2), C=1.0, duality_gap=0.0)
    labels, scores = svm_predict(model, np.array([[1.0, 5.0], [0.5, 0.0]]))
    np.testing.assert_array_equal(labels, [1, -1])
    np.testing.assert_array_equal(scores, [0.0, -0.5])


def test_single_vector_matches_batch():
    features, labels = _blobs(4)
    model = svm_train(features, labels)
    batch_labels, batch_scores = svm_predict(model, features)
    for row, expected_label, expected_score in zip(features, batch_labels, batch_scores):
        label, score = svm_predict(model, row)
        assert label == expected_label
        assert score == expected_score


def test_metrics_from_counts():
    scores = metrics(88, 87, 13, 12)
    assert scores.accuracy == 87.5
    assert scores.sensitivity == 88.0
    assert scores.specificity == 87.0


def test_metrics_with_absent_class():
    scores = metrics(5, 0, 0, 1)
    assert scores.specificity is None
    assert scores.sensitivity == pytest.approx(100.0 * 5 / 6)


def test_invalid_counts():
    with pytest.raises(InvalidConfusionError) as error:
        metrics(1, -1, 0, 0)
    assert str(error.value) == "Confusion counts should be nonnegative."
    with pytest.raises(EmptyConfusionError) as error:
        metrics(0, 0, 0, 0)
    assert str(error.value) == "Confusion counts should not all be zero."


def _dual_by_slsqp(features, labels, C):
    hessian = np.outer(labels, labels) * (features @ features.T)
    result = minimize(
        lambda alpha: 0.5 * alpha @ hessian @ alpha - alpha.sum(),
        np.full(labels.size, min(C, 0.1)),
        jac=lambda alpha: hessian @ alpha - 1.0,
        bounds=[(0.0, C)] * labels.size,
        constraints=[{"type": "eq", "fun": lambda alpha: alpha @ labels, "jac": lambda alpha: labels}],
        method="SLSQP",
        options={"ftol": 1e-14, "maxiter": 1000},
    )
    return result.x, 0.5 * result.x @ hessian @ result.x - result.x.sum()


@pytest.mark.parametrize("seed", range(5))
def test_small_problems_match_a_generic_solver(seed):
    features, labels = _blobs(seed, count=6, gap=0.8)
    model = svm_train(features, labels, C=1.0)
    oracle_alpha, oracle_dual = _dual_by_slsqp(features, labels, 1.0)
    hessian = np.outer(labels, labels) * (features @ features.T)
    assert 0.5 * model.alpha @ hessian @ model.alpha - model.alpha.sum() <= oracle_dual + 1e-8
    oracle_w = features.T @ (oracle_alpha * labels)
    cosine = model.w @ oracle_w / (np.linalg.norm(model.w) * np.linalg.norm(oracle_w))
    assert cosine >= 1.0 - 1e-3
    hinge = np.maximum(0.0, 1.0 - labels * model.decision_function(features)).sum()
    primal = 0.5 * model.w @ model.w + hinge
    assert model.duality_gap <= 1e-6 * (1.0 + abs(primal))
    free = (oracle_alpha > 1e-6) & (oracle_alpha < 1.0 - 1e-6)
    if free.any():
        oracle_b = np.mean(labels[free] - features[free] @ oracle_w)
        oracle_scores = features @ oracle_w + oracle_b
        predicted, _ = svm_predict(model, features)
        clear = np.abs(oracle_scores) > 1e-2
        np.testing.assert_array_equal(predicted[clear], np.where(oracle_scores[clear] >= 0.0, 1, -1))


@pytest.mark.parametrize("factor", [0.5, 2.0, 10.0])
def test_scaling_features_keeps_the_labels(factor):
    features, labels = _blobs(6, count=20, gap=3.0)
    model = svm_train(features, labels, C=100.0)
    scaled = svm_train(factor * features, labels, C=100.0)
    assert model.alpha.max() < 100.0
    assert scaled.alpha.max() < 100.0
    grid = np.stack(np.meshgrid(np.linspace(-5, 5, 21), np.linspace(-5, 5, 21)), axis=-1).reshape(-1, 2)
    points = np.vstack([features, grid])
    expected, scores = svm_predict(model, points)
    predicted, _ = svm_predict(scaled, factor * points)
    clear = np.abs(scores) > 1e-3
    np.testing.assert_array_equal(predicted[clear], expected[clear])
    np.testing.assert_array_equal(predicted[: labels.size], labels)
