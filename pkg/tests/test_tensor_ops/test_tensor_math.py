"""
Tests for eigen-decomposition, deformation tensors and the log-Euclidean distance
"""

import numpy as np
import pytest

from tensor_grading.tensor_ops import (
    AsymmetricMatrixError,
    InvalidTensorShapeError,
    TensorNotPositiveError,
    deformation_tensor,
    log_distance_voxel,
    six_squared_distance,
    six_to_sym,
    sym_eigen,
    sym_to_six,
    tensor_exp,
    tensor_log,
)


def _random_rotations(rng, count):
    q, r = np.linalg.qr(rng.normal(size=(count, 3, 3)))
    q = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, np.newaxis, :]
    q[np.linalg.det(q) < 0, :, 0] *= -1.0
    return q


def _random_spd(rng, count):
    rotations = _random_rotations(rng, count)
    values = np.exp(rng.normal(scale=0.7, size=(count, 3)))
    return (rotations * values[:, np.newaxis, :]) @ rotations.transpose(0, 2, 1)


def _random_symmetric(rng, count):
    matrices = rng.normal(size=(count, 3, 3))
    return 0.5 * (matrices + matrices.transpose(0, 2, 1))


def test_identity_eigenvalues():
    values, vectors = sym_eigen(np.eye(3))
    np.testing.assert_array_equal(values, [1.0, 1.0, 1.0])
    np.testing.assert_allclose(vectors @ vectors.T, np.eye(3), atol=1e-12)


def test_diagonal_eigenpairs():
    values, vectors = sym_eigen(np.diag([1.0, 3.0, 2.0]))
    np.testing.assert_allclose(values, [3.0, 2.0, 1.0], atol=1e-12)
    np.testing.assert_allclose(np.abs(vectors), [[0, 0, 1], [1, 0, 0], [0, 1, 0]], atol=1e-10)


def test_random_reconstruction_and_orthonormality():
    rng = np.random.default_rng(11)
    matrices = _random_symmetric(rng, 2000)
    values, vectors = sym_eigen(matrices)
    rebuilt = (vectors * values[:, np.newaxis, :]) @ vectors.transpose(0, 2, 1)
    assert np.linalg.norm(rebuilt - matrices, axis=(1, 2)).max() < 1e-9
    gram = vectors.transpose(0, 2, 1) @ vectors
    assert np.abs(gram - np.eye(3)).max() < 1e-10
    assert np.all(np.diff(values, axis=1) <= 0)


def test_near_degenerate_matrices():
    rng = np.random.default_rng(5)
    rotations = _random_rotations(rng, 500)
    values = np.stack([np.full(500, 2.0), np.full(500, 2.0 + 1e-9), rng.uniform(0.5, 1.5, 500)], axis=1)
    matrices = (rotations * values[:, np.newaxis, :]) @ rotations.transpose(0, 2, 1)
    found, vectors = sym_eigen(matrices)
    rebuilt = (vectors * found[:, np.newaxis, :]) @ vectors.transpose(0, 2, 1)
    assert np.linalg.norm(rebuilt - matrices, axis=(1, 2)).max() < 1e-9
    assert np.abs(vectors.transpose(0, 2, 1) @ vectors - np.eye(3)).max() < 1e-10


def test_asymmetric_input():
    matrix = np.eye(3)
    matrix[0, 1] = 1e-6
    with pytest.raises(AsymmetricMatrixError) as error:
        sym_eigen(matrix)
    assert str(error.value) == "Matrix should be symmetric within 1e-12."


def test_wrong_shape():
    with pytest.raises(InvalidTensorShapeError) as error:
        sym_eigen(np.eye(2))
    assert str(error.value) == "Expected 3x3 matrices."


def test_deformation_tensor_cases():
    np.testing.assert_allclose(deformation_tensor(np.eye(3)), np.eye(3), atol=1e-12)
    angle = 0.7
    rotation = np.array([[np.cos(angle), -np.sin(angle), 0.0], [np.sin(angle), np.cos(angle), 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(deformation_tensor(rotation), np.eye(3), atol=1e-12)
    np.testing.assert_allclose(deformation_tensor(np.diag([2.0, 0.5, 1.0])), np.diag([2.0, 0.5, 1.0]), atol=1e-12)


def test_deformation_tensor_eigenvalues_respect_floor():
    rng = np.random.default_rng(2)
    jacobians = rng.normal(size=(1000, 3, 3))
    values, _ = sym_eigen(deformation_tensor(jacobians))
    assert values.min() >= np.sqrt(1e-6) * (1.0 - 1e-9)


def test_log_cases():
    np.testing.assert_allclose(tensor_log(np.eye(3)), np.zeros((3, 3)), atol=1e-15)
    np.testing.assert_allclose(tensor_log(np.diag([np.e, 1.0, 1.0])), np.diag([1.0, 0.0, 0.0]), atol=1e-12)


def test_log_of_non_positive_tensor():
    with pytest.raises(TensorNotPositiveError) as error:
        tensor_log(np.diag([1.0, 1.0, -1.0]))
    assert str(error.value) == "Tensor eigenvalue below the floor reached the matrix logarithm."


def test_exp_log_round_trip():
    rng = np.random.default_rng(7)
    matrices = _random_spd(rng, 10000)
    restored = tensor_exp(tensor_log(matrices))
    relative = np.linalg.norm(restored - matrices, axis=(1, 2)) / np.linalg.norm(matrices, axis=(1, 2))
    assert relative.max() < 1e-8


def test_six_packing_order():
    matrix = np.array([[1.0, 4.0, 5.0], [4.0, 2.0, 6.0], [5.0, 6.0, 3.0]])
    np.testing.assert_array_equal(sym_to_six(matrix), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    np.testing.assert_array_equal(six_to_sym(sym_to_six(matrix)), matrix)


def test_distance_of_equal_tensors():
    log_tensor = tensor_log(np.diag([2.0, 1.5, 0.5]))
    assert log_distance_voxel(log_tensor, log_tensor) == 0.0


def test_isotropic_distance():
    distance = log_distance_voxel(tensor_log(2.0 * np.eye(3)), tensor_log(np.eye(3)))
    assert distance == pytest.approx(np.sqrt(3.0) * np.log(2.0), rel=1e-12)


def test_distance_matches_trace_definition():
    rng = np.random.default_rng(13)
    first, second = _random_symmetric(rng, 2)
    difference = first - second
    assert log_distance_voxel(first, second) == pytest.approx(np.sqrt(np.trace(difference @ difference)), rel=1e-12)


def test_distance_is_rotation_invariant():
    rng = np.random.default_rng(17)
    first, second = _random_symmetric(rng, 2)
    for rotation in _random_rotations(rng, 20):
        rotated = log_distance_voxel(rotation @ first @ rotation.T, rotation @ second @ rotation.T)
        assert rotated == pytest.approx(log_distance_voxel(first, second), abs=1e-10)


def test_metric_axioms():
    rng = np.random.default_rng(19)
    a, b, c = (sym_to_six(_random_symmetric(rng, 10000)) for _ in range(3))
    ab = np.sqrt(six_squared_distance(a, b))
    ba = np.sqrt(six_squared_distance(b, a))
    bc = np.sqrt(six_squared_distance(b, c))
    ac = np.sqrt(six_squared_distance(a, c))
    np.testing.assert_array_equal(ab, ba)
    assert np.all(ac <= ab + bc + 1e-12)
    assert np.all(ab >= 0.0)
