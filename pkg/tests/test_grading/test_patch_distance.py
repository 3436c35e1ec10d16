"""
Tests for patch distances and the similarity-weighted vote
"""

import numpy as np
import pytest

from tensor_grading.grading import (
    CenterOutOfBoundsError,
    InvalidDistanceModeError,
    InvalidRadiusError,
    grade_from_distances,
    patch_distance,
    patch_distance_map,
    patch_offsets,
)
from tensor_grading.tensor_ops import log_distance_voxel, six_to_sym
from tensor_grading.volume_core import DimensionMismatchError, Volume

LN2 = np.log(2.0)


def _constant_field(six, dims=(5, 5, 5)):
    return Volume.from_array(np.broadcast_to(np.asarray(six, dtype=np.float64), dims + (6,)), spacing=(1.0, 1.0, 1.0))


def _random_field(seed, dims=(4, 5, 3)):
    return Volume.from_array(np.random.default_rng(seed).normal(scale=0.1, size=dims + (6,)), spacing=(1.0, 1.0, 1.0))


def test_patch_offsets_order():
    offsets = patch_offsets(1)
    assert len(offsets) == 27
    assert offsets[0] == (-1, -1, -1)
    assert offsets[1] == (-1, -1, 0)
    assert offsets[13] == (0, 0, 0)
    assert patch_offsets(0) == [(0, 0, 0)]


def test_identical_fields():
    field = _random_field(1)
    assert patch_distance(field, field, (2, 2, 1), 1) == 0.0


def test_radius_zero_is_voxel_distance():
    first, second = _random_field(2), _random_field(3)
    expected = log_distance_voxel(six_to_sym(first.array[1, 3, 2]), six_to_sym(second.array[1, 3, 2]))
    assert patch_distance(first, second, (1, 3, 2), 0) == expected


def test_constant_isotropic_fields():
    doubled = _constant_field([LN2, LN2, LN2, 0.0, 0.0, 0.0])
    identity = _constant_field([0.0] * 6)
    assert patch_distance(doubled, identity, (2, 2, 2), 1) == pytest.approx(27 * np.sqrt(3.0) * LN2, rel=1e-12)
    assert patch_distance(doubled, identity, (2, 2, 2), 1) == pytest.approx(32.41, abs=5e-3)


def test_whole_patch_mode():
    doubled = _constant_field([LN2, LN2, LN2, 0.0, 0.0, 0.0])
    identity = _constant_field([0.0] * 6)
    assert patch_distance(doubled, identity, (2, 2, 2), 1, mode="whole-patch") == pytest.approx(9 * LN2, rel=1e-12)


def test_patch_clipped_at_corner():
    doubled = _constant_field([LN2, LN2, LN2, 0.0, 0.0, 0.0])
    identity = _constant_field([0.0] * 6)
    assert patch_distance(doubled, identity, (0, 0, 0), 1) == pytest.approx(8 * np.sqrt(3.0) * LN2, rel=1e-12)


def test_distance_map_matches_pointwise_distances():
    first, second = _random_field(4), _random_field(5)
    for mode in ("per-voxel", "whole-patch"):
        distances = patch_distance_map(first, second, 1, mode)
        for voxel in np.ndindex(*first.dims):
            assert distances[voxel] == patch_distance(first, second, voxel, 1, mode)


def test_distance_is_symmetric():
    first, second = _random_field(6), _random_field(7)
    np.testing.assert_array_equal(patch_distance_map(first, second, 2), patch_distance_map(second, first, 2))


def test_center_out_of_bounds():
    field = _random_field(8)
    with pytest.raises(CenterOutOfBoundsError) as error:
        patch_distance(field, field, (4, 0, 0), 1)
    assert str(error.value) == "Patch center (4, 0, 0) is outside dims (4, 5, 3)."


def test_dims_mismatch():
    with pytest.raises(DimensionMismatchError) as error:
        patch_distance(_random_field(9), _random_field(9, dims=(4, 5, 4)), (0, 0, 0), 1)
    assert str(error.value) == "Log-tensor field dims (4, 5, 3) and (4, 5, 4) differ."


def test_invalid_radius_and_mode():
    field = _random_field(10)
    with pytest.raises(InvalidRadiusError) as error:
        patch_distance(field, field, (0, 0, 0), -1)
    assert str(error.value) == "Patch radius should be a nonnegative integer."
    with pytest.raises(InvalidDistanceModeError) as error:
        patch_distance(field, field, (0, 0, 0), 1, mode="mean")
    assert str(error.value) == "Distance mode should be 'per-voxel' or 'whole-patch'."


def test_vote_with_one_label():
    grades = grade_from_distances(np.array([[0.3], [1.7], [4.0]]), np.array([1.0, 1.0, 1.0]))
    assert grades[0] == 1.0


def test_vote_with_equal_distances():
    grades = grade_from_distances(np.array([[2.5], [2.5]]), np.array([1.0, -1.0]))
    assert grades[0] == 0.0


def test_vote_at_twice_the_minimum():
    grades = grade_from_distances(np.array([[0.8], [1.6]]), np.array([1.0, -1.0]))
    assert grades[0] == pytest.approx(np.tanh(0.5), rel=1e-12)
    assert grades[0] == pytest.approx(0.46212, abs=1e-5)


def test_vote_with_zero_distance():
    grades = grade_from_distances(np.array([[0.0], [0.5]]), np.array([-1.0, 1.0]))
    assert grades[0] == pytest.approx(-1.0)
    assert -1.0 <= grades[0] <= 1.0


def test_vote_is_scale_invariant():
    distances = np.random.default_rng(11).uniform(0.1, 3.0, size=(6, 40))
    labels = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
    np.testing.assert_allclose(
        grade_from_distances(7.5 * distances, labels), grade_from_distances(distances, labels), atol=1e-12
    )


def test_vote_is_antisymmetric_in_labels():
    distances = np.random.default_rng(12).uniform(0.1, 3.0, size=(5, 30))
    labels = np.array([1.0, 1.0, -1.0, -1.0, 1.0])
    np.testing.assert_array_equal(grade_from_distances(distances, -labels), -grade_from_distances(distances, labels))
