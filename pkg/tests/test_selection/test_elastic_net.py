"""
Tests for the elastic-net coordinate-descent solver
"""

import numpy as np
import pandas as pd
import pytest

from tensor_grading.selection import (
    DesignMatrix,
    InvalidPenaltyError,
    elastic_net_fit,
    kkt_residual,
    objective,
    save_coefficient_map,
)


def _design(seed, rows=12, columns=5, dims=(5, 1, 1)):
    rng = np.random.default_rng(seed)
    grades = rng.uniform(-1.0, 1.0, size=(rows, columns))
    labels = np.where(np.arange(rows) % 2 == 0, 1.0, -1.0)
    voxel_index = [(x, 0, 0) for x in range(columns)]
    return DesignMatrix(grades=grades, labels=labels, voxel_index=voxel_index, dims=dims)


def test_large_lambda_selects_nothing():
    design = _design(1)
    threshold = np.abs(design.grades.T @ design.labels).max()
    fit = elastic_net_fit(design, rho=0.2, lam=threshold * 1.01)
    assert not fit.beta.any()
    assert fit.converged
    assert fit.nonzero.size == 0
    assert fit.to_frame().empty


def test_single_column_closed_form():
    rng = np.random.default_rng(2)
    grades = rng.uniform(-1.0, 1.0, size=(8, 1))
    labels = np.array([1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0])
    design = DesignMatrix(grades=grades, labels=labels, voxel_index=[(0, 0, 0)], dims=(1, 1, 1))
    correlation = float(grades[:, 0] @ labels)
    lam = 0.1 * abs(correlation)
    expected = np.sign(correlation) * (abs(correlation) - lam) / (grades[:, 0] @ grades[:, 0] + 0.4)
    fit = elastic_net_fit(design, rho=0.2, lam=lam)
    assert fit.beta[0] == pytest.approx(expected, rel=1e-12)


def test_least_squares_limit():
    design = _design(3, rows=20, columns=4, dims=(4, 1, 1))
    fit = elastic_net_fit(design, rho=0.0, lam=0.0, tol=1e-12, max_iter=100000)
    expected, *_ = np.linalg.lstsq(design.grades, design.labels, rcond=None)
    np.testing.assert_allclose(fit.beta, expected, atol=1e-6)


def test_ridge_limit():
    design = _design(4)
    rho = 0.5
    fit = elastic_net_fit(design, rho=rho, lam=0.0, tol=1e-12)
    gram = design.grades.T @ design.grades + 2.0 * rho * np.eye(5)
    np.testing.assert_allclose(fit.beta, np.linalg.solve(gram, design.grades.T @ design.labels), atol=1e-8)


def test_converged_fit_satisfies_optimality():
    design = _design(5, rows=30, columns=12, dims=(3, 4, 1))
    fit = elastic_net_fit(design, rho=0.2, lam=0.5)
    assert fit.converged
    assert fit.kkt == pytest.approx(kkt_residual(design.grades, design.labels, fit.beta, 0.2, 0.5), abs=1e-12)
    assert fit.kkt <= 1e-6 * (1.0 + np.linalg.norm(design.labels))


def test_objective_never_increases():
    design = _design(6, rows=25, columns=15, dims=(15, 1, 1))
    fit = elastic_net_fit(design, rho=0.2, lam=0.3)
    history = np.array(fit.objective_history)
    assert history[0] == objective(design.grades, design.labels, np.zeros(15), 0.2, 0.3)
    assert np.all(np.diff(history) <= 1e-12)
    assert len(history) == fit.n_sweeps + 1


def test_nonnegative_coefficients():
    design = _design(7, rows=30, columns=10, dims=(10, 1, 1))
    fit = elastic_net_fit(design, rho=0.2, lam=0.2, nonneg=True)
    assert fit.converged
    assert np.all(fit.beta >= 0.0)
    assert kkt_residual(design.grades, design.labels, fit.beta, 0.2, 0.2, nonneg=True) <= 1e-6 * (
        1.0 + np.linalg.norm(design.labels)
    )


def test_iteration_cap_is_reported():
    design = _design(8, rows=30, columns=12, dims=(12, 1, 1))
    fit = elastic_net_fit(design, rho=0.2, lam=0.01, max_iter=1)
    assert not fit.converged
    assert fit.n_sweeps == 1


def test_invalid_penalties():
    with pytest.raises(InvalidPenaltyError) as error:
        elastic_net_fit(_design(9), rho=-0.1)
    assert str(error.value) == "Penalties rho and lambda should be nonnegative."
    with pytest.raises(InvalidPenaltyError) as error:
        elastic_net_fit(_design(9), tol=0.0)
    assert str(error.value) == "Tolerance should be positive and max_iter at least 1."


def test_coefficient_outputs(tmp_path):
    design = _design(10, rows=30, columns=5, dims=(5, 1, 1))
    fit = elastic_net_fit(design, rho=0.2, lam=0.05)
    frame = fit.to_frame()
    assert list(frame.columns) == ["voxel_x", "voxel_y", "voxel_z", "beta"]
    np.testing.assert_array_equal(frame[["voxel_x", "voxel_y", "voxel_z"]].to_numpy(), design.voxel_index[fit.nonzero])
    volume = fit.to_volume((1.0, 1.0, 1.0))
    np.testing.assert_array_equal(volume.array[:, 0, 0, 0], fit.beta)
    save_coefficient_map(fit, tmp_path / "coefficients.f32", (1.0, 1.0, 1.0))
    written = pd.read_csv(tmp_path / "coefficients.csv")
    assert list(written.columns) == ["voxel_x", "voxel_y", "voxel_z", "beta"]
    assert len(written) == fit.nonzero.size
    np.testing.assert_allclose(written["beta"].to_numpy(), fit.beta[fit.nonzero], rtol=1e-12)


def test_empty_selection_file(tmp_path):
    design = _design(11)
    fit = elastic_net_fit(design, lam=10.0)
    save_coefficient_map(fit, tmp_path / "coefficients.f32", (1.0, 1.0, 1.0))
    written = pd.read_csv(tmp_path / "coefficients.csv")
    assert written.empty
    assert list(written.columns) == ["voxel_x", "voxel_y", "voxel_z", "beta"]


@pytest.mark.parametrize("seed", [11, 12, 13])
def test_larger_lambda_selects_fewer_voxels(seed):
    design = _design(seed, rows=30, columns=40, dims=(40, 1, 1))
    counts = []
    for lam in (0.01, 0.09, 0.5):
        fit = elastic_net_fit(design, rho=0.2, lam=lam)
        assert fit.converged
        counts.append(fit.nonzero.size)
    assert counts == sorted(counts, reverse=True)
    assert counts[0] > counts[-1]


@pytest.mark.slow
def test_wide_random_problems_converge():
    rng = np.random.default_rng(20)
    for seed in range(50):
        columns = int(rng.integers(100, 2001))
        design = _design(seed, rows=100, columns=columns, dims=(columns, 1, 1))
        fit = elastic_net_fit(design, rho=0.2, lam=0.09)
        assert fit.converged, f"problem {seed} with {columns} columns did not converge"
        assert kkt_residual(design.grades, design.labels, fit.beta, 0.2, 0.09) <= 1e-6 * (
            1.0 + np.linalg.norm(design.labels)
        )
