"""
Jacobian fields, deformation tensors and the log-Euclidean machinery.

Symmetric 3x3 matrices are stored with six channels in the order
(a11, a22, a33, a12, a13, a23); Jacobians with nine channels, row-major.
All functions accept a single (3, 3) matrix or a batch shaped (..., 3, 3).
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from tensor_grading.volume_core import (
    NonFiniteValueError,
    RoiMask,
    TensorGradingError,
    Volume,
    require_channels,
)

logger = logging.getLogger(__name__)

EIG_FLOOR = 1e-6
DEGENERACY_GAP = 1e-6
SYMMETRY_TOL = 1e-12
JACOBI_MAX_SWEEPS = 50
SIX_ROWS = (0, 1, 2, 0, 0, 1)
SIX_COLS = (0, 1, 2, 1, 2, 2)
DISPLACEMENT_SIGNS = {"minus": 1.0, "plus": -1.0}


class GridTooSmallError(TensorGradingError):
    """
    finite differences need at least two voxels per axis
    """


class AsymmetricMatrixError(TensorGradingError):
    """
    matrix handed to the symmetric eigensolver is not symmetric
    """


class InvalidTensorShapeError(TensorGradingError):
    """
    input is not a (batch of) 3x3 matrix
    """


class TensorNotPositiveError(TensorGradingError):
    """
    eigenvalue below the floor reached the matrix logarithm
    """


class InvalidDisplacementSignError(TensorGradingError):
    """
    unknown displacement convention
    """


@dataclass(frozen=True, eq=False)
class TensorizeResult:
    """
    Log-tensor field of one displacement field, with the number of voxels whose
    Gram eigenvalues had to be clamped.
    """

    log_field: Volume
    clamp_count: int


def sym_to_six(matrices: np.ndarray) -> np.ndarray:
    """
    Pack symmetric matrices into six components.
    """
    matrices = np.asarray(matrices, dtype=np.float64)
    return matrices[..., SIX_ROWS, SIX_COLS]


def six_to_sym(six: np.ndarray) -> np.ndarray:
    """
    Unpack six components into full symmetric matrices.
    """
    six = np.asarray(six, dtype=np.float64)
    matrices = np.empty(six.shape[:-1] + (3, 3))
    matrices[..., SIX_ROWS, SIX_COLS] = six
    matrices[..., SIX_COLS, SIX_ROWS] = six
    return matrices


def six_squared_distance(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """
    Trace((A - B)^2) for six-component symmetric matrices.
    """
    diff = np.asarray(first, dtype=np.float64) - np.asarray(second, dtype=np.float64)
    diagonal = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    off_diagonal = diff[..., 3] * diff[..., 3] + diff[..., 4] * diff[..., 4] + diff[..., 5] * diff[..., 5]
    return diagonal + 2.0 * off_diagonal


def _displacement_sign(disp_sign: str) -> float:
    if disp_sign not in DISPLACEMENT_SIGNS:
        raise InvalidDisplacementSignError("Displacement sign should be 'minus' or 'plus'.")
    return DISPLACEMENT_SIGNS[disp_sign]


def jacobian_field(displacement: Volume, disp_sign: str = "minus") -> Volume:
    """
    J = I - grad(u) per voxel, for the convention that a point x maps to x - u.

    Derivatives are taken in physical units: central differences inside the
    grid, one-sided differences on its faces. With ``disp_sign="plus"`` the
    field is read as x + u and its sign is flipped first.
    """
    require_channels(displacement, 3, "Displacement field")
    if min(displacement.dims) < 2:
        raise GridTooSmallError(f"Displacement field dims {displacement.dims} should be at least 2 along every axis.")
    sign = _displacement_sign(disp_sign)
    disp = sign * displacement.array
    jacobian = np.empty(displacement.dims + (3, 3))
    for row in range(3):
        gradients = np.gradient(disp[..., row], *displacement.spacing, edge_order=1)
        for col in range(3):
            jacobian[..., row, col] = (1.0 if row == col else 0.0) - gradients[col]
    return Volume.from_array(jacobian.reshape(displacement.dims + (9,)), spacing=displacement.spacing)


def _as_matrix_batch(matrices: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    values = np.asarray(matrices, dtype=np.float64)
    if values.ndim < 2 or values.shape[-2:] != (3, 3):
        raise InvalidTensorShapeError("Expected 3x3 matrices.")
    if not np.isfinite(values).all():
        raise NonFiniteValueError("Matrices contain non-finite values.")
    return values.reshape(-1, 3, 3), values.shape[:-2]


def _null_vector(matrices: np.ndarray, eigenvalues: np.ndarray) -> np.ndarray:
    shifted = matrices - eigenvalues[:, np.newaxis, np.newaxis] * np.eye(3)
    candidates = np.stack(
        [
            np.cross(shifted[:, 0], shifted[:, 1]),
            np.cross(shifted[:, 0], shifted[:, 2]),
            np.cross(shifted[:, 1], shifted[:, 2]),
        ],
        axis=1,
    )
    norms = np.linalg.norm(candidates, axis=2)
    best = np.argmax(norms, axis=1)
    rows = np.arange(len(matrices))
    vectors = candidates[rows, best]
    length = norms[rows, best]
    return vectors / np.where(length > 0, length, 1.0)[:, np.newaxis]


def _closed_form_eigen(matrices: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = np.trace(matrices, axis1=1, axis2=2) / 3.0
    p1 = matrices[:, 0, 1] ** 2 + matrices[:, 0, 2] ** 2 + matrices[:, 1, 2] ** 2
    centred = np.diagonal(matrices, axis1=1, axis2=2) - q[:, np.newaxis]
    p = np.sqrt(((centred**2).sum(axis=1) + 2.0 * p1) / 6.0)
    safe_p = np.where(p > 0, p, 1.0)
    shifted = (matrices - q[:, np.newaxis, np.newaxis] * np.eye(3)) / safe_p[:, np.newaxis, np.newaxis]
    half_det = np.clip(np.linalg.det(shifted) / 2.0, -1.0, 1.0)
    angle = np.arccos(half_det) / 3.0
    largest = q + 2.0 * p * np.cos(angle)
    smallest = q + 2.0 * p * np.cos(angle + 2.0 * np.pi / 3.0)
    middle = 3.0 * q - largest - smallest

    scale = np.maximum(np.abs(largest), np.abs(smallest))
    gap = np.minimum(largest - middle, middle - smallest)
    degenerate = ~(gap > DEGENERACY_GAP * scale)

    first = _null_vector(matrices, largest)
    third = _null_vector(matrices, smallest)
    third = third - np.sum(third * first, axis=1)[:, np.newaxis] * first
    third_norm = np.linalg.norm(third, axis=1)
    third = third / np.where(third_norm > 0, third_norm, 1.0)[:, np.newaxis]
    second = np.cross(third, first)
    vectors = np.stack([first, second, third], axis=2)
    # Rayleigh quotients
    values = np.einsum("nik,nij,njk->nk", vectors, matrices, vectors)
    return values, vectors, degenerate


def _jacobi_eigen(matrices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    work = matrices.copy()
    count = len(work)
    vectors = np.broadcast_to(np.eye(3), (count, 3, 3)).copy()
    threshold = (np.finfo(np.float64).eps * np.abs(work).max(axis=(1, 2))) ** 2
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        for _ in range(JACOBI_MAX_SWEEPS):
            off = work[:, 0, 1] ** 2 + work[:, 0, 2] ** 2 + work[:, 1, 2] ** 2
            if np.all(off <= threshold):
                break
            for p, q in ((0, 1), (0, 2), (1, 2)):
                apq = work[:, p, q]
                active = apq != 0.0
                theta = (work[:, q, q] - work[:, p, p]) / (2.0 * np.where(active, apq, 1.0))
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(active & np.isfinite(t), t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rotation = np.broadcast_to(np.eye(3), (count, 3, 3)).copy()
                rotation[:, p, p] = c
                rotation[:, q, q] = c
                rotation[:, p, q] = s
                rotation[:, q, p] = -s
                work = rotation.transpose(0, 2, 1) @ work @ rotation
                work = 0.5 * (work + work.transpose(0, 2, 1))
                work[:, p, q] = np.where(active, 0.0, work[:, p, q])
                work[:, q, p] = work[:, p, q]
                vectors = vectors @ rotation
    return np.diagonal(work, axis1=1, axis2=2).copy(), vectors


def sym_eigen(matrices: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigen-decomposition of symmetric 3x3 matrices.

    Returns eigenvalues sorted descending (..., 3) and orthonormal eigenvectors
    as the columns of (..., 3, 3). The closed-form trigonometric solution is used
    unless two eigenvalues are within a relative gap of 1e-6, in which case the
    matrix goes through cyclic Jacobi rotations instead.
    """
    batch, batch_shape = _as_matrix_batch(matrices)
    if batch.size and np.abs(batch - batch.transpose(0, 2, 1)).max() > SYMMETRY_TOL:
        raise AsymmetricMatrixError("Matrix should be symmetric within 1e-12.")
    batch = 0.5 * (batch + batch.transpose(0, 2, 1))
    with np.errstate(invalid="ignore", divide="ignore"):
        values, vectors, degenerate = _closed_form_eigen(batch)
    if degenerate.any():
        values[degenerate], vectors[degenerate] = _jacobi_eigen(batch[degenerate])
    order = np.argsort(-values, axis=1, kind="stable")
    values = np.take_along_axis(values, order, axis=1)
    vectors = np.take_along_axis(vectors, order[:, np.newaxis, :], axis=2)
    return values.reshape(batch_shape + (3,)), vectors.reshape(batch_shape + (3, 3))


def _reassemble(vectors: np.ndarray, values: np.ndarray) -> np.ndarray:
    matrices = (vectors * values[..., np.newaxis, :]) @ np.swapaxes(vectors, -1, -2)
    return 0.5 * (matrices + np.swapaxes(matrices, -1, -2))


def _gram_root(jacobian: np.ndarray, eig_floor: float) -> Tuple[np.ndarray, np.ndarray]:
    jac = np.asarray(jacobian, dtype=np.float64)
    gram = np.swapaxes(jac, -1, -2) @ jac
    gram = 0.5 * (gram + np.swapaxes(gram, -1, -2))
    values, vectors = sym_eigen(gram)
    clamped = (values < eig_floor).any(axis=-1)
    return _reassemble(vectors, np.sqrt(np.maximum(values, eig_floor))), clamped


def deformation_tensor(jacobian: np.ndarray, eig_floor: float = EIG_FLOOR) -> np.ndarray:
    """
    Phi = sqrt(J^T J), the SPD square root, with Gram eigenvalues clamped at eig_floor.
    """
    phi, _ = _gram_root(jacobian, eig_floor)
    return phi


def tensor_log(phi: np.ndarray, eig_floor: float = EIG_FLOOR) -> np.ndarray:
    """
    Matrix logarithm of SPD matrices through their eigen-decomposition.
    """
    values, vectors = sym_eigen(phi)
    if np.any(values < eig_floor * (1.0 - 1e-9)):
        raise TensorNotPositiveError("Tensor eigenvalue below the floor reached the matrix logarithm.")
    return _reassemble(vectors, np.log(values))


def tensor_exp(log_phi: np.ndarray) -> np.ndarray:
    """
    Matrix exponential of symmetric matrices.
    """
    values, vectors = sym_eigen(log_phi)
    return _reassemble(vectors, np.exp(values))


def log_distance_voxel(first: np.ndarray, second: np.ndarray) -> float:
    """
    Trace((L1 - L2)^2)^(1/2), the log-Euclidean distance of two log-tensors.
    """
    return float(np.sqrt(six_squared_distance(sym_to_six(first), sym_to_six(second))))


def log_tensor_field(
    displacement: Volume, disp_sign: str = "minus", eig_floor: float = EIG_FLOOR
) -> TensorizeResult:
    """
    Displacement field to log-deformation-tensor field (six channels).
    """
    jacobian = jacobian_field(displacement, disp_sign=disp_sign)
    phi, clamped = _gram_root(jacobian.array.reshape(-1, 3, 3), eig_floor)
    logs = sym_to_six(tensor_log(phi, eig_floor)).reshape(displacement.dims + (6,))
    clamp_count = int(np.count_nonzero(clamped))
    if clamp_count:
        logger.warning("%d voxels had Gram eigenvalues clamped at %g", clamp_count, eig_floor)
    return TensorizeResult(log_field=Volume.from_array(logs, spacing=displacement.spacing), clamp_count=clamp_count)


def structure_volume(jacobian: Volume, mask: RoiMask) -> float:
    """
    Deformed volume of a structure in mm^3: sum of det J over the mask times the voxel volume.
    """
    require_channels(jacobian, 9, "Jacobian field")
    mask.check_dims(jacobian.dims, "Jacobian field")
    matrices = jacobian.array[mask.occupancy].reshape(-1, 3, 3)
    return float(np.linalg.det(matrices).sum() * jacobian.voxel_volume)
