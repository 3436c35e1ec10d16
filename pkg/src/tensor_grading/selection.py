"""
Elastic-net selection of discriminative voxels and global tensor grading.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from tensor_grading.grading import GradingMap
from tensor_grading.volume_core import (
    DimensionMismatchError,
    NonFiniteValueError,
    TensorGradingError,
    Volume,
    save_volume,
)

logger = logging.getLogger(__name__)

DEFAULT_RHO = 0.2
DEFAULT_LAMBDA = 0.09
DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 10000
KKT_TOL = 1e-6
DENOMINATOR_FLOOR = 1e-12
CONVENTIONS = ("magnitude", "literal")


class DesignMatrixError(TensorGradingError):
    """
    design matrix shape, labels or values invalid
    """


class InvalidPenaltyError(TensorGradingError):
    """
    penalties and tolerances must be nonnegative
    """


class VoxelIndexMismatchError(TensorGradingError):
    """
    coefficient voxels do not line up with the grading map
    """


class ZeroCoefficientError(TensorGradingError):
    """
    all coefficients are zero
    """


class LiteralDenominatorError(TensorGradingError):
    """
    signed coefficient sum vanishes
    """


class InvalidConventionError(TensorGradingError):
    """
    unknown global grading convention
    """


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """
    Template grades G (templates x voxels) with labels Y and the voxel of each column.
    """

    grades: np.ndarray
    labels: np.ndarray
    voxel_index: np.ndarray
    dims: Tuple[int, int, int]

    def __post_init__(self) -> None:
        grades = np.array(self.grades, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.float64).reshape(-1)
        voxel_index = np.array(self.voxel_index, dtype=np.int64).reshape(-1, 3)
        dims = tuple(int(n) for n in self.dims)
        if grades.ndim != 2 or grades.size == 0:
            raise DesignMatrixError("Design matrix should be a nonempty 2-D array.")
        if not np.isfinite(grades).all():
            raise NonFiniteValueError("Design matrix contains non-finite values.")
        if np.abs(grades).max() > 1.0:
            raise DesignMatrixError("Design matrix grades should lie in [-1, 1].")
        if labels.shape[0] != grades.shape[0]:
            raise DesignMatrixError(f"Design matrix has {grades.shape[0]} rows but {labels.shape[0]} labels.")
        if not np.isin(labels, (-1.0, 1.0)).all():
            raise DesignMatrixError("Design matrix labels should be -1 or +1.")
        if voxel_index.shape[0] != grades.shape[1]:
            raise DesignMatrixError(
                f"Design matrix has {grades.shape[1]} columns but {voxel_index.shape[0]} voxel indices."
            )
        if (voxel_index < 0).any() or (voxel_index >= np.array(dims)).any():
            raise DesignMatrixError(f"Voxel indices fall outside dims {dims}.")
        if np.unique(voxel_index, axis=0).shape[0] != voxel_index.shape[0]:
            raise DesignMatrixError("Voxel indices should be unique.")
        for array in (grades, labels, voxel_index):
            array.flags.writeable = False
        object.__setattr__(self, "grades", grades)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "voxel_index", voxel_index)
        object.__setattr__(self, "dims", dims)

    @property
    def shape(self) -> Tuple[int, int]:
        """
        (templates, voxels)
        """
        return self.grades.shape

    @classmethod
    def from_grading_maps(cls, maps: Sequence[GradingMap], labels: Sequence[float]) -> "DesignMatrix":
        """
        Stack template grading maps, columns in ``numpy.argwhere`` order of the shared mask.
        """
        if not maps:
            raise DesignMatrixError("Design matrix needs at least one grading map.")
        roi = maps[0].roi
        for grading in maps[1:]:
            roi.check_dims(grading.roi.dims, "Grading map")
            if not np.array_equal(grading.roi.occupancy, roi.occupancy):
                raise DesignMatrixError("Grading maps should share one ROI mask.")
        grades = np.stack([grading.in_mask() for grading in maps])
        return cls(grades=grades, labels=labels, voxel_index=np.argwhere(roi.occupancy), dims=roi.dims)


@dataclass(frozen=True, eq=False)
class CoefficientMap:
    """
    Elastic-net coefficients per selected voxel, with the solver trace.

    * converged: whether the sweep change and the KKT residual both met their tolerances
    * objective_history: objective after every sweep, starting at beta = 0
    """

    beta: np.ndarray
    voxel_index: np.ndarray
    dims: Tuple[int, int, int]
    rho: float
    lam: float
    nonneg: bool
    converged: bool
    n_sweeps: int
    objective_history: Tuple[float, ...]
    kkt: float

    @property
    def nonzero(self) -> np.ndarray:
        """
        Column positions of the nonzero coefficients.
        """
        return np.flatnonzero(self.beta)

    def to_volume(self, spacing: Tuple[float, float, float]) -> Volume:
        """
        Scalar volume holding each coefficient at its voxel, 0 elsewhere.
        """
        values = np.zeros(self.dims)
        values[tuple(self.voxel_index.T)] = self.beta
        return Volume.from_array(values, spacing=spacing)

    def to_frame(self) -> pd.DataFrame:
        """
        Nonzero coefficients with their voxel indices.
        """
        selected = self.nonzero
        frame = pd.DataFrame(self.voxel_index[selected], columns=["voxel_x", "voxel_y", "voxel_z"])
        frame["beta"] = self.beta[selected]
        return frame


@dataclass(frozen=True)
class GlobalGrading:
    """
    Global tensor grading under the chosen convention, with the signed-sum value when defined.
    """

    value: float
    literal: Optional[float]


def _check_penalties(rho: float, lam: float, tol: float, max_iter: int) -> None:
    if rho < 0 or lam < 0 or not np.isfinite(rho) or not np.isfinite(lam):
        raise InvalidPenaltyError("Penalties rho and lambda should be nonnegative.")
    if tol <= 0 or max_iter < 1:
        raise InvalidPenaltyError("Tolerance should be positive and max_iter at least 1.")


def objective(grades: np.ndarray, labels: np.ndarray, beta: np.ndarray, rho: float, lam: float) -> float:
    """
    1/2 ||Y - G beta||^2 + rho ||beta||^2 + lambda ||beta||_1
    """
    residual = labels - grades @ beta
    return float(0.5 * residual @ residual + rho * beta @ beta + lam * np.abs(beta).sum())


def kkt_residual(
    grades: np.ndarray, labels: np.ndarray, beta: np.ndarray, rho: float, lam: float, nonneg: bool = False
) -> float:
    """
    Largest violation of the optimality conditions at beta.

    For a nonzero coefficient the smooth gradient must equal -lambda sign(beta);
    for a zero one it must lie in [-lambda, lambda] ([-lambda, inf) when nonnegative).
    """
    gradient = grades.T @ (grades @ beta - labels) + 2.0 * rho * beta
    active = beta != 0
    violation = np.zeros_like(gradient)
    violation[active] = np.abs(gradient[active] + lam * np.sign(beta[active]))
    if nonneg:
        violation[~active] = np.maximum(-gradient[~active] - lam, 0.0)
    else:
        violation[~active] = np.maximum(np.abs(gradient[~active]) - lam, 0.0)
    return float(violation.max()) if violation.size else 0.0


def _shrink(value: float, lam: float, nonneg: bool) -> float:
    if nonneg:
        return max(value - lam, 0.0)
    if value > lam:
        return value - lam
    if value < -lam:
        return value + lam
    return 0.0


def elastic_net_fit(
    design: DesignMatrix,
    labels: Optional[np.ndarray] = None,
    rho: float = DEFAULT_RHO,
    lam: float = DEFAULT_LAMBDA,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    nonneg: bool = False,
) -> CoefficientMap:
    """
    Minimize 1/2 ||Y - G beta||^2 + rho ||beta||^2 + lambda ||beta||_1 by cyclic coordinate descent.

    Sweeps alternate between the full coordinate set and the currently active set;
    a run converges when a full sweep moves no coefficient by more than ``tol`` and
    the KKT residual is below 1e-6 (1 + ||Y||). ``labels`` defaults to the design labels.
    With ``nonneg`` every coefficient is constrained to be >= 0.
    """
    _check_penalties(rho, lam, tol, max_iter)
    grades = np.asfortranarray(design.grades)
    targets = design.labels if labels is None else np.asarray(labels, dtype=np.float64).reshape(-1)
    if targets.shape[0] != grades.shape[0]:
        raise DimensionMismatchError(f"Design matrix has {grades.shape[0]} rows but {targets.shape[0]} labels.")
    n_columns = grades.shape[1]
    column_norms = np.einsum("ij,ij->j", grades, grades)
    denominators = column_norms + 2.0 * rho
    kkt_tol = KKT_TOL * (1.0 + float(np.linalg.norm(targets)))

    beta = np.zeros(n_columns)
    residual = targets.copy()
    history: List[float] = [objective(grades, targets, beta, rho, lam)]
    converged = False
    active_only = False
    sweeps = 0
    kkt = float("inf")
    while sweeps < max_iter:
        coordinates = np.flatnonzero(beta) if active_only else range(n_columns)
        max_change = 0.0
        for j in coordinates:
            if denominators[j] <= 0.0:
                continue
            column = grades[:, j]
            previous = beta[j]
            updated = _shrink(column @ residual + column_norms[j] * previous, lam, nonneg) / denominators[j]
            if updated != previous:
                residual -= column * (updated - previous)
                beta[j] = updated
                max_change = max(max_change, abs(updated - previous))
        sweeps += 1
        residual = targets - grades @ beta
        history.append(float(0.5 * residual @ residual + rho * beta @ beta + lam * np.abs(beta).sum()))
        if active_only:
            active_only = max_change >= tol
            continue
        if max_change < tol:
            kkt = kkt_residual(grades, targets, beta, rho, lam, nonneg)
            if kkt <= kkt_tol:
                converged = True
                break
        else:
            active_only = bool(np.any(beta))
    if not converged:
        kkt = kkt_residual(grades, targets, beta, rho, lam, nonneg)
        logger.warning("elastic net stopped after %d sweeps without converging (KKT residual %.3g)", sweeps, kkt)
    logger.info("elastic net selected %d of %d voxels in %d sweeps", np.count_nonzero(beta), n_columns, sweeps)
    return CoefficientMap(
        beta=beta,
        voxel_index=design.voxel_index,
        dims=design.dims,
        rho=rho,
        lam=lam,
        nonneg=nonneg,
        converged=converged,
        n_sweeps=sweeps,
        objective_history=tuple(history),
        kkt=kkt,
    )


def global_grading(grading: GradingMap, coefficients: CoefficientMap, convention: str = "magnitude") -> GlobalGrading:
    """
    Coefficient-weighted average of a subject's grading map.

    The "magnitude" convention divides by sum |beta|; "literal" divides by the
    signed sum and fails when that sum vanishes.
    """
    if convention not in CONVENTIONS:
        raise InvalidConventionError("Global grading convention should be 'magnitude' or 'literal'.")
    grading.roi.check_dims(coefficients.dims, "Coefficient map")
    grades = grading.values[tuple(coefficients.voxel_index.T)]
    beta = coefficients.beta
    selected = beta != 0
    if not np.isfinite(grades[selected]).all():
        raise VoxelIndexMismatchError("Selected coefficient voxels fall outside the graded region.")
    magnitude = float(np.abs(beta).sum())
    if magnitude == 0.0:
        raise ZeroCoefficientError("All elastic-net coefficients are zero; lambda is too large.")
    weighted = float(beta[selected] @ grades[selected])
    signed = float(beta.sum())
    literal = weighted / signed if abs(signed) > DENOMINATOR_FLOOR else None
    if convention == "literal":
        if literal is None:
            raise LiteralDenominatorError("Coefficient sum vanishes; the literal global grading is undefined.")
        return GlobalGrading(value=literal, literal=literal)
    return GlobalGrading(value=weighted / magnitude, literal=literal)


def save_coefficient_map(coefficients: CoefficientMap, path: str | Path, spacing: Tuple[float, float, float]) -> None:
    """
    Write the coefficient volume and a CSV of the nonzero coefficients next to it.
    """
    path = Path(path)
    save_volume(coefficients.to_volume(spacing), path)
    coefficients.to_frame().to_csv(path.parent / f"{path.stem}.csv", index=False)
