"""
Linear SVM classification of subjects and repeated stratified evaluation.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold, StratifiedShuffleSplit
from sklearn.preprocessing import StandardScaler

from tensor_grading.volume_core import NonFiniteValueError, TensorGradingError

logger = logging.getLogger(__name__)

DEFAULT_C = 1.0
DEFAULT_N_ITER = 100
DEFAULT_TEST_FRACTION = 0.2
SMO_TOL = 1e-10
SMO_MAX_ITER = 100000
METRICS = ("ACC", "SEN", "SPE")
COUNT_COLUMNS = ("TP", "TN", "FP", "FN")


class SingleClassError(TensorGradingError):
    """
    training data with one class only
    """


class FeatureDimensionError(TensorGradingError):
    """
    feature vector length differs from the model
    """


class InvalidFeatureTableError(TensorGradingError):
    """
    feature table columns or labels invalid
    """


class DuplicateSubjectError(TensorGradingError):
    """
    subject listed twice in a feature table
    """


class InvalidConfusionError(TensorGradingError):
    """
    negative confusion counts
    """


class EmptyConfusionError(TensorGradingError):
    """
    confusion counts all zero
    """


class ClassTooSmallError(TensorGradingError):
    """
    class too small to stratify
    """


class InvalidSplitError(TensorGradingError):
    """
    test fraction, fold count or iteration count invalid
    """


class InvalidSoftMarginError(TensorGradingError):
    """
    SVM penalty C not positive
    """


@dataclass(frozen=True, eq=False)
class LinearSvmModel:
    """
    Soft-margin linear SVM f(x) = w.x + b.

    * alpha: dual variables of the training examples, in [0, C]
    * duality_gap: primal minus dual objective at the returned solution
    """

    w: np.ndarray
    b: float
    alpha: np.ndarray
    C: float
    duality_gap: float

    def decision_function(self, features: np.ndarray) -> np.ndarray:
        """
        Signed scores w.x + b of one vector or a batch.
        """
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.w.shape[0]:
            raise FeatureDimensionError(
                f"Feature vector has {features.shape[-1]} dimensions, the model expects {self.w.shape[0]}."
            )
        return np.sum(features * self.w, axis=-1) + self.b


@dataclass(frozen=True)
class ClassificationMetrics:
    """
    Percentages; sensitivity or specificity is None when its class is absent.
    """

    accuracy: float
    sensitivity: Optional[float]
    specificity: Optional[float]


def _training_arrays(features: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, np.newaxis]
    labels = np.asarray(labels, dtype=np.float64).reshape(-1)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise FeatureDimensionError(f"Got {features.shape[0]} feature rows for {labels.shape[0]} labels.")
    if not np.isfinite(features).all():
        raise NonFiniteValueError("Features contain non-finite values.")
    if not np.isin(labels, (-1.0, 1.0)).all():
        raise InvalidFeatureTableError("Class labels should be -1 or +1.")
    if np.unique(labels).size < 2:
        raise SingleClassError("SVM training needs examples of both classes.")
    return features, labels


def svm_train(
    features: np.ndarray, labels: np.ndarray, C: float = DEFAULT_C, tol: float = SMO_TOL, max_iter: int = SMO_MAX_ITER
) -> LinearSvmModel:
    """
    Solve the soft-margin dual by SMO with maximal-violating-pair selection.

    Each step picks i = argmax_{I_up} -y G and j = argmin_{I_low} -y G over the
    dual gradient G = Q alpha - 1 and moves along the pair direction as far as the
    box [0, C] allows; it stops when the violation m - M drops below ``tol``.
    """
    if C <= 0:
        raise InvalidSoftMarginError("SVM penalty C should be positive.")
    features, labels = _training_arrays(features, labels)
    kernel = features @ features.T
    hessian = labels[:, np.newaxis] * labels[np.newaxis, :] * kernel
    alpha = np.zeros(labels.shape[0])
    gradient = -np.ones(labels.shape[0])
    upper = lower = 0.0
    for _ in range(max_iter):
        score = -labels * gradient
        up = ((labels > 0) & (alpha < C)) | ((labels < 0) & (alpha > 0))
        low = ((labels > 0) & (alpha > 0)) | ((labels < 0) & (alpha < C))
        i = int(np.argmax(np.where(up, score, -np.inf)))
        j = int(np.argmin(np.where(low, score, np.inf)))
        upper, lower = score[i], score[j]
        if upper - lower < tol:
            break
        curvature = max(kernel[i, i] + kernel[j, j] - 2.0 * kernel[i, j], 1e-12)
        bound_i = C - alpha[i] if labels[i] > 0 else alpha[i]
        bound_j = alpha[j] if labels[j] > 0 else C - alpha[j]
        step = min((upper - lower) / curvature, bound_i, bound_j)
        alpha[i] = np.clip(alpha[i] + labels[i] * step, 0.0, C)
        alpha[j] = np.clip(alpha[j] - labels[j] * step, 0.0, C)
        gradient += step * (labels[i] * hessian[:, i] - labels[j] * hessian[:, j])
    else:
        logger.warning("SMO stopped after %d iterations with violation %.3g", max_iter, upper - lower)

    w = features.T @ (alpha * labels)
    free = (alpha > 0) & (alpha < C)
    if free.any():
        b = float(np.mean(labels[free] - features[free] @ w))
    else:
        b = float((upper + lower) / 2.0)
    hinge = np.maximum(0.0, 1.0 - labels * (features @ w + b))
    primal = 0.5 * w @ w + C * hinge.sum()
    dual = alpha.sum() - 0.5 * w @ w
    return LinearSvmModel(w=w, b=b, alpha=alpha, C=C, duality_gap=float(primal - dual))


def svm_predict(model: LinearSvmModel, features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Labels and scores for one vector or a batch; a zero score counts as +1.
    """
    scores = model.decision_function(features)
    return np.where(scores >= 0.0, 1, -1), scores


def metrics(tp: int, tn: int, fp: int, fn: int) -> ClassificationMetrics:
    """
    Accuracy, sensitivity and specificity in percent from confusion counts.
    """
    if min(tp, tn, fp, fn) < 0:
        raise InvalidConfusionError("Confusion counts should be nonnegative.")
    total = tp + tn + fp + fn
    if total == 0:
        raise EmptyConfusionError("Confusion counts should not all be zero.")
    sensitivity = 100.0 * tp / (tp + fn) if tp + fn else None
    specificity = 100.0 * tn / (tn + fp) if tn + fp else None
    return ClassificationMetrics(
        accuracy=100.0 * (tp + tn) / total, sensitivity=sensitivity, specificity=specificity
    )


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """
    One row per subject: subject_id, label (+1 pre-manifest, -1 control) and feature columns.
    """

    frame: pd.DataFrame
    feature_columns: Tuple[str, ...]

    def __post_init__(self) -> None:
        columns = tuple(self.feature_columns)
        if not 1 <= len(columns) <= 2:
            raise InvalidFeatureTableError("Feature tables hold one or two feature columns.")
        missing = [name for name in ("subject_id", "label") + columns if name not in self.frame.columns]
        if missing:
            raise InvalidFeatureTableError(f"Feature table misses column '{missing[0]}'.")
        frame = self.frame.loc[:, ["subject_id", "label", *columns]].reset_index(drop=True)
        duplicated = frame["subject_id"][frame["subject_id"].duplicated()]
        if not duplicated.empty:
            raise DuplicateSubjectError(f"Subject {duplicated.iloc[0]} appears more than once in the feature table.")
        if not frame["label"].isin([-1, 1]).all():
            raise InvalidFeatureTableError("Feature table labels should be -1 or +1.")
        values = frame.loc[:, list(columns)].to_numpy(dtype=np.float64)
        if not np.isfinite(values).all():
            raise NonFiniteValueError("Feature table contains non-finite values.")
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "feature_columns", columns)

    @property
    def features(self) -> np.ndarray:
        """
        (subjects, features) array.
        """
        return self.frame.loc[:, list(self.feature_columns)].to_numpy(dtype=np.float64)

    @property
    def labels(self) -> np.ndarray:
        """
        Labels as an integer array.
        """
        return self.frame["label"].to_numpy(dtype=np.int64)

    def select(self, columns: Sequence[str]) -> "FeatureTable":
        """
        Same subjects restricted to other feature columns.
        """
        return FeatureTable(frame=self.frame, feature_columns=tuple(columns))


def load_feature_table(path: str | Path, feature_columns: Sequence[str]) -> FeatureTable:
    """
    Read a feature table from CSV or parquet.
    """
    path = Path(path)
    try:
        if path.suffix == ".parquet":
            frame = pd.read_parquet(path)
        else:
            frame = pd.read_csv(path, dtype={"subject_id": str})
    except (OSError, ValueError) as exc:
        raise InvalidFeatureTableError(f"Cannot read feature table {path}.") from exc
    return FeatureTable(frame=frame, feature_columns=tuple(feature_columns))


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    """
    Per-iteration confusion counts and metrics of a repeated evaluation.
    """

    iterations: pd.DataFrame
    config: Dict[str, object] = field(default_factory=dict)

    def summary(self) -> Dict[str, Dict[str, Optional[float]]]:
        """
        Mean, standard deviation and standard error of each metric over iterations.
        """
        result = {}
        for metric in METRICS:
            values = self.iterations[metric].dropna().to_numpy(dtype=np.float64)
            if values.size == 0:
                result[metric] = {"mean": None, "sd": None, "sem": None}
                continue
            sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
            result[metric] = {"mean": float(values.mean()), "sd": sd, "sem": sd / float(np.sqrt(values.size))}
        return result

    def totals(self) -> Dict[str, int]:
        """
        Confusion counts summed over iterations.
        """
        return {name: int(self.iterations[name].sum()) for name in COUNT_COLUMNS}

    def to_frame(self) -> pd.DataFrame:
        """
        One row per metric with mean, sd and sem.
        """
        frame = pd.DataFrame.from_dict(self.summary(), orient="index")
        frame.index.name = "metric"
        return frame

    def to_dict(self) -> Dict[str, object]:
        """
        JSON-ready report.
        """
        iterations = self.iterations.astype(object).where(self.iterations.notna(), None)
        return {
            "config": self.config,
            "summary": self.summary(),
            "totals": self.totals(),
            "iterations": iterations.to_dict(orient="records"),
        }

    def save(self, path: str | Path) -> None:
        """
        Write ``<path>.json`` with the full report and ``<path>.csv`` with the iterations.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        self.iterations.to_csv(path.with_suffix(".csv"), index=False)


def _iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def _evaluate_split(
    features: np.ndarray, labels: np.ndarray, train: np.ndarray, test: np.ndarray, C: float
) -> np.ndarray:
    scaler = StandardScaler().fit(features[train])
    model = svm_train(scaler.transform(features[train]), labels[train], C=C)
    predicted, _ = svm_predict(model, scaler.transform(features[test]))
    truth = labels[test]
    return np.array(
        [
            np.sum((predicted == 1) & (truth == 1)),
            np.sum((predicted == -1) & (truth == -1)),
            np.sum((predicted == 1) & (truth == -1)),
            np.sum((predicted == -1) & (truth == 1)),
        ],
        dtype=np.int64,
    )


def _check_split(labels: np.ndarray, n_iter: int, test_fraction: float, n_folds: Optional[int]) -> None:
    if n_iter < 1:
        raise InvalidSplitError("Number of iterations should be at least 1.")
    if n_folds is None and not 0.0 < test_fraction < 1.0:
        raise InvalidSplitError("Test fraction should lie strictly between 0 and 1.")
    if n_folds is not None and n_folds < 2:
        raise InvalidSplitError("Number of folds should be at least 2.")
    minimum = 2 if n_folds is None else n_folds
    for label in (1, -1):
        count = int(np.sum(labels == label))
        if count < minimum:
            raise ClassTooSmallError(f"Class {label:+d} has {count} subjects; at least {minimum} are needed.")
    if n_folds is None:
        n_test = int(np.ceil(test_fraction * labels.size))
        if n_test < 2 or labels.size - n_test < 2:
            raise ClassTooSmallError(f"A test fraction of {test_fraction} leaves a split without both classes.")


def stratified_cv(
    table: FeatureTable,
    n_iter: int = DEFAULT_N_ITER,
    test_fraction: float = DEFAULT_TEST_FRACTION,
    seed: int = 0,
    C: float = DEFAULT_C,
    n_folds: Optional[int] = None,
    threads: int = 1,
    config: Optional[Dict[str, object]] = None,
) -> EvaluationReport:
    """
    Repeated stratified evaluation of a linear SVM on a feature table.

    Every iteration draws one stratified train/test split (or a stratified
    ``n_folds`` partition), standardizes on the training part only, trains and
    tests. Iteration seeds derive from (seed, iteration), so results do not
    depend on ``threads``.
    """
    features, labels = table.features, table.labels
    _check_split(labels, n_iter, test_fraction, n_folds)

    def run(iteration: int) -> np.ndarray:
        random_state = _iteration_seed(seed, iteration)
        if n_folds is None:
            splitter = StratifiedShuffleSplit(n_splits=1, test_size=test_fraction, random_state=random_state)
        else:
            splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=random_state)
        counts = np.zeros(4, dtype=np.int64)
        for train, test in splitter.split(features, labels):
            counts += _evaluate_split(features, labels, train, test, C)
        return counts

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as executor:
        results = list(executor.map(run, range(n_iter)))

    rows = []
    for iteration, (tp, tn, fp, fn) in enumerate(results):
        scores = metrics(int(tp), int(tn), int(fp), int(fn))
        rows.append(
            {
                "iter": iteration,
                "TP": int(tp),
                "TN": int(tn),
                "FP": int(fp),
                "FN": int(fn),
                "ACC": scores.accuracy,
                "SEN": scores.sensitivity,
                "SPE": scores.specificity,
            }
        )
    echo = {
        "features": list(table.feature_columns),
        "n_iter": n_iter,
        "test_fraction": test_fraction,
        "n_folds": n_folds,
        "seed": seed,
        "C": C,
    }
    echo.update(config or {})
    report = EvaluationReport(iterations=pd.DataFrame(rows), config=echo)
    logger.info("features %s: ACC %.1f%%", "+".join(table.feature_columns), report.summary()["ACC"]["mean"])
    return report


def compare_feature_sets(
    frame: pd.DataFrame, feature_sets: Dict[str, List[str]], **kwargs
) -> Tuple[pd.DataFrame, Dict[str, EvaluationReport]]:
    """
    Run stratified_cv for each named feature set on the same subjects and seed.

    Returns one summary row per set (mean and sem of every metric) and the reports.
    """
    reports = {}
    rows = []
    for name, columns in feature_sets.items():
        report = stratified_cv(FeatureTable(frame=frame, feature_columns=tuple(columns)), **kwargs)
        reports[name] = report
        row = {"features": name}
        for metric, stats in report.summary().items():
            row[f"{metric}_mean"] = stats["mean"]
            row[f"{metric}_sem"] = stats["sem"]
        rows.append(row)
    return pd.DataFrame(rows).set_index("features"), reports
