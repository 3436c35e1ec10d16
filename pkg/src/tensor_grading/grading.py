"""
Template libraries and voxel-wise tensor-based grading.

A subject is compared at every ROI voxel with each template of an age-matched
library of control (+1) and manifest HD (-1) log-tensor fields. Patch
similarities use the log-Euclidean distance summed over a cubic patch, and the
grade is the similarity-weighted vote of the template labels, in [-1, 1].
"""

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from tensor_grading.tensor_ops import six_squared_distance
from tensor_grading.volume_core import (
    DimensionMismatchError,
    RoiMask,
    SubjectMeta,
    TensorGradingError,
    Volume,
    VolumeReadError,
    load_volume,
    require_channels,
    save_volume,
)

logger = logging.getLogger(__name__)

H_FLOOR = 1e-12
DEFAULT_RADIUS = 1
DEFAULT_LEAVE_OUT = 10
DISTANCE_MODES = ("per-voxel", "whole-patch")


class InvalidTemplateLabelError(TensorGradingError):
    """
    templates must be controls (+1) or manifest HD (-1)
    """


class DuplicateTemplateError(TensorGradingError):
    """
    same subject and scan twice in a library
    """


class EmptyLibraryError(TensorGradingError):
    """
    library without templates
    """


class InsufficientTemplatesError(TensorGradingError):
    """
    not enough eligible templates in a class
    """


class CenterOutOfBoundsError(TensorGradingError):
    """
    patch center outside the volume
    """


class VoxelOutsideRoiError(TensorGradingError):
    """
    grading requested outside the ROI
    """


class InvalidRadiusError(TensorGradingError):
    """
    patch radius must be a nonnegative integer
    """


class InvalidDistanceModeError(TensorGradingError):
    """
    unknown patch distance mode
    """


class InvalidLeaveOutError(TensorGradingError):
    """
    leave-out count must be at least 1 and below the library size
    """


class CacheMismatchError(TensorGradingError):
    """
    distance cache built for another radius, mode or ROI
    """


class LibraryManifestError(TensorGradingError):
    """
    library manifest missing or malformed
    """


class LibraryEntryError(TensorGradingError):
    """
    library entry file cannot be read
    """


@dataclass(frozen=True, eq=False)
class LibraryEntry:
    """
    One labeled log-tensor field.
    """

    log_field: Volume
    meta: SubjectMeta

    @property
    def key(self) -> Tuple[str, str]:
        """
        (subject_id, scan_id) of the entry.
        """
        return self.meta.key


@dataclass(frozen=True, eq=False)
class TemplateLibrary:
    """
    Templates a subject is graded against, all on the grid of ``roi``.
    """

    entries: Tuple[LibraryEntry, ...]
    roi: RoiMask

    def __post_init__(self) -> None:
        entries = tuple(self.entries)
        if not entries:
            raise EmptyLibraryError("Template library should contain at least one template.")
        seen = set()
        for entry in entries:
            if entry.meta.label not in (-1, 1):
                raise InvalidTemplateLabelError("Template library entries should be labeled -1 or +1.")
            if entry.key in seen:
                raise DuplicateTemplateError(f"Template {entry.meta.subject_id}/{entry.meta.scan_id} appears twice.")
            seen.add(entry.key)
            require_channels(entry.log_field, 6, "Template log-tensor field")
            self.roi.check_dims(entry.log_field.dims, f"Template {entry.meta.subject_id}/{entry.meta.scan_id}")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        """
        Template labels as floats, in library order.
        """
        return np.array([entry.meta.label for entry in self.entries], dtype=np.float64)

    @property
    def keys(self) -> Tuple[Tuple[str, str], ...]:
        """
        Entry keys in library order.
        """
        return tuple(entry.key for entry in self.entries)

    @property
    def class_counts(self) -> Dict[int, int]:
        """
        Number of templates per label.
        """
        labels = [entry.meta.label for entry in self.entries]
        return {1: labels.count(1), -1: labels.count(-1)}

    def without(self, positions: Iterable[int]) -> "TemplateLibrary":
        """
        Library with the entries at the given positions removed.
        """
        dropped = set(positions)
        kept = tuple(entry for index, entry in enumerate(self.entries) if index not in dropped)
        return TemplateLibrary(entries=kept, roi=self.roi)


@dataclass(frozen=True, eq=False)
class GradingMap:
    """
    Grading values over a ROI grid, NaN outside the mask.
    """

    values: np.ndarray
    roi: RoiMask
    spacing: Tuple[float, float, float]

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        self.roi.check_dims(values.shape, "Grading map")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def in_mask(self) -> np.ndarray:
        """
        Grades of the in-mask voxels in ``numpy.argwhere`` order.
        """
        return self.values[self.roi.occupancy]

    def mean(self) -> float:
        """
        Mean in-mask grade.
        """
        return float(self.in_mask().mean())

    def to_volume(self) -> Volume:
        """
        Scalar volume with 0 outside the mask.
        """
        return Volume.from_array(np.where(self.roi.occupancy, self.values, 0.0), spacing=self.spacing)


class PatchDistanceCache:
    """
    Memoized in-mask patch-distance vectors between pairs of fields.

    Fields are identified by their (subject_id, scan_id) keys; d(a, b) and
    d(b, a) share one slot since the distance is symmetric bit for bit.
    """

    def __init__(self, roi: RoiMask, radius: int, mode: str = "per-voxel") -> None:
        _check_radius(radius)
        _check_mode(mode)
        self.roi = roi
        self.radius = radius
        self.mode = mode
        self._store: Dict[Tuple[Tuple[str, str], Tuple[str, str]], np.ndarray] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._store)

    def distances(
        self, key_a: Tuple[str, str], field_a: Volume, key_b: Tuple[str, str], field_b: Volume
    ) -> np.ndarray:
        """
        In-mask patch distances between two fields, computed once per pair.
        """
        pair = (key_a, key_b) if key_a <= key_b else (key_b, key_a)
        with self._lock:
            cached = self._store.get(pair)
        if cached is None:
            cached = patch_distance_map(field_a, field_b, self.radius, self.mode)[self.roi.occupancy]
            cached.flags.writeable = False
            with self._lock:
                cached = self._store.setdefault(pair, cached)
        return cached


def _check_radius(radius: int) -> None:
    if not isinstance(radius, (int, np.integer)) or radius < 0:
        raise InvalidRadiusError("Patch radius should be a nonnegative integer.")


def _check_mode(mode: str) -> None:
    if mode not in DISTANCE_MODES:
        raise InvalidDistanceModeError("Distance mode should be 'per-voxel' or 'whole-patch'.")


def patch_offsets(radius: int) -> List[Tuple[int, int, int]]:
    """
    Voxel offsets of a cubic patch, in the fixed summation order used everywhere.
    """
    _check_radius(radius)
    return list(product(range(-radius, radius + 1), repeat=3))


def _voxel_terms(first: np.ndarray, second: np.ndarray, mode: str) -> np.ndarray:
    squared = six_squared_distance(first, second)
    return np.sqrt(squared) if mode == "per-voxel" else squared


def _check_pair(first: Volume, second: Volume) -> None:
    require_channels(first, 6, "Log-tensor field")
    require_channels(second, 6, "Log-tensor field")
    if first.dims != second.dims:
        raise DimensionMismatchError(f"Log-tensor field dims {first.dims} and {second.dims} differ.")


def patch_distance_map(first: Volume, second: Volume, radius: int, mode: str = "per-voxel") -> np.ndarray:
    """
    Patch distance centred at every voxel of two log-tensor fields.

    Patches are clipped at the volume faces, identically for both fields.
    """
    _check_pair(first, second)
    _check_mode(mode)
    terms = _voxel_terms(first.array, second.array, mode)
    padded = np.pad(terms, radius)
    nx, ny, nz = terms.shape
    total = np.zeros(terms.shape)
    for dx, dy, dz in patch_offsets(radius):
        total += padded[radius + dx : radius + dx + nx, radius + dy : radius + dy + ny, radius + dz : radius + dz + nz]
    return np.sqrt(total) if mode == "whole-patch" else total


def patch_distance(
    first: Volume, second: Volume, center: Tuple[int, int, int], radius: int, mode: str = "per-voxel"
) -> float:
    """
    Sum over the patch voxels of the per-voxel log-Euclidean distances.

    In "whole-patch" mode the square root is taken once over the summed squares instead.
    """
    _check_pair(first, second)
    _check_mode(mode)
    center = tuple(int(c) for c in center)
    if len(center) != 3 or any(c < 0 or c >= n for c, n in zip(center, first.dims)):
        raise CenterOutOfBoundsError(f"Patch center {center} is outside dims {first.dims}.")
    first_array = first.array
    second_array = second.array
    total = 0.0
    for offset in patch_offsets(radius):
        voxel = tuple(c + o for c, o in zip(center, offset))
        if all(0 <= v < n for v, n in zip(voxel, first.dims)):
            total += _voxel_terms(first_array[voxel], second_array[voxel], mode)
    return float(np.sqrt(total)) if mode == "whole-patch" else float(total)


def grade_from_distances(distances: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """
    Similarity-weighted label vote from a (templates, voxels) distance array.

    The smallest distance at each voxel sets the weight scale h, floored at 1e-12.
    """
    distances = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    h = np.maximum(distances.min(axis=0), H_FLOOR)
    numerator = np.zeros(distances.shape[1])
    denominator = np.zeros(distances.shape[1])
    for row, label in zip(distances, labels):
        weight = np.exp(-(row / h))
        numerator += weight * label
        denominator += weight
    return np.clip(numerator / denominator, -1.0, 1.0)


def grade_voxel(
    subject: Volume, library: TemplateLibrary, index: Tuple[int, int, int], radius: int, mode: str = "per-voxel"
) -> float:
    """
    Grade of a single ROI voxel.
    """
    library.roi.check_dims(subject.dims, "Subject log-tensor field")
    index = tuple(int(i) for i in index)
    if not all(0 <= i < n for i, n in zip(index, subject.dims)) or not library.roi.occupancy[index]:
        raise VoxelOutsideRoiError(f"Voxel {index} is outside the ROI.")
    distances = np.array([patch_distance(subject, entry.log_field, index, radius, mode) for entry in library.entries])
    return float(grade_from_distances(distances[:, np.newaxis], library.labels)[0])


def _library_distances(
    subject: Volume,
    subject_key: Optional[Tuple[str, str]],
    library: TemplateLibrary,
    radius: int,
    mode: str,
    threads: int,
    cache: Optional[PatchDistanceCache],
) -> np.ndarray:
    occupancy = library.roi.occupancy

    def distances_to(entry: LibraryEntry) -> np.ndarray:
        if cache is not None and subject_key is not None:
            return cache.distances(subject_key, subject, entry.key, entry.log_field)
        return patch_distance_map(subject, entry.log_field, radius, mode)[occupancy]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            rows = list(executor.map(distances_to, library.entries))
    else:
        rows = [distances_to(entry) for entry in library.entries]
    return np.stack(rows)


def grade_map(
    subject: Volume,
    library: TemplateLibrary,
    radius: int = DEFAULT_RADIUS,
    mode: str = "per-voxel",
    threads: int = 1,
    cache: Optional[PatchDistanceCache] = None,
    subject_key: Optional[Tuple[str, str]] = None,
) -> GradingMap:
    """
    Grade every in-mask voxel of a subject against a library.

    Templates may be distributed across threads; the output does not depend
    on the thread count. A cache is only consulted when ``subject_key`` is given.
    """
    require_channels(subject, 6, "Subject log-tensor field")
    library.roi.check_dims(subject.dims, "Subject log-tensor field")
    _check_radius(radius)
    _check_mode(mode)
    if cache is not None and (
        cache.radius != radius
        or cache.mode != mode
        or not np.array_equal(cache.roi.occupancy, library.roi.occupancy)
    ):
        raise CacheMismatchError("Distance cache was built for another radius, distance mode or ROI.")
    distances = _library_distances(subject, subject_key, library, radius, mode, threads, cache)
    values = np.full(library.roi.dims, np.nan)
    values[library.roi.occupancy] = grade_from_distances(distances, library.labels)
    return GradingMap(values=values, roi=library.roi, spacing=subject.spacing)


def grade_templates(
    library: TemplateLibrary,
    radius: int = DEFAULT_RADIUS,
    leave_out: int = DEFAULT_LEAVE_OUT,
    mode: str = "per-voxel",
    threads: int = 1,
    cache: Optional[PatchDistanceCache] = None,
) -> List[GradingMap]:
    """
    Leave-k-out grading of every template of a library.

    Templates are split into contiguous groups of ``leave_out`` in library order;
    each template is graded against the library minus its own group.
    """
    size = len(library)
    if leave_out < 1 or leave_out >= size:
        raise InvalidLeaveOutError(f"Leave-out count {leave_out} should be between 1 and {size - 1}.")
    maps: List[Optional[GradingMap]] = [None] * size
    for start in range(0, size, leave_out):
        group = range(start, min(start + leave_out, size))
        training = library.without(group)
        for position in group:
            entry = library.entries[position]
            maps[position] = grade_map(
                entry.log_field, training, radius, mode, threads, cache=cache, subject_key=entry.key
            )
    return maps


def build_library(
    pool: Sequence[LibraryEntry], query: SubjectMeta, n_per_class: int, roi: RoiMask
) -> TemplateLibrary:
    """
    Age-matched library for a query subject.

    Every scan of the query subject is excluded. Per class, the ``n_per_class``
    templates closest in age are kept (ties broken by subject_id then scan_id);
    the library interleaves the two classes by age rank.
    """
    if n_per_class < 1:
        raise InsufficientTemplatesError("Library needs at least one template per class.")
    eligible = [entry for entry in pool if entry.meta.subject_id != query.subject_id]
    selected = {}
    for label, name in ((1, "control"), (-1, "manifest")):
        candidates = sorted(
            (entry for entry in eligible if entry.meta.label == label),
            key=lambda entry: (abs(entry.meta.age - query.age), entry.meta.subject_id, entry.meta.scan_id),
        )
        if len(candidates) < n_per_class:
            raise InsufficientTemplatesError(
                f"Only {len(candidates)} {name} templates are eligible for subject {query.subject_id}; "
                f"{n_per_class} are needed."
            )
        selected[label] = candidates[:n_per_class]
    entries = [entry for pair in zip(selected[1], selected[-1]) for entry in pair]
    return TemplateLibrary(entries=tuple(entries), roi=roi)


def _mask_path(path: Path) -> Path:
    return path.parent / f"{path.stem}_mask{path.suffix}"


def save_grading_map(grading: GradingMap, path: str | Path) -> None:
    """
    Write the map (0 outside the mask) and its mask as ``<name>_mask`` alongside.
    """
    path = Path(path)
    save_volume(grading.to_volume(), path)
    save_volume(grading.roi.to_volume(grading.spacing), _mask_path(path))


def load_grading_map(path: str | Path) -> GradingMap:
    """
    Read a map written by save_grading_map, restoring NaN outside the mask.
    """
    path = Path(path)
    volume = load_volume(path)
    require_channels(volume, 1, "Grading map")
    roi = RoiMask.from_volume(load_volume(_mask_path(path)))
    values = np.where(roi.occupancy, volume.array[..., 0], np.nan)
    return GradingMap(values=values, roi=roi, spacing=volume.spacing)


def read_manifest(path: str | Path) -> Dict:
    """
    Parse a library or dataset manifest JSON file.
    """
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise LibraryManifestError(f"Cannot read manifest {path}.") from exc
    except json.JSONDecodeError as exc:
        raise LibraryManifestError(f"Manifest {path.name} is not valid JSON.") from exc
    if not isinstance(manifest, dict) or "entries" not in manifest or "roi" not in manifest:
        raise LibraryManifestError(f"Manifest {path.name} should hold 'roi' and 'entries'.")
    for record in manifest["entries"]:
        for key in ("path", "subject_id", "scan_id", "age", "label"):
            if key not in record:
                raise LibraryManifestError(f"Manifest {path.name} has an entry without '{key}'.")
    return manifest


def load_library_manifest(path: str | Path) -> Tuple[List[LibraryEntry], RoiMask]:
    """
    Load every entry of a library manifest; paths are relative to the manifest.
    """
    path = Path(path)
    manifest = read_manifest(path)
    roi = RoiMask.from_volume(load_volume(path.parent / manifest["roi"]))
    entries = []
    for record in manifest["entries"]:
        entry_path = path.parent / record["path"]
        try:
            log_field = load_volume(entry_path)
        except VolumeReadError as exc:
            raise LibraryEntryError(
                f"Library entry {record['subject_id']}/{record['scan_id']} cannot be read from {entry_path}."
            ) from exc
        meta = SubjectMeta(record["subject_id"], record["scan_id"], record["age"], record["label"])
        entries.append(LibraryEntry(log_field=log_field, meta=meta))
    return entries, roi


def write_library_manifest(path: str | Path, roi_path: str, records: List[Dict]) -> None:
    """
    Write a manifest with the shared schema (path, subject_id, scan_id, age, label per entry).
    """
    path = Path(path)
    manifest = {"roi": roi_path, "entries": records}
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
