"""
End-to-end grading run over a dataset manifest.

Displacement fields are tensorized once (cached by content hash), cropped to
the ROI bounding box, and every control and pre-manifest subject is graded
against its own age-matched library. Elastic-net fits are shared between
queries that end up with the same library.
"""

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import pandas as pd
from tqdm import tqdm

from tensor_grading.classify import EvaluationReport, compare_feature_sets
from tensor_grading.config import InvalidConfigError, RunConfig
from tensor_grading.grading import (
    LibraryEntry,
    PatchDistanceCache,
    build_library,
    grade_map,
    grade_templates,
    read_manifest,
)
from tensor_grading.selection import CoefficientMap, DesignMatrix, elastic_net_fit, global_grading, save_coefficient_map
from tensor_grading.tensor_ops import EIG_FLOOR, jacobian_field, log_tensor_field, structure_volume
from tensor_grading.volume_core import (
    RAW_SUFFIX,
    SIDECAR_SUFFIX,
    DimensionMismatchError,
    RoiMask,
    SubjectMeta,
    crop,
    crop_mask,
    load_volume,
    save_volume,
)

logger = logging.getLogger(__name__)

FEATURE_SETS = {"tensor": ["tensor"], "volume": ["volume"], "volume+tensor": ["volume", "tensor"]}
QUERY_GROUPS = ("control", "pre")


def input_files(path: str | Path) -> List[Path]:
    """
    Files making up an input on disk: the raw payload and its sidecar, or the file itself.
    """
    path = Path(path)
    raw = path.parent / (path.stem + RAW_SUFFIX)
    if path.suffix == RAW_SUFFIX or (path.suffix == SIDECAR_SUFFIX and raw.exists()):
        return [path.parent / (path.stem + RAW_SUFFIX), path.parent / (path.stem + SIDECAR_SUFFIX)]
    return [path]


def file_digest(path: str | Path) -> str:
    """
    sha256 over every file of a volume.
    """
    digest = hashlib.sha256()
    for part in input_files(path):
        digest.update(part.read_bytes())
    return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class TensorizedScan:
    """
    Cropped log-tensor field of one dataset scan with its structure volume.
    """

    entry: LibraryEntry
    group: str
    structure_volume: float
    clamp_count: int


@dataclass(frozen=True, eq=False)
class RadiusResult:
    """
    Outcome of the grading run at one patch radius.
    """

    radius: int
    features: pd.DataFrame
    comparison: pd.DataFrame
    reports: Dict[str, EvaluationReport]
    coefficients: CoefficientMap
    fits: pd.DataFrame


class GradingPipeline:
    """
    Tensorize, grade, select and classify every subject of a dataset.

    Queries are the first scan of each control and pre-manifest subject; the
    template pool is every control and manifest scan. All outputs go to
    ``config.out_dir``.
    """

    def __init__(self, config: RunConfig, progress: bool = False) -> None:
        config.validate()
        if config.dataset is None:
            raise InvalidConfigError("Pipeline configuration needs a 'dataset' manifest path.")
        self.config = config
        self.progress = progress
        self.manifest_path = Path(config.dataset)
        manifest = read_manifest(self.manifest_path)
        self.records = pd.DataFrame(manifest["entries"])
        if "group" not in self.records.columns:
            self.records["group"] = self.records["label"].map({1: "control", 0: "pre", -1: "manifest"})
        roi_path = Path(config.roi) if config.roi else self.manifest_path.parent / manifest["roi"]
        full_roi = RoiMask.from_volume(load_volume(roi_path))
        structure = full_roi
        if "structure" in manifest:
            structure = RoiMask.from_volume(load_volume(self.manifest_path.parent / manifest["structure"]))
            full_roi.check_dims(structure.dims, "Structure mask")
        self.full_dims = full_roi.dims
        self.box = full_roi.bbox
        self.roi = crop_mask(full_roi, self.box)
        self.structure = crop_mask(structure, self.box)
        self.out_dir = Path(config.out_dir)
        self.cache_dir = self.out_dir / "cache"
        self._mask_digest = hashlib.sha256(
            full_roi.occupancy.tobytes() + structure.occupancy.tobytes() + repr(self.full_dims).encode()
        ).hexdigest()

    def _cache_key(self, path: Path) -> str:
        digest = hashlib.sha256()
        digest.update(file_digest(path).encode())
        digest.update(f"{self.config.disp_sign}:{EIG_FLOOR!r}:{self._mask_digest}".encode())
        return digest.hexdigest()

    def _tensorize_one(self, record: pd.Series) -> TensorizedScan:
        path = self.manifest_path.parent / record["path"]
        key = self._cache_key(path)
        log_path = self.cache_dir / f"{key}{RAW_SUFFIX}"
        stats_path = self.cache_dir / f"{key}_stats.json"
        if not (log_path.exists() and stats_path.exists()):
            displacement = load_volume(path)
            if displacement.dims != self.full_dims:
                name = record["path"]
                raise DimensionMismatchError(
                    f"Displacement field {name} dims {displacement.dims} do not match ROI dims {self.full_dims}."
                )
            result = log_tensor_field(displacement, self.config.disp_sign)
            jacobian = crop(jacobian_field(displacement, self.config.disp_sign), self.box)
            stats = {"clamp_count": result.clamp_count, "structure_volume": structure_volume(jacobian, self.structure)}
            save_volume(crop(result.log_field, self.box), log_path)
            stats_path.write_text(json.dumps(stats) + "\n", encoding="utf-8")
        else:
            logger.debug("log-tensor cache hit for %s", record["path"])
        stats = json.loads(stats_path.read_text(encoding="utf-8"))
        meta = SubjectMeta(record["subject_id"], record["scan_id"], record["age"], record["label"])
        return TensorizedScan(
            entry=LibraryEntry(log_field=load_volume(log_path), meta=meta),
            group=str(record["group"]),
            structure_volume=float(stats["structure_volume"]),
            clamp_count=int(stats["clamp_count"]),
        )

    def tensorize(self) -> List[TensorizedScan]:
        """
        Log-tensor field of every dataset scan, in manifest order.

        Fields are reloaded from the cache after being written, so a fresh run
        and a resumed run see the same float32-rounded values.
        """
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        rows = [record for _, record in self.records.iterrows()]
        scans = [self._tensorize_one(record) for record in tqdm(rows, desc="tensorize", disable=not self.progress)]
        clamped = sum(scan.clamp_count for scan in scans)
        if clamped:
            logger.warning("%d voxels clamped across %d scans", clamped, len(scans))
        logger.info("tensorized %d scans", len(scans))
        return scans

    def grade_subjects(
        self, scans: List[TensorizedScan], radius: int, groups: Sequence[str] = QUERY_GROUPS
    ) -> Tuple[pd.DataFrame, Dict[Tuple, CoefficientMap], Counter]:
        """
        Global grading and structure volume of the first scan of every subject in ``groups``.

        Each row also names the library fit it was graded with (``library`` is
        the fit's position in first-use order) and that fit's convergence flag,
        sweep count and KKT residual.
        """
        config = self.config
        cache = PatchDistanceCache(self.roi, radius, config.distance_mode)
        pool = [scan.entry for scan in scans if scan.entry.meta.label != 0]
        queries = []
        seen = set()
        for scan in scans:
            if scan.group in groups and scan.entry.meta.subject_id not in seen:
                seen.add(scan.entry.meta.subject_id)
                queries.append(scan)

        fits: Dict[Tuple, CoefficientMap] = {}
        usage: Counter = Counter()
        rows = []
        for scan in tqdm(queries, desc=f"grade r={radius}", disable=not self.progress):
            library = build_library(pool, scan.entry.meta, config.n_per_class, self.roi)
            if library.keys not in fits:
                template_maps = grade_templates(
                    library, radius, config.leave_out, config.distance_mode, config.threads, cache
                )
                design = DesignMatrix.from_grading_maps(template_maps, library.labels)
                fits[library.keys] = elastic_net_fit(
                    design,
                    rho=config.rho,
                    lam=config.lam,
                    tol=config.tol,
                    max_iter=config.max_iter,
                    nonneg=config.nonneg,
                )
            usage[library.keys] += 1
            fit = fits[library.keys]
            grading = grade_map(
                scan.entry.log_field,
                library,
                radius,
                config.distance_mode,
                config.threads,
                cache=cache,
                subject_key=scan.entry.key,
            )
            result = global_grading(grading, fit)
            rows.append(
                {
                    "subject_id": scan.entry.meta.subject_id,
                    "scan_id": scan.entry.meta.scan_id,
                    "group": scan.group,
                    "age": scan.entry.meta.age,
                    "label": 1 if scan.group == "pre" else -1,
                    "tensor": result.value,
                    "tensor_literal": result.literal,
                    "volume": scan.structure_volume,
                    "mean_grading": grading.mean(),
                    "library": list(fits).index(library.keys),
                    "fit_converged": fit.converged,
                    "fit_sweeps": fit.n_sweeps,
                    "fit_kkt": fit.kkt,
                }
            )
        logger.info("radius %d: %d queries, %d distinct libraries", radius, len(queries), len(fits))
        return pd.DataFrame(rows), fits, usage

    @staticmethod
    def fit_table(fits: Dict[Tuple, CoefficientMap], usage: Counter) -> pd.DataFrame:
        """
        One row per distinct library fit: queries served, convergence, sweeps, KKT residual and selected voxels.
        """
        rows = [
            {
                "library": index,
                "queries": usage[keys],
                "converged": fit.converged,
                "n_sweeps": fit.n_sweeps,
                "kkt": fit.kkt,
                "nonzero": int(fit.nonzero.size),
            }
            for index, (keys, fit) in enumerate(fits.items())
        ]
        return pd.DataFrame(rows)

    @staticmethod
    def group_summary(features: pd.DataFrame) -> pd.DataFrame:
        """
        Mean, standard error and count of the global and mean in-mask grading per group.
        """
        summary = features.groupby("group", sort=False)[["tensor", "mean_grading"]].agg(["mean", "sem", "count"])
        summary.columns = [f"{column}_{stat}" for column, stat in summary.columns]
        return summary

    def evaluate(self, features: pd.DataFrame, radius: int) -> Tuple[pd.DataFrame, Dict[str, EvaluationReport]]:
        """
        Repeated stratified evaluation of the tensor, volume and combined features.
        """
        config = self.config
        echo = config.report_echo()
        echo["radius"] = radius
        return compare_feature_sets(
            features,
            FEATURE_SETS,
            n_iter=config.n_iter,
            test_fraction=config.test_fraction,
            seed=config.seed,
            C=config.C,
            n_folds=config.n_folds,
            threads=config.threads,
            config=echo,
        )

    def run(self) -> List[RadiusResult]:
        """
        Full run at every configured radius; writes features, fits, group summaries, reports,
        coefficients and patch_size.csv.
        """
        self.out_dir.mkdir(parents=True, exist_ok=True)
        scans = self.tensorize()
        save_volume(self.roi.to_volume(scans[0].entry.log_field.spacing), self.out_dir / "roi_crop.f32")
        results = []
        for radius in self.config.radii or [self.config.radius]:
            features, fits, usage = self.grade_subjects(scans, radius)
            fit_table = self.fit_table(fits, usage)
            stalled = int((~fit_table["converged"]).sum())
            if stalled:
                logger.warning("radius %d: %d of %d elastic-net fits did not converge", radius, stalled, len(fits))
            comparison, reports = self.evaluate(features, radius)
            reference = fits[usage.most_common(1)[0][0]]

            radius_dir = self.out_dir / f"radius_{radius}"
            radius_dir.mkdir(parents=True, exist_ok=True)
            features.to_csv(radius_dir / "features.csv", index=False)
            fit_table.to_csv(radius_dir / "fits.csv", index=False)
            self.group_summary(features).to_csv(radius_dir / "groups.csv")
            comparison.to_csv(radius_dir / "comparison.csv")
            for name, report in reports.items():
                report.save(radius_dir / f"report_{name}")
            save_coefficient_map(reference, radius_dir / "coefficients.f32", scans[0].entry.log_field.spacing)
            results.append(
                RadiusResult(
                    radius=radius,
                    features=features,
                    comparison=comparison,
                    reports=reports,
                    coefficients=reference,
                    fits=fit_table,
                )
            )
        self.patch_size_table(results).to_csv(self.out_dir / "patch_size.csv", index=False)
        return results

    @staticmethod
    def patch_size_table(results: List[RadiusResult]) -> pd.DataFrame:
        """
        One row per radius with the tensor-feature metrics (mean and standard error).
        """
        rows = []
        for result in results:
            side = 2 * result.radius + 1
            row = {"radius": result.radius, "patch": f"{side}x{side}x{side}"}
            for metric, stats in result.reports["tensor"].summary().items():
                row[f"{metric}_mean"] = stats["mean"]
                row[f"{metric}_sem"] = stats["sem"]
            rows.append(row)
        return pd.DataFrame(rows)
