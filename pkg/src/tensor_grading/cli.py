"""
Command-line front end: ``tensor-grading <command> [flags]``.

Every command resolves a RunConfig (defaults, then ``--config``, then flags),
writes its outputs under ``--out-dir`` together with a ``run.json``
provenance record, and exits nonzero on any error.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import matplotlib
import numpy as np

from tensor_grading import __version__
from tensor_grading.classify import DEFAULT_C, load_feature_table, stratified_cv
from tensor_grading.config import RunConfig, load_run_config
from tensor_grading.grading import (
    DEFAULT_LEAVE_OUT,
    LibraryEntry,
    TemplateLibrary,
    grade_map,
    load_grading_map,
    load_library_manifest,
    read_manifest,
    save_grading_map,
)
from tensor_grading.phantom import PhantomConfig, generate_population, load_phantom_config
from tensor_grading.pipeline import GradingPipeline, file_digest, input_files
from tensor_grading.selection import DesignMatrix, elastic_net_fit, save_coefficient_map
from tensor_grading.tensor_ops import log_tensor_field
from tensor_grading.volume_core import (
    NIFTI_SUFFIX,
    RAW_SUFFIX,
    TensorGradingError,
    Volume,
    crop,
    crop_mask,
    load_volume,
    require_channels,
    save_volume,
)

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  pylint: disable=wrong-import-position

logger = logging.getLogger(__name__)

AXES = {"x": 0, "y": 1, "z": 2}


class SliceIndexError(TensorGradingError):
    """
    slice index outside the volume
    """


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--threads", type=int, help="worker threads; outputs do not depend on it")
    parser.add_argument("--disp-sign", choices=("minus", "plus"), help="displacement convention")
    parser.add_argument("--distance-mode", choices=("per-voxel", "whole-patch"), help="patch distance mode")
    parser.add_argument("--nonneg", action="store_const", const=True, help="nonnegative elastic-net coefficients")
    parser.add_argument("--out-dir", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")


def _add_grading_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--radius", type=int, help="patch radius in voxels")


def _add_selection_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rho", type=float, help="ridge penalty")
    parser.add_argument("--lam", type=float, help="lasso penalty")
    parser.add_argument("--tol", type=float, help="coordinate descent tolerance")
    parser.add_argument("--max-iter", type=int, help="maximum coordinate descent sweeps")


def _add_classify_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-C", dest="C", type=float, help=f"SVM penalty (default {DEFAULT_C})")
    parser.add_argument("--n-iter", type=int, help="evaluation iterations")
    parser.add_argument("--test-fraction", type=float, help="test share of every random split")
    parser.add_argument("--n-folds", type=int, help="k-fold passes instead of random splits")


def build_parser() -> argparse.ArgumentParser:
    """
    Parser with one subcommand per pipeline stage.
    """
    parser = argparse.ArgumentParser(prog="tensor-grading", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    _add_common_flags(common)
    commands = parser.add_subparsers(dest="command", required=True)

    tensorize = commands.add_parser("tensorize", parents=[common], help="displacement fields to log-tensor fields")
    tensorize.add_argument("inputs", nargs="+", help="displacement volumes")

    grade = commands.add_parser("grade", parents=[common], help="grading map of one subject")
    grade.add_argument("--subject", required=True, help="subject log-tensor volume")
    grade.add_argument("--library", required=True, help="library manifest JSON")
    grade.add_argument("--output", default="grading.f32", help="grading map file name")
    _add_grading_flags(grade)

    select = commands.add_parser("select", parents=[common], help="elastic-net voxel selection")
    select.add_argument("--maps", required=True, help="manifest of template grading maps")
    _add_selection_flags(select)

    classify = commands.add_parser("classify", parents=[common], help="repeated stratified SVM evaluation")
    classify.add_argument("--features", required=True, help="feature table, CSV or parquet")
    classify.add_argument("--columns", nargs="+", default=["tensor"], help="one or two feature columns")
    _add_classify_flags(classify)

    commands.add_parser("phantom", parents=[common], help="synthetic dataset; --config is a phantom JSON")

    pipeline = commands.add_parser("pipeline", parents=[common], help="full run over a dataset manifest")
    pipeline.add_argument("--dataset", help="dataset manifest JSON")
    pipeline.add_argument("--roi", help="ROI volume overriding the manifest's")
    pipeline.add_argument("--radii", type=int, nargs="+", help="patch radii to compare")
    pipeline.add_argument("--n-per-class", type=int, help="templates per class")
    pipeline.add_argument("--leave-out", type=int, help="template group size of leave-k-out grading")
    _add_grading_flags(pipeline)
    _add_selection_flags(pipeline)
    _add_classify_flags(pipeline)

    export = commands.add_parser("export-slices", parents=[common], help="PGM and CSV slices of a scalar map")
    export.add_argument("--map", required=True, help="scalar volume, e.g. coefficients or a grading map")
    export.add_argument("--axis", choices=tuple(AXES), default="z")
    export.add_argument("--indices", type=int, nargs="+", required=True, help="slice indices")
    export.add_argument("--png", action="store_true", help="also write a colour overlay PNG per slice")
    export.add_argument("--background", help="scalar volume drawn in gray under the overlay")
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {item.name: getattr(args, item.name, None) for item in fields(RunConfig)}
    return load_run_config(args.config if args.command != "phantom" else None, overrides)


def _output_path(out_dir: Path, source: Path, tag: str) -> Path:
    suffix = NIFTI_SUFFIX if source.suffix == NIFTI_SUFFIX else RAW_SUFFIX
    return out_dir / f"{source.stem}_{tag}{suffix}"


def cmd_tensorize(args: argparse.Namespace, config: RunConfig) -> List[Path]:
    """
    Write the log-tensor field of every input displacement field.
    """
    out_dir = Path(config.out_dir)
    inputs = [Path(name) for name in args.inputs]
    for source in inputs:
        result = log_tensor_field(load_volume(source), config.disp_sign)
        target = _output_path(out_dir, source, "logtensor")
        save_volume(result.log_field, target)
        logger.info("%s -> %s (%d clamped voxels)", source, target, result.clamp_count)
    return inputs


def cmd_grade(args: argparse.Namespace, config: RunConfig) -> List[Path]:
    """
    Grade one subject against a library manifest, within the ROI bounding box.
    """
    entries, roi = load_library_manifest(args.library)
    subject = load_volume(args.subject)
    roi.check_dims(subject.dims, "Subject log-tensor field")
    box = roi.bbox
    cropped = []
    for entry in entries:
        if entry.meta.label == 0:
            continue
        roi.check_dims(entry.log_field.dims, f"Template {entry.meta.subject_id}/{entry.meta.scan_id}")
        cropped.append(LibraryEntry(log_field=crop(entry.log_field, box), meta=entry.meta))
    library = TemplateLibrary(entries=tuple(cropped), roi=crop_mask(roi, box))
    grading = grade_map(crop(subject, box), library, config.radius, config.distance_mode, config.threads)
    save_grading_map(grading, Path(config.out_dir) / args.output)
    logger.info("mean in-mask grading %.4f over %d voxels", grading.mean(), library.roi.count)
    return [Path(args.subject), Path(args.library)]


def cmd_select(args: argparse.Namespace, config: RunConfig) -> List[Path]:
    """
    Fit the elastic net on template grading maps and write the coefficient map.
    """
    manifest_path = Path(args.maps)
    manifest = read_manifest(manifest_path)
    maps = [load_grading_map(manifest_path.parent / record["path"]) for record in manifest["entries"]]
    labels = [record["label"] for record in manifest["entries"]]
    design = DesignMatrix.from_grading_maps(maps, labels)
    coefficients = elastic_net_fit(
        design, rho=config.rho, lam=config.lam, tol=config.tol, max_iter=config.max_iter, nonneg=config.nonneg
    )
    save_coefficient_map(coefficients, Path(config.out_dir) / "coefficients.f32", maps[0].spacing)
    logger.info("%d nonzero coefficients, converged: %s", coefficients.nonzero.size, coefficients.converged)
    return [manifest_path]


def cmd_classify(args: argparse.Namespace, config: RunConfig) -> List[Path]:
    """
    Repeated stratified evaluation of a feature table.
    """
    table = load_feature_table(args.features, args.columns)
    report = stratified_cv(
        table,
        n_iter=config.n_iter,
        test_fraction=config.test_fraction,
        seed=config.seed,
        C=config.C,
        n_folds=config.n_folds,
        threads=config.threads,
        config=config.report_echo(),
    )
    report.save(Path(config.out_dir) / "report")
    return [Path(args.features)]


def cmd_phantom(args: argparse.Namespace, config: RunConfig) -> List[Path]:
    """
    Generate a synthetic dataset and a pipeline configuration next to it.
    """
    phantom = load_phantom_config(args.config) if args.config else PhantomConfig()
    if args.seed is not None:
        phantom = replace(phantom, seed=args.seed)
    out_dir = Path(config.out_dir)
    generate_population(phantom, out_dir, threads=config.threads)
    n_per_class = min(phantom.counts["control"] - 1, phantom.counts["manifest"])
    run_config = {
        "dataset": "manifest.json",
        "n_per_class": n_per_class,
        "leave_out": min(DEFAULT_LEAVE_OUT, n_per_class),
        "seed": phantom.seed,
    }
    (out_dir / "pipeline.json").write_text(json.dumps(run_config, indent=2) + "\n", encoding="utf-8")
    return [Path(args.config)] if args.config else []


def cmd_pipeline(args: argparse.Namespace, config: RunConfig) -> List[Path]:
    """
    Full run; see GradingPipeline.
    """
    progress = not args.quiet and sys.stderr.isatty()
    pipeline = GradingPipeline(config, progress=progress)
    for result in pipeline.run():
        for name, row in result.comparison.iterrows():
            logger.info("radius %d, %s: ACC %.1f +/- %.1f", result.radius, name, row["ACC_mean"], row["ACC_sem"])
    return [Path(config.dataset)] + [pipeline.manifest_path.parent / path for path in pipeline.records["path"]]


def slice_image(volume: Volume, axis: str, index: int) -> np.ndarray:
    """
    2-D slice of a scalar volume; rows follow the second in-plane axis, columns the first.
    """
    require_channels(volume, 1, "Exported map")
    position = AXES[axis]
    count = volume.dims[position]
    if not 0 <= index < count:
        raise SliceIndexError(f"Slice index {index} is out of range for axis {axis} with {count} slices.")
    return np.take(volume.array[..., 0], index, axis=position).T


def to_gray(image: np.ndarray) -> np.ndarray:
    """
    8-bit magnitude image scaled to the largest absolute value; all zero stays black.
    """
    peak = np.abs(image).max()
    if peak == 0:
        return np.zeros(image.shape, dtype=np.uint8)
    return np.rint(255.0 * np.abs(image) / peak).astype(np.uint8)


def write_pgm(path: Path, gray: np.ndarray) -> None:
    """
    Binary (P5) PGM.
    """
    height, width = gray.shape
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + gray.tobytes())


def write_overlay(path: Path, image: np.ndarray, background: Optional[np.ndarray] = None) -> None:
    """
    Colour overlay PNG of a signed slice, zero voxels transparent.
    """
    fig, ax = plt.subplots(figsize=(4, 4))
    if background is not None:
        ax.imshow(background, cmap="gray", origin="lower", interpolation="nearest")
    peak = max(float(np.abs(image).max()), 1e-12)
    shown = ax.imshow(
        np.ma.masked_equal(image, 0.0), cmap="coolwarm", vmin=-peak, vmax=peak, origin="lower", interpolation="nearest"
    )
    fig.colorbar(shown, ax=ax, fraction=0.046)
    ax.set_axis_off()
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def cmd_export_slices(args: argparse.Namespace, config: RunConfig) -> List[Path]:
    """
    PGM and CSV per requested slice, plus an optional PNG overlay.
    """
    source = Path(args.map)
    volume = load_volume(source)
    background = load_volume(args.background) if args.background else None
    out_dir = Path(config.out_dir)
    for index in args.indices:
        image = slice_image(volume, args.axis, index)
        stem = out_dir / f"{source.stem}_{args.axis}{index}"
        write_pgm(stem.with_suffix(".pgm"), to_gray(image))
        np.savetxt(stem.with_suffix(".csv"), image, delimiter=",", fmt="%.9g")
        if args.png:
            under = slice_image(background, args.axis, index) if background is not None else None
            write_overlay(stem.with_suffix(".png"), image, under)
    return [source] + ([Path(args.background)] if args.background else [])


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], List[Path]]] = {
    "tensorize": cmd_tensorize,
    "grade": cmd_grade,
    "select": cmd_select,
    "classify": cmd_classify,
    "phantom": cmd_phantom,
    "pipeline": cmd_pipeline,
    "export-slices": cmd_export_slices,
}


def write_run_record(args: argparse.Namespace, config: RunConfig, inputs: List[Path]) -> None:
    """
    run.json: command, resolved configuration, input digests and package version.
    """
    digests = {}
    for source in inputs:
        if all(part.is_file() for part in input_files(source)):
            digests[str(source)] = file_digest(source)
    arguments = {key: value for key, value in sorted(vars(args).items()) if key not in ("verbose", "quiet")}
    record = {
        "command": args.command,
        "version": __version__,
        "arguments": arguments,
        "config": config.as_dict(),
        "inputs": digests,
    }
    path = Path(config.out_dir) / "run.json"
    path.write_text(json.dumps(record, indent=2, default=str) + "\n", encoding="utf-8")


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point of the ``tensor-grading`` script; returns the exit status.
    """
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _resolve_config(args)
        Path(config.out_dir).mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command](args, config)
        write_run_record(args, config, inputs)
    except (TensorGradingError, OSError) as error:
        logger.error("%s", error)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
