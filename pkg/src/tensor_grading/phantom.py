"""
Synthetic displacement-field populations with a localized atrophy.

Each subject's field is a radial contraction toward a fixed center, scaled by
its group's strength, plus band-limited Gaussian noise. Controls carry no
atrophy, pre-manifest subjects a fraction of it and manifest subjects all of it.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import fft

from tensor_grading.volume_core import RoiMask, SubjectMeta, TensorGradingError, Volume, save_volume

logger = logging.getLogger(__name__)

GROUPS = ("control", "pre", "manifest")
GROUP_LABELS = {"control": 1, "pre": 0, "manifest": -1}


class InvalidPhantomConfigError(TensorGradingError):
    """
    phantom parameters out of range
    """


class UnknownGroupError(TensorGradingError):
    """
    group is not control, pre or manifest
    """


class DatasetWriteError(TensorGradingError):
    """
    dataset manifest cannot be written
    """


@dataclass(frozen=True)
class PhantomConfig:
    """
    Parameters of a synthetic population.

    * atrophy_center: voxel index of the atrophy center, the grid center when None
    * atrophy_radius_mm: width of the Gaussian contraction profile
    * atrophy_strength: peak contraction of manifest subjects, below 1 to keep the map invertible
    * pre_fraction: share of the strength carried by pre-manifest subjects
    * noise_amplitude: standard deviation in mm of every noise component
    * noise_correlation_length: spatial standard deviation in mm of the noise smoothing
    * counts: subjects per group
    * age_ranges: uniform age range per group, in years
    * scans_per_subject: scans per subject, one year apart, with independent noise
    """

    dims: Tuple[int, int, int] = (20, 20, 20)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    atrophy_center: Optional[Tuple[int, int, int]] = None
    atrophy_radius_mm: float = 3.0
    atrophy_strength: float = 0.3
    pre_fraction: float = 0.5
    noise_amplitude: float = 0.2
    noise_correlation_length: float = 2.0
    counts: Dict[str, int] = field(default_factory=lambda: {"control": 60, "pre": 30, "manifest": 30})
    age_ranges: Dict[str, Tuple[float, float]] = field(
        default_factory=lambda: {"control": (30.0, 70.0), "pre": (25.0, 60.0), "manifest": (45.0, 70.0)}
    )
    scans_per_subject: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        dims = tuple(int(n) for n in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or min(dims) < 2:
            raise InvalidPhantomConfigError("Phantom dims should be three counts of at least 2.")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise InvalidPhantomConfigError("Phantom spacing should be three strictly positive values.")
        center = tuple(n // 2 for n in dims) if self.atrophy_center is None else tuple(self.atrophy_center)
        if len(center) != 3 or any(c < 0 or c >= n for c, n in zip(center, dims)):
            raise InvalidPhantomConfigError(f"Atrophy center {center} is outside dims {dims}.")
        if self.atrophy_radius_mm <= 0:
            raise InvalidPhantomConfigError("Atrophy radius should be positive.")
        if not 0.0 <= self.atrophy_strength < 1.0:
            raise InvalidPhantomConfigError("Atrophy strength should lie in [0, 1).")
        if not 0.0 <= self.pre_fraction <= 1.0:
            raise InvalidPhantomConfigError("Pre-manifest fraction should lie in [0, 1].")
        if self.noise_amplitude < 0 or self.noise_correlation_length <= 0:
            raise InvalidPhantomConfigError("Noise amplitude should be nonnegative, correlation length positive.")
        if set(self.counts) != set(GROUPS) or min(self.counts.values()) < 1:
            raise InvalidPhantomConfigError("Counts should give at least one subject for control, pre and manifest.")
        if set(self.age_ranges) != set(GROUPS):
            raise InvalidPhantomConfigError("Age ranges should be given for control, pre and manifest.")
        age_ranges = {group: (float(low), float(high)) for group, (low, high) in self.age_ranges.items()}
        if any(low <= 0 or high < low for low, high in age_ranges.values()):
            raise InvalidPhantomConfigError("Age ranges should be positive and increasing.")
        if self.scans_per_subject < 1:
            raise InvalidPhantomConfigError("Each subject needs at least one scan.")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "atrophy_center", tuple(int(c) for c in center))
        object.__setattr__(self, "counts", {group: int(self.counts[group]) for group in GROUPS})
        object.__setattr__(self, "age_ranges", age_ranges)

    @classmethod
    def from_dict(cls, data: Dict) -> "PhantomConfig":
        """
        Build a config from JSON-like data; unknown keys are rejected.
        """
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidPhantomConfigError(f"Unknown phantom configuration key '{unknown[0]}'.")
        return cls(**data)

    def strength(self, group: str) -> float:
        """
        Contraction strength of a group.
        """
        if group not in GROUPS:
            raise UnknownGroupError(f"Group should be one of {', '.join(GROUPS)}, got '{group}'.")
        return {"control": 0.0, "pre": self.pre_fraction, "manifest": 1.0}[group] * self.atrophy_strength


def load_phantom_config(path: str | Path) -> PhantomConfig:
    """
    Read a phantom configuration JSON file.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidPhantomConfigError(f"Cannot read phantom configuration {path}.") from exc
    return PhantomConfig.from_dict(data)


def _offsets_mm(cfg: PhantomConfig) -> np.ndarray:
    grid = np.indices(cfg.dims, dtype=np.float64)
    center = np.array(cfg.atrophy_center, dtype=np.float64)
    spacing = np.array(cfg.spacing)
    return np.moveaxis(grid, 0, -1) * spacing - center * spacing


def atrophy_field(cfg: PhantomConfig, strength: float) -> np.ndarray:
    """
    Radial contraction u(x) = s (x - c) exp(-|x - c|^2 / (2 r^2)), in mm, shape (nx, ny, nz, 3).
    """
    offsets = _offsets_mm(cfg)
    squared = np.sum(offsets**2, axis=-1, keepdims=True)
    return strength * offsets * np.exp(-squared / (2.0 * cfg.atrophy_radius_mm**2))


def band_limited_noise(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """
    White Gaussian noise low-passed in Fourier space, scaled to ``noise_amplitude`` per component.
    """
    white = rng.standard_normal(cfg.dims + (3,))
    if cfg.noise_amplitude == 0.0:
        return np.zeros_like(white)
    frequencies = np.meshgrid(
        *(2.0 * np.pi * fft.fftfreq(n, d=s) for n, s in zip(cfg.dims, cfg.spacing)), indexing="ij"
    )
    squared = sum(k**2 for k in frequencies)
    transfer = np.exp(-0.5 * squared * cfg.noise_correlation_length**2)
    smooth = fft.ifftn(fft.fftn(white, axes=(0, 1, 2)) * transfer[..., np.newaxis], axes=(0, 1, 2)).real
    scale = smooth.reshape(-1, 3).std(axis=0)
    scale[scale == 0.0] = 1.0
    return smooth / scale * cfg.noise_amplitude


def _draw_age(cfg: PhantomConfig, group: str, rng: np.random.Generator) -> float:
    low, high = cfg.age_ranges[group]
    return float(rng.uniform(low, high))


def generate_subject(
    cfg: PhantomConfig,
    group: str,
    rng: np.random.Generator,
    subject_id: str = "subject",
    scan_id: str = "scan0",
) -> Tuple[Volume, SubjectMeta]:
    """
    Displacement field and metadata of one synthetic scan.
    """
    strength = cfg.strength(group)
    age = _draw_age(cfg, group, rng)
    displacement = atrophy_field(cfg, strength) + band_limited_noise(cfg, rng)
    meta = SubjectMeta(subject_id=subject_id, scan_id=scan_id, age=age, label=GROUP_LABELS[group])
    return Volume.from_array(displacement, spacing=cfg.spacing), meta


def _subject_scans(cfg: PhantomConfig, group: str, subject_id: str, rng: np.random.Generator) -> List:
    strength = cfg.strength(group)
    age = _draw_age(cfg, group, rng)
    base = atrophy_field(cfg, strength)
    scans = []
    for scan in range(cfg.scans_per_subject):
        displacement = base + band_limited_noise(cfg, rng)
        meta = SubjectMeta(subject_id=subject_id, scan_id=f"scan{scan}", age=age + scan, label=GROUP_LABELS[group])
        scans.append((Volume.from_array(displacement, spacing=cfg.spacing), meta))
    return scans


def _sphere(cfg: PhantomConfig, radius_mm: float) -> RoiMask:
    distances = np.sqrt(np.sum(_offsets_mm(cfg) ** 2, axis=-1))
    return RoiMask(occupancy=distances <= radius_mm)


def phantom_roi(cfg: PhantomConfig) -> RoiMask:
    """
    Sphere of twice the atrophy radius around the atrophy center.
    """
    return _sphere(cfg, 2.0 * cfg.atrophy_radius_mm)


def structure_mask(cfg: PhantomConfig) -> RoiMask:
    """
    Sphere of the atrophy radius, the synthetic structure whose volume is measured.
    """
    return _sphere(cfg, cfg.atrophy_radius_mm)


def generate_population(cfg: PhantomConfig, out_dir: str | Path, threads: int = 1) -> Path:
    """
    Write every scan, the ROI and structure masks and a dataset manifest to ``out_dir``.

    Subject i of the population (groups in control, pre, manifest order) draws from
    its own generator seeded with (seed, i), so the output does not depend on ``threads``.
    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = [(group, f"{group}{index:03d}") for group in GROUPS for index in range(cfg.counts[group])]

    def build(position: int) -> List:
        group, subject_id = plan[position]
        return _subject_scans(cfg, group, subject_id, np.random.default_rng([cfg.seed, position]))

    with ThreadPoolExecutor(max_workers=max(threads, 1)) as executor:
        subjects = list(executor.map(build, range(len(plan))))

    records = []
    for (group, _), scans in zip(plan, subjects):
        for displacement, meta in scans:
            name = f"{meta.subject_id}_{meta.scan_id}.f32"
            save_volume(displacement, out_dir / name)
            records.append(
                {
                    "path": name,
                    "subject_id": meta.subject_id,
                    "scan_id": meta.scan_id,
                    "age": meta.age,
                    "label": meta.label,
                    "group": group,
                }
            )
    save_volume(phantom_roi(cfg).to_volume(cfg.spacing), out_dir / "roi.f32")
    save_volume(structure_mask(cfg).to_volume(cfg.spacing), out_dir / "structure.f32")

    manifest = {"roi": "roi.json", "structure": "structure.json", "entries": records}
    manifest_path = out_dir / "manifest.json"
    settings = asdict(cfg)
    try:
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
        (out_dir / "phantom.json").write_text(json.dumps(settings, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetWriteError(f"Cannot write dataset manifest to {out_dir}.") from exc
    logger.info("wrote %d scans of %d subjects to %s", len(records), len(plan), out_dir)
    return manifest_path
