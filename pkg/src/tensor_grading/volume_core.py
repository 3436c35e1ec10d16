"""
Volumetric types, ROI handling and file I/O shared by the grading pipeline.

Volumes are stored flat in x-fastest order with the channels of one voxel
kept together. Two on-disk formats are supported:

* NIfTI-1 (``.nii``, uncompressed, float32), read and written with nibabel.
* Raw ``<name>.f32`` little-endian float32 payload plus a ``<name>.json``
  sidecar holding ``dims``, ``spacing`` and ``channels``.
"""

import json
import logging
from dataclasses import dataclass
from math import prod
from pathlib import Path
from typing import List, Tuple

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError
from nibabel.wrapstruct import WrapStructError

logger = logging.getLogger(__name__)

NIFTI_FLOAT32 = 16
RAW_SUFFIX = ".f32"
SIDECAR_SUFFIX = ".json"
NIFTI_SUFFIX = ".nii"


class TensorGradingError(Exception):
    """
    Base class of every error raised by the package
    """

    def __init__(self, error: str) -> None:
        super().__init__(error)
        self.error = error
        logger.debug(error)


class VolumeReadError(TensorGradingError):
    """
    volume file missing or unreadable
    """


class UnsupportedDataTypeError(TensorGradingError):
    """
    on-disk data type is not float32
    """


class InvalidHeaderError(TensorGradingError):
    """
    header or sidecar field is missing or malformed
    """


class VolumeSizeError(TensorGradingError):
    """
    payload length does not match the declared dims and channels
    """


class NonFiniteValueError(TensorGradingError):
    """
    volume holds NaN or Inf values
    """


class InvalidSpacingError(TensorGradingError):
    """
    voxel spacing must be strictly positive
    """


class VolumeWriteError(TensorGradingError):
    """
    volume could not be written
    """


class DimensionMismatchError(TensorGradingError):
    """
    grids that should share dims do not
    """


class ChannelMismatchError(TensorGradingError):
    """
    volume carries the wrong number of channels for this use
    """


class EmptyMaskListError(TensorGradingError):
    """
    union of an empty list of masks
    """


class EmptyMaskError(TensorGradingError):
    """
    mask without any set voxel has no bounding box
    """


class BoxOutOfRangeError(TensorGradingError):
    """
    bounding box exceeds the volume dims
    """


class InvalidSubjectMetaError(TensorGradingError):
    """
    subject label or age out of range
    """


@dataclass(frozen=True, eq=False)
class Volume:
    """
    A 3-D grid of scalar or multi-channel values.

    * dims: voxel counts (nx, ny, nz)
    * spacing: mm per voxel along each axis
    * channels: 1 for scalars, 3 for displacements, 6 for symmetric tensors, 9 for Jacobians
    * data: flat float64 array, x fastest, one group of ``channels`` values per voxel

    Instances are immutable, the data buffer is read-only.
    """

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float]
    channels: int
    data: np.ndarray

    def __post_init__(self) -> None:
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise InvalidHeaderError("Volume dims should be three positive voxel counts.")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not np.all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise InvalidSpacingError("Volume spacing should be three strictly positive values.")
        channels = int(self.channels)
        if channels < 1:
            raise InvalidHeaderError("Volume channels should be a positive count.")
        data = np.array(self.data, dtype=np.float64).reshape(-1)
        expected = prod(dims) * channels
        if data.size != expected:
            raise VolumeSizeError(f"Volume data holds {data.size} values but dims and channels imply {expected}.")
        if not np.isfinite(data).all():
            raise NonFiniteValueError("Volume data contains non-finite values.")
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array: np.ndarray, spacing: Tuple[float, float, float]) -> "Volume":
        """
        Build a volume from an (nx, ny, nz) or (nx, ny, nz, channels) array.
        """
        values = np.asarray(array, dtype=np.float64)
        if values.ndim == 3:
            values = values[..., np.newaxis]
        if values.ndim != 4:
            raise InvalidHeaderError("Volume array should have 3 or 4 dimensions.")
        flat = values.transpose(2, 1, 0, 3).reshape(-1)
        return cls(dims=values.shape[:3], spacing=spacing, channels=values.shape[3], data=flat)

    @property
    def array(self) -> np.ndarray:
        """
        Read-only (nx, ny, nz, channels) view of the data.
        """
        nx, ny, nz = self.dims
        return self.data.reshape((nz, ny, nx, self.channels)).transpose(2, 1, 0, 3)

    @property
    def num_voxels(self) -> int:
        """
        Number of voxels of the grid.
        """
        return prod(self.dims)

    @property
    def voxel_volume(self) -> float:
        """
        Volume of one voxel in mm^3.
        """
        return float(prod(self.spacing))


@dataclass(frozen=True)
class BoundingBox:
    """
    Inclusive voxel box, lower and upper corners included.
    """

    lower: Tuple[int, int, int]
    upper: Tuple[int, int, int]

    @property
    def shape(self) -> Tuple[int, int, int]:
        """
        Voxel extents of the box.
        """
        return tuple(int(u - l + 1) for l, u in zip(self.lower, self.upper))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        """
        Numpy slices selecting the box from an (nx, ny, nz, ...) array.
        """
        return tuple(slice(int(l), int(u) + 1) for l, u in zip(self.lower, self.upper))


@dataclass(frozen=True, eq=False)
class RoiMask:
    """
    Binary region of interest over a voxel grid.
    """

    occupancy: np.ndarray

    def __post_init__(self) -> None:
        occupancy = np.array(self.occupancy, dtype=bool)
        if occupancy.ndim != 3:
            raise InvalidHeaderError("ROI mask occupancy should be a 3-D array.")
        occupancy.flags.writeable = False
        object.__setattr__(self, "occupancy", occupancy)

    @classmethod
    def from_volume(cls, volume: Volume) -> "RoiMask":
        """
        Every nonzero voxel of a scalar volume belongs to the mask.
        """
        require_channels(volume, 1, "ROI volume")
        return cls(occupancy=volume.array[..., 0] != 0)

    @property
    def dims(self) -> Tuple[int, int, int]:
        """
        Voxel counts of the mask grid.
        """
        return tuple(int(n) for n in self.occupancy.shape)

    @property
    def count(self) -> int:
        """
        Number of set voxels.
        """
        return int(np.count_nonzero(self.occupancy))

    @property
    def bbox(self) -> BoundingBox:
        """
        Tight inclusive bounding box of the set voxels.
        """
        indices = np.argwhere(self.occupancy)
        if indices.size == 0:
            raise EmptyMaskError("ROI mask contains no voxel.")
        return BoundingBox(
            lower=tuple(int(n) for n in indices.min(axis=0)), upper=tuple(int(n) for n in indices.max(axis=0))
        )

    def to_volume(self, spacing: Tuple[float, float, float]) -> Volume:
        """
        Scalar 0/1 volume of the mask.
        """
        return Volume.from_array(self.occupancy.astype(np.float64), spacing=spacing)

    def check_dims(self, dims: Tuple[int, int, int], name: str) -> None:
        """
        Raise if a grid applied to this mask has different dims.
        """
        if tuple(dims) != self.dims:
            raise DimensionMismatchError(f"{name} dims {tuple(dims)} do not match ROI dims {self.dims}.")


@dataclass(frozen=True)
class SubjectMeta:
    """
    Identity and status of one scan.

    label is -1 for manifest HD, +1 for control and 0 for an unlabeled
    (pre-manifest) query.
    """

    subject_id: str
    scan_id: str
    age: float
    label: int

    def __post_init__(self) -> None:
        if self.label not in (-1, 0, 1):
            raise InvalidSubjectMetaError("Subject label should be -1, 0 or +1.")
        if not np.isfinite(self.age) or self.age <= 0:
            raise InvalidSubjectMetaError("Subject age should be a positive number of years.")
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(self, "scan_id", str(self.scan_id))
        object.__setattr__(self, "age", float(self.age))
        object.__setattr__(self, "label", int(self.label))

    @property
    def key(self) -> Tuple[str, str]:
        """
        Unique identity of the scan.
        """
        return self.subject_id, self.scan_id


def require_channels(volume: Volume, channels: int, name: str) -> None:
    """
    Raise if the volume does not carry the expected channel count.
    """
    if volume.channels != channels:
        raise ChannelMismatchError(f"{name} should have {channels} channels, got {volume.channels}.")


def _raw_paths(path: Path) -> Tuple[Path, Path]:
    return path.parent / (path.stem + RAW_SUFFIX), path.parent / (path.stem + SIDECAR_SUFFIX)


def _load_raw(path: Path) -> Volume:
    payload_path, sidecar_path = _raw_paths(path)
    name = sidecar_path.name
    try:
        header = json.loads(sidecar_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise VolumeReadError(f"Cannot read raw volume sidecar {sidecar_path}.") from exc
    except json.JSONDecodeError as exc:
        raise InvalidHeaderError(f"Raw volume sidecar {name} is not valid JSON.") from exc
    for key in ("dims", "spacing", "channels"):
        if key not in header:
            raise InvalidHeaderError(f"Raw volume sidecar {name} misses field '{key}'.")
    dims = header["dims"]
    if not isinstance(dims, list) or len(dims) != 3 or not all(isinstance(n, int) and n > 0 for n in dims):
        raise InvalidHeaderError(f"Field 'dims' of {name} should hold three positive integers.")
    channels = header["channels"]
    if not isinstance(channels, int) or channels < 1:
        raise InvalidHeaderError(f"Field 'channels' of {name} should be a positive integer.")
    spacing = header["spacing"]
    if (
        not isinstance(spacing, list)
        or len(spacing) != 3
        or not all(isinstance(s, (int, float)) and np.isfinite(s) and s > 0 for s in spacing)
    ):
        raise InvalidSpacingError(f"Field 'spacing' of {name} should hold three strictly positive values.")
    dtype = header.get("dtype", "float32")
    if dtype != "float32":
        raise UnsupportedDataTypeError(f"Field 'dtype' of {name} is '{dtype}'; only 'float32' is supported.")
    try:
        payload = payload_path.read_bytes()
    except OSError as exc:
        raise VolumeReadError(f"Cannot read raw volume payload {payload_path}.") from exc
    expected = prod(dims) * channels * 4
    if len(payload) != expected:
        raise VolumeSizeError(
            f"Payload of {payload_path.name} holds {len(payload)} bytes but field 'dims' implies {expected}."
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.isfinite(values).all():
        raise NonFiniteValueError(f"Payload of {payload_path.name} contains non-finite values.")
    return Volume(dims=tuple(dims), spacing=tuple(spacing), channels=channels, data=values)


def _load_nifti(path: Path) -> Volume:
    if not path.is_file():
        raise VolumeReadError(f"Cannot read volume file {path}.")
    try:
        image = nib.load(str(path))
    except (OSError, ValueError, ImageFileError, HeaderDataError, WrapStructError) as exc:
        raise VolumeReadError(f"Cannot read NIfTI header of {path}.") from exc
    header = image.header
    dim = [int(n) for n in header["dim"]]
    if dim[0] not in (3, 4):
        raise InvalidHeaderError(f"NIfTI field 'dim[0]' of {path.name} is {dim[0]}; expected 3 or 4.")
    if min(dim[1:4]) < 1 or (dim[0] == 4 and dim[4] < 1):
        raise InvalidHeaderError(f"NIfTI field 'dim' of {path.name} should hold positive voxel counts.")
    code = int(header["datatype"])
    if code != NIFTI_FLOAT32:
        raise UnsupportedDataTypeError(
            f"NIfTI field 'datatype' of {path.name} is {code}; only float32 ({NIFTI_FLOAT32}) is supported."
        )
    channels = dim[4] if dim[0] == 4 else 1
    expected = prod(dim[1:4]) * channels * 4
    payload = path.stat().st_size - int(header["vox_offset"])
    if payload < expected:
        raise VolumeSizeError(f"Payload of {path.name} holds {payload} bytes but field 'dim' implies {expected}.")
    zooms = header.get_zooms()[:3]
    if min(zooms) <= 0:
        raise InvalidSpacingError(f"NIfTI field 'pixdim' of {path.name} should be strictly positive.")
    values = np.asarray(image.dataobj, dtype=np.float64).reshape(tuple(dim[1:4]) + (channels,), order="F")
    if not np.isfinite(values).all():
        raise NonFiniteValueError(f"Payload of {path.name} contains non-finite values.")
    return Volume.from_array(values, spacing=tuple(float(z) for z in zooms))


def load_volume(path: str | Path) -> Volume:
    """
    Read a NIfTI-1 (``.nii``) or raw (``.f32`` / ``.json``) volume, converted to float64.
    """
    path = Path(path)
    if path.suffix == NIFTI_SUFFIX:
        return _load_nifti(path)
    if path.suffix in (RAW_SUFFIX, SIDECAR_SUFFIX):
        return _load_raw(path)
    raise VolumeReadError(f"Unsupported volume format: {path.name}.")


def save_volume(volume: Volume, path: str | Path) -> None:
    """
    Write a volume as NIfTI-1 when the path ends in ``.nii``, as raw float32 otherwise.
    """
    path = Path(path)
    try:
        if path.suffix == NIFTI_SUFFIX:
            array = volume.array.astype(np.float32)
            zooms = volume.spacing
            if volume.channels == 1:
                array = array[..., 0]
            else:
                zooms = zooms + (1.0,)
            image = nib.Nifti1Image(array, affine=np.diag([*volume.spacing, 1.0]))
            image.header.set_data_dtype(np.float32)
            image.header.set_zooms(zooms)
            nib.save(image, str(path))
            return
        payload_path, sidecar_path = _raw_paths(path)
        payload_path.write_bytes(volume.data.astype("<f4").tobytes())
        sidecar = {
            "dims": list(volume.dims),
            "spacing": list(volume.spacing),
            "channels": volume.channels,
            "dtype": "float32",
        }
        sidecar_path.write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise VolumeWriteError(f"Cannot write volume to {path}.") from exc


def union_bbox(masks: List[RoiMask]) -> RoiMask:
    """
    Voxelwise OR of a list of masks sharing the same grid.
    """
    if not masks:
        raise EmptyMaskListError("Mask list should not be empty.")
    dims = masks[0].dims
    for mask in masks[1:]:
        if mask.dims != dims:
            raise DimensionMismatchError(f"Mask dims {mask.dims} do not match {dims}.")
    return RoiMask(occupancy=np.logical_or.reduce([mask.occupancy for mask in masks]))


def _check_box(box: BoundingBox, dims: Tuple[int, int, int]) -> None:
    for low, high, size in zip(box.lower, box.upper, dims):
        if low < 0 or high >= size or low > high:
            raise BoxOutOfRangeError(f"Bounding box {box.lower}-{box.upper} is out of range for dims {dims}.")


def crop(volume: Volume, box: BoundingBox) -> Volume:
    """
    Copy the voxels of an inclusive box into a new volume, spacing preserved.
    """
    _check_box(box, volume.dims)
    return Volume.from_array(volume.array[box.slices], spacing=volume.spacing)


def crop_mask(mask: RoiMask, box: BoundingBox) -> RoiMask:
    """
    Same as crop, for masks.
    """
    _check_box(box, mask.dims)
    return RoiMask(occupancy=mask.occupancy[box.slices])
