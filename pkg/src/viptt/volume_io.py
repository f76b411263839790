"""Volume container, NIfTI-1 reader and the VPT1 tensor format.

Only single-file (``n+1``) little-endian 3D NIfTI-1 is read. Voxels are
rescaled to Hounsfield units and re-ordered so that the first axis indexes
axial slices::

    vol = read_nifti(open("scan.nii", "rb").read())
    vol.dims        # (z, y, x)
"""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionMismatch,
    IOFailure,
    MalformedHeader,
    MalformedTensorFile,
    TruncatedData,
    UnsupportedDatatype,
)

__all__ = [
    "Domain",
    "Volume",
    "NiftiHeader",
    "parse_nifti_header",
    "read_nifti",
    "write_tensor",
    "read_tensor",
    "load_volume",
]


class Domain(enum.Enum):
    HOUNSFIELD = "hounsfield"
    UNIT_NORMALIZED = "unit"


@dataclass(frozen=True, eq=False)
class Volume:
    """A (depth, height, width) float64 grid tagged with its value domain."""

    data: np.ndarray
    domain: Domain = Domain.HOUNSFIELD

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise DimensionMismatch(f"volume must be 3D with positive extents, got {data.shape}")
        if self.domain is Domain.UNIT_NORMALIZED and data.size:
            lo, hi = data.min(), data.max()
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"unit-normalized volume has values outside [0, 1]: [{lo}, {hi}]")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


# --------------------------------------------------------------------------
# NIfTI-1
# --------------------------------------------------------------------------

NIFTI_HEADER_SIZE = 348

_NIFTI_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    8: np.dtype("<i4"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
}


@dataclass(frozen=True)
class NiftiHeader:
    dim_count: int
    dims: tuple[int, int, int]  # x, y, z
    datatype_code: int
    scl_slope: float
    scl_inter: float
    vox_offset: float
    magic: bytes


def parse_nifti_header(buf: bytes) -> NiftiHeader:
    if len(buf) < NIFTI_HEADER_SIZE:
        raise MalformedHeader(f"need {NIFTI_HEADER_SIZE} header bytes, got {len(buf)}")
    (sizeof_hdr,) = struct.unpack_from("<i", buf, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise MalformedHeader(f"sizeof_hdr is {sizeof_hdr}, expected 348")
    magic = bytes(buf[344:348])
    if magic == b"ni1\x00":
        raise MalformedHeader("two-file NIfTI (ni1) is not supported")
    if magic != b"n+1\x00":
        raise MalformedHeader(f"bad magic {magic!r}")
    dim = struct.unpack_from("<8h", buf, 40)
    if not 1 <= dim[0] <= 7:
        # a big-endian file reads dim[0] byte-swapped
        raise MalformedHeader(f"dim[0]={dim[0]} out of range (big-endian files are not supported)")
    if dim[0] != 3:
        raise DimensionMismatch(f"only 3D volumes are accepted, got dim[0]={dim[0]}")
    x, y, z = dim[1:4]
    if min(x, y, z) < 1:
        raise MalformedHeader(f"non-positive extent in dims {(x, y, z)}")
    (datatype,) = struct.unpack_from("<h", buf, 70)
    (vox_offset,) = struct.unpack_from("<f", buf, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", buf, 112)
    return NiftiHeader(3, (x, y, z), datatype, scl_slope, scl_inter, vox_offset, magic)


def read_nifti(buf: bytes) -> Volume:
    """Decode a single-file NIfTI-1 payload into a Hounsfield-domain Volume."""
    hdr = parse_nifti_header(buf)
    dtype = _NIFTI_DTYPES.get(hdr.datatype_code)
    if dtype is None:
        raise UnsupportedDatatype(f"datatype code {hdr.datatype_code}")
    offset = int(hdr.vox_offset)
    if offset != hdr.vox_offset or offset < NIFTI_HEADER_SIZE:
        raise MalformedHeader(f"invalid vox_offset {hdr.vox_offset}")
    x, y, z = hdr.dims
    count = x * y * z
    end = offset + count * dtype.itemsize
    if len(buf) < end:
        raise TruncatedData(f"payload needs {end} bytes, file has {len(buf)}")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    slope = hdr.scl_slope
    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    inter = hdr.scl_inter if np.isfinite(hdr.scl_inter) else 0.0
    # NIfTI stores x fastest, so a C-order reshape is already (z, y, x)
    vals = raw.reshape(z, y, x).astype(np.float64)
    if slope != 1.0 or inter != 0.0:
        vals = vals * float(slope) + float(inter)
    return Volume(vals, Domain.HOUNSFIELD)


# --------------------------------------------------------------------------
# VPT1 tensors
# --------------------------------------------------------------------------

_VPT1_MAGIC = b"VPT1"
_VPT1_VERSION = 1


def write_tensor(path, tensor) -> None:
    arr = np.asarray(tensor)
    if not 1 <= arr.ndim <= 4:
        raise MalformedTensorFile(f"rank must be 1..4, got {arr.ndim}")
    if 0 in arr.shape:
        raise MalformedTensorFile(f"zero-length dimension in shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise MalformedTensorFile("tensor contains non-finite values")
    head = _VPT1_MAGIC + struct.pack("<II", _VPT1_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(arr.tobytes())
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def read_tensor(path) -> np.ndarray:
    """Read a VPT1 file; returns a float32 array."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    if len(buf) < 12 or buf[:4] != _VPT1_MAGIC:
        raise MalformedTensorFile(f"{path}: bad magic {buf[:4]!r}")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != _VPT1_VERSION:
        raise MalformedTensorFile(f"{path}: unsupported version {version}")
    if not 1 <= rank <= 4 or len(buf) < 12 + 8 * rank:
        raise MalformedTensorFile(f"{path}: bad rank {rank}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    if 0 in shape:
        raise MalformedTensorFile(f"{path}: zero-length dimension")
    start = 12 + 8 * rank
    nbytes = int(np.prod(shape, dtype=np.uint64)) * 4
    if len(buf) - start != nbytes:
        raise MalformedTensorFile(f"{path}: payload is {len(buf) - start} bytes, expected {nbytes}")
    return np.frombuffer(buf, dtype="<f4", offset=start).reshape(shape).astype(np.float32)


def load_volume(path) -> Volume:
    """Load a ``.nii`` file or a rank-3 VPT1 tensor as a Volume.

    VPT1 volumes whose values all lie in [0, 1] are tagged unit-normalized,
    anything else is treated as Hounsfield data.
    """
    path = os.fspath(path)
    if path.endswith(".nii"):
        try:
            with open(path, "rb") as fh:
                return read_nifti(fh.read())
        except OSError as exc:
            raise IOFailure(f"cannot read {path}: {exc}") from exc
    arr = read_tensor(path).astype(np.float64)
    if arr.ndim != 3:
        raise DimensionMismatch(f"{path}: expected a rank-3 volume, got shape {arr.shape}")
    unit = arr.min() >= 0.0 and arr.max() <= 1.0
    return Volume(arr, Domain.UNIT_NORMALIZED if unit else Domain.HOUNSFIELD)
