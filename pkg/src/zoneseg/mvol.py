"""MVOL volume file format: bit-exact 3D volumes with voxel spacing.

Layout, little-endian throughout:

    magic   "MVOL"           4 bytes
    version u32 = 1
    dtype   u8               0 = IEEE-754 float64 intensity, 1 = u8 label
    dims    u32 x 3          nx, ny, nz
    spacing f64 x 3          voxel size in mm per axis
    payload nx*ny*nz values  x-fastest order

"x-fastest" means the flat index of voxel (x, y, z) is
``x + nx*y + nx*ny*z`` (Fortran order for an (nx, ny, nz) array).  The
axial slice at index k is ``data[:, :, k]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    FormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)

MAGIC = b"MVOL"
VERSION = 1
DTYPE_INTENSITY = 0
DTYPE_LABEL = 1

_HEADER = struct.Struct("<4sIBIIIddd")


@dataclass
class Volume:
    """A 3D volume plus voxel spacing; data shape is (nx, ny, nz)."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    @property
    def is_label(self) -> bool:
        return self.data.dtype == np.uint8

    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


def write_mvol(volume: Volume, path) -> None:
    data = volume.data
    if data.ndim != 3:
        raise ValueError(f"volume data must be 3D, got shape {data.shape}")
    if data.dtype == np.float64:
        code = DTYPE_INTENSITY
    elif data.dtype == np.uint8:
        code = DTYPE_LABEL
    else:
        raise ValueError(
            f"volume dtype must be float64 (intensity) or uint8 (label), "
            f"got {data.dtype}"
        )
    sx, sy, sz = (float(s) for s in volume.spacing)
    if sx <= 0 or sy <= 0 or sz <= 0:
        raise ValueError(f"voxel spacing must be positive, got {volume.spacing}")
    nx, ny, nz = data.shape
    header = _HEADER.pack(MAGIC, VERSION, code, nx, ny, nz, sx, sy, sz)
    with open(path, "wb") as f:
        f.write(header)
        f.write(data.tobytes(order="F"))


def read_mvol(path) -> Volume:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(
            f"{path}: header needs {_HEADER.size} bytes, file has {len(buf)}"
        )
    magic, version, code, nx, ny, nz, sx, sy, sz = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(
            f"{path}: format version {version}, reader supports {VERSION}"
        )
    if code == DTYPE_INTENSITY:
        dtype = np.dtype("<f8")
    elif code == DTYPE_LABEL:
        dtype = np.dtype("u1")
    else:
        raise FormatError(f"{path}: unknown dtype code {code}")
    n_values = nx * ny * nz
    expected = _HEADER.size + n_values * dtype.itemsize
    if len(buf) < expected:
        raise TruncatedFileError(
            f"{path}: payload needs {expected} bytes total, file has {len(buf)}"
        )
    if len(buf) > expected:
        raise FormatError(f"{path}: {len(buf) - expected} trailing bytes")
    data = (
        np.frombuffer(buf, dtype=dtype, count=n_values, offset=_HEADER.size)
        .reshape((nx, ny, nz), order="F")
        .copy(order="F")
    )
    if code == DTYPE_INTENSITY and not np.isfinite(data).all():
        raise FormatError(f"{path}: intensity payload contains non-finite values")
    if code == DTYPE_LABEL and data.size and data.max() > 2:
        raise FormatError(
            f"{path}: label payload contains value {data.max()}, labels are "
            f"0 (background), 1 (central gland), 2 (peripheral zone)"
        )
    return Volume(data=data, spacing=(sx, sy, sz))
