"""Minimal NIfTI-1 reader/writer.

Supports single-file .nii / .nii.gz volumes with the datatypes needed here
(uint8, int16, int32, float32, float64), 3-D or 4-D, sform geometry with
qform fallback. Data on disk follows the NIfTI convention (x fastest); in
memory arrays are indexed [x, y, z(, c)].
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedDatatypeError

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag

_DTYPE_CODES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_nifti(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a NIfTI-1 file.

    Returns (data, affine): data indexed [x, y, z] or [x, y, z, c], affine the
    4x4 voxel-index -> world-mm matrix (sform if set, else qform, else a
    pixdim scaling).
    """
    path = Path(path)
    with _open_maybe_gzip(path) as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated NIfTI header ({len(raw)} bytes)")

    header = raw[:HEADER_SIZE]
    sizeof_hdr = struct.unpack_from("<i", header, 0)[0]
    if sizeof_hdr == HEADER_SIZE:
        end = "<"
    elif struct.unpack_from(">i", header, 0)[0] == HEADER_SIZE:
        end = ">"
    else:
        raise FormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr={sizeof_hdr})")

    magic = header[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad NIfTI magic {magic!r}")
    if magic == b"ni1\x00":
        raise FormatError(f"{path}: two-file NIfTI (.hdr/.img) is not supported")

    dim = struct.unpack_from(end + "8h", header, 40)
    ndim = dim[0]
    if ndim < 3 or ndim > 4:
        raise FormatError(f"{path}: expected 3-D or 4-D volume, got dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if any(d <= 0 for d in shape):
        raise FormatError(f"{path}: non-positive dimension in {shape}")

    dt_code = struct.unpack_from(end + "h", header, 70)[0]
    if dt_code not in _DTYPE_CODES:
        raise UnsupportedDatatypeError(f"{path}: unsupported NIfTI datatype code {dt_code}")
    dtype = _DTYPE_CODES[dt_code].newbyteorder(end)

    pixdim = struct.unpack_from(end + "8f", header, 76)
    vox_offset = int(struct.unpack_from(end + "f", header, 108)[0])
    scl_slope = struct.unpack_from(end + "f", header, 112)[0]
    scl_inter = struct.unpack_from(end + "f", header, 116)[0]
    qform_code = struct.unpack_from(end + "h", header, 252)[0]
    sform_code = struct.unpack_from(end + "h", header, 254)[0]

    n_items = int(np.prod(shape))
    n_bytes = n_items * dtype.itemsize
    if vox_offset < HEADER_SIZE:
        vox_offset = VOX_OFFSET
    if len(raw) < vox_offset + n_bytes:
        raise FormatError(f"{path}: data truncated (need {vox_offset + n_bytes} bytes)")
    flat = np.frombuffer(raw, dtype=dtype, count=n_items, offset=vox_offset)
    data = flat.reshape(shape, order="F")

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float64) * slope + scl_inter

    if sform_code > 0:
        rows = struct.unpack_from(end + "12f", header, 280)
        affine = np.array(
            [rows[0:4], rows[4:8], rows[8:12], [0.0, 0.0, 0.0, 1.0]], dtype=np.float64
        )
    elif qform_code > 0:
        affine = _affine_from_quaternion(header, end, pixdim)
    else:
        affine = np.diag([abs(pixdim[1]) or 1.0, abs(pixdim[2]) or 1.0, abs(pixdim[3]) or 1.0, 1.0])

    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise FormatError(f"{path}: singular affine")
    return np.asarray(data), affine


def _affine_from_quaternion(header: bytes, end: str, pixdim) -> np.ndarray:
    b, c, d = struct.unpack_from(end + "3f", header, 256)
    ox, oy, oz = struct.unpack_from(end + "3f", header, 268)
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scale = np.array([abs(pixdim[1]), abs(pixdim[2]), abs(pixdim[3]) * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = (ox, oy, oz)
    return affine


def write_nifti(path: str | Path, data: np.ndarray, affine: np.ndarray) -> None:
    """Write data ([x,y,z] or [x,y,z,c]) with the given affine as NIfTI-1.

    The array dtype is written as-is and must be one of the supported types.
    Gzip compression is chosen from the filename (.gz suffix).
    """
    path = Path(path)
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise ValueError(f"expected 3-D or 4-D array, got shape {data.shape}")
    dtype = data.dtype.newbyteorder("=")
    if np.dtype(dtype) not in _CODE_FOR_DTYPE:
        raise UnsupportedDatatypeError(f"cannot write dtype {data.dtype}")
    dt_code = _CODE_FOR_DTYPE[np.dtype(dtype)]
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError("affine must be 4x4")

    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    dim = [data.ndim, 1, 1, 1, 1, 1, 1, 1]
    dim[1 : 1 + data.ndim] = data.shape
    pixdim = [1.0, float(spacing[0]), float(spacing[1]), float(spacing[2]), 0.0, 0.0, 0.0, 0.0]

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    header[38] = ord("r")
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, dt_code)
    struct.pack_into("<h", header, 72, np.dtype(dtype).itemsize * 8)
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    header[123] = 2  # spatial units: mm
    struct.pack_into("<h", header, 252, 0)  # qform_code
    struct.pack_into("<h", header, 254, 2)  # sform_code: aligned
    struct.pack_into("<12f", header, 280, *affine[:3, :4].ravel())
    header[344:348] = b"n+1\x00"

    body = np.ascontiguousarray(data.astype(dtype, copy=False)).tobytes(order="F")
    blob = bytes(header) + b"\x00\x00\x00\x00" + body

    if path.suffix == ".gz":
        # mtime pinned so identical volumes produce identical files
        with open(path, "wb") as raw:
            with gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
                fh.write(blob)
    else:
        with open(path, "wb") as fh:
            fh.write(blob)
