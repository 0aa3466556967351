"""Self-contained NIfTI-1 I/O.

The tractography engine exchanges data with this package purely through
NIfTI files (direction maps and label volumes in, 5TT label volumes out),
so a minimal reader/writer for those files lives here.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352

_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
_CODES = {v: k for k, v in _DTYPES.items()}


def read_nifti(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (data [x,y,z(,c)], affine 4x4)."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise ValueError(f"{path}: truncated NIfTI header")
    end = "<"
    if struct.unpack_from("<i", raw, 0)[0] != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            end = ">"
        else:
            raise ValueError(f"{path}: not NIfTI-1")
    if raw[344:348] != b"n+1\x00":
        raise ValueError(f"{path}: unsupported NIfTI variant")
    dim = struct.unpack_from(end + "8h", raw, 40)
    shape = tuple(int(d) for d in dim[1 : 1 + dim[0]])
    code = struct.unpack_from(end + "h", raw, 70)[0]
    if code not in _DTYPES:
        raise ValueError(f"{path}: unsupported datatype code {code}")
    dtype = _DTYPES[code].newbyteorder(end)
    offset = int(struct.unpack_from(end + "f", raw, 108)[0]) or VOX_OFFSET
    n = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=offset).reshape(shape, order="F")
    sform = struct.unpack_from(end + "h", raw, 254)[0]
    if sform > 0:
        rows = struct.unpack_from(end + "12f", raw, 280)
        affine = np.array([rows[0:4], rows[4:8], rows[8:12], [0, 0, 0, 1]], dtype=np.float64)
    else:
        pixdim = struct.unpack_from(end + "8f", raw, 76)
        affine = np.diag([abs(pixdim[1]) or 1.0, abs(pixdim[2]) or 1.0, abs(pixdim[3]) or 1.0, 1.0])
    return np.asarray(data), affine


def write_nifti(path: str | Path, data: np.ndarray, affine: np.ndarray) -> None:
    path = Path(path)
    data = np.asarray(data)
    dtype = data.dtype.newbyteorder("=")
    if np.dtype(dtype) not in _CODES:
        raise ValueError(f"cannot write dtype {data.dtype}")
    affine = np.asarray(affine, dtype=np.float64)
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = [data.ndim, 1, 1, 1, 1, 1, 1, 1]
    dim[1 : 1 + data.ndim] = data.shape
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, _CODES[np.dtype(dtype)])
    struct.pack_into("<h", header, 72, dtype.itemsize * 8)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)
    header[123] = 2
    struct.pack_into("<h", header, 254, 2)
    struct.pack_into("<12f", header, 280, *affine[:3, :4].ravel())
    header[344:348] = b"n+1\x00"
    blob = bytes(header) + b"\x00\x00\x00\x00" + np.ascontiguousarray(data.astype(dtype)).tobytes(order="F")
    if path.suffix == ".gz":
        with open(path, "wb") as rawfh:
            with gzip.GzipFile(fileobj=rawfh, mode="wb", mtime=0) as fh:
                fh.write(blob)
    else:
        path.write_bytes(blob)
