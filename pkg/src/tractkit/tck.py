"""Track file I/O in the TCK format.

Layout: a text header that starts with the line `mrtrix tracks`, key: value
lines including `datatype: Float32LE`, `count: N`, and `file: . <offset>`,
an END line, then float32 (x, y, z) triplets in world mm from byte <offset>;
streamlines are separated by NaN triplets and the stream ends with an Inf
triplet. Writing is fully deterministic (no timestamps).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = "mrtrix tracks"


def write_tck(path: str | Path, streamlines: list[np.ndarray], extra_fields: dict | None = None) -> None:
    """Write streamlines (each an (n_i, 3) float array) to a TCK file."""
    path = Path(path)
    fields = {"datatype": "Float32LE", "count": str(len(streamlines))}
    if extra_fields:
        for k, v in extra_fields.items():
            if k not in ("datatype", "count", "file"):
                fields[str(k)] = str(v)

    base_lines = [MAGIC] + [f"{k}: {v}" for k, v in fields.items()]
    base = "\n".join(base_lines) + "\n"
    # the offset counts the header itself, including the file line naming it
    fixed = len(base) + len("file: . \nEND\n")
    offset = fixed + 1
    while offset != fixed + len(str(offset)):
        offset = fixed + len(str(offset))
    header = base + f"file: . {offset}\nEND\n"
    assert len(header) == offset

    chunks = []
    nan_sep = np.full((1, 3), np.nan, dtype="<f4")
    for sl in streamlines:
        pts = np.asarray(sl, dtype="<f4")
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"streamline must be (n, 3), got {pts.shape}")
        chunks.append(pts)
        chunks.append(nan_sep)
    chunks.append(np.full((1, 3), np.inf, dtype="<f4"))
    body = np.vstack(chunks).tobytes()

    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(body)


def read_tck(path: str | Path) -> tuple[list[np.ndarray], dict[str, str]]:
    """Read a TCK file; returns (streamlines, header fields)."""
    path = Path(path)
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0 or raw[:nl].rstrip(b"\r") != MAGIC.encode("ascii"):
        raise FormatError(f"{path}: not a TCK file")

    fields: dict[str, str] = {}
    pos = nl + 1
    offset = None
    while True:
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise FormatError(f"{path}: unterminated TCK header")
        line = raw[pos:nl].decode("ascii", errors="replace").strip()
        pos = nl + 1
        if line == "END":
            break
        if ":" not in line:
            raise FormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
        if key.strip() == "file":
            parts = value.strip().split()
            if len(parts) != 2 or parts[0] != ".":
                raise FormatError(f"{path}: unsupported file field {value!r}")
            offset = int(parts[1])
    if offset is None:
        raise FormatError(f"{path}: missing file field")
    dtype = fields.get("datatype", "")
    if dtype != "Float32LE":
        raise FormatError(f"{path}: unsupported datatype {dtype!r}")

    triplets = np.frombuffer(raw[offset:], dtype="<f4")
    if len(triplets) % 3:
        raise FormatError(f"{path}: body is not a whole number of triplets")
    triplets = triplets.reshape(-1, 3).astype(np.float64)

    streamlines: list[np.ndarray] = []
    current: list[np.ndarray] = []
    ended = False
    for row in triplets:
        if np.isinf(row).all():
            ended = True
            break
        if np.isnan(row).any():
            if current:
                streamlines.append(np.vstack(current))
                current = []
            continue
        current.append(row)
    if current:
        streamlines.append(np.vstack(current))
    if not ended:
        raise FormatError(f"{path}: missing terminating Inf triplet")
    return streamlines, fields
