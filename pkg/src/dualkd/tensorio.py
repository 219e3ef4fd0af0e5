"""Flat binary tensor container with a text sidecar header.

Payload: all tensors concatenated as little-endian float64, in header order.
Header (same path + ".hdr"): one line per tensor,
    name dtype ndim dim0 dim1 ...
Names may not contain whitespace.  Used for weight files, optimizer moments
and feature dumps.
"""

from __future__ import annotations

import os

import numpy as np

HEADER_SUFFIX = ".hdr"
_DTYPE_TAG = "f8"


def save_tensors(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    """Write `tensors` (name -> array-like) to `path` (+ sidecar header)."""
    path = os.fspath(path)
    lines = []
    blobs = []
    for name, value in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"bad tensor name {name!r}: must be non-empty, no whitespace")
        # note: ascontiguousarray would promote 0-d to 1-d; tobytes copies anyway
        arr = np.asarray(value, dtype="<f8")
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {_DTYPE_TAG} {arr.ndim}{' ' + dims if dims else ''}")
        blobs.append(arr.tobytes())
    with open(path + HEADER_SUFFIX, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
    with open(path, "wb") as fb:
        for blob in blobs:
            fb.write(blob)


def load_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    """Read a container written by save_tensors.  Returns name -> float64 array."""
    path = os.fspath(path)
    header_path = path + HEADER_SUFFIX
    if not os.path.exists(header_path):
        raise FileNotFoundError(f"missing sidecar header: {header_path}")
    entries: list[tuple[str, tuple[int, ...]]] = []
    with open(header_path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 3 or parts[1] != _DTYPE_TAG:
                raise ValueError(f"{header_path}:{lineno}: malformed header line {line!r}")
            ndim = int(parts[2])
            dims = tuple(int(d) for d in parts[3 : 3 + ndim])
            if len(dims) != ndim:
                raise ValueError(f"{header_path}:{lineno}: expected {ndim} dims")
            entries.append((parts[0], dims))
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fb:
        raw = fb.read()
    offset = 0
    for name, dims in entries:
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise ValueError(f"payload truncated while reading {name!r}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        out[name] = arr.reshape(dims).astype(np.float64, copy=True)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"payload has {len(raw) - offset} trailing bytes")
    return out
