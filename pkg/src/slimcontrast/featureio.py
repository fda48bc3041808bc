"""Flat binary container for feature matrices, with a JSON sidecar.

Layout: 4-byte magic, u32 version, u32 dtype code, u64 rows, u64 cols,
then row-major raw data. The sidecar (same path + ".json") duplicates the
shape/dtype in readable form plus free-form metadata.
"""

from __future__ import annotations

import json
import struct
import time
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"SCFT"
VERSION = 1
HEADER = struct.Struct("<4sIIQQ")
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def write_features(path: str | Path, array: np.ndarray,
                   extra: Optional[dict] = None) -> Path:
    path = Path(path)
    array = np.ascontiguousarray(array)
    if array.ndim != 2:
        raise ValueError(f"feature matrices must be 2d, got shape {array.shape}")
    if array.dtype not in DTYPE_CODES:
        array = array.astype(np.float32)
    n, d = array.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, DTYPE_CODES[array.dtype], n, d))
        fh.write(array.tobytes())
    sidecar = {
        "dtype": str(array.dtype),
        "rows": n,
        "cols": d,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "extra": extra or {},
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    return path


def read_features(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(HEADER.size)
        if len(header) != HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, code, n, d = HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a feature container (bad magic {magic!r})")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        if code not in CODE_DTYPES:
            raise ValueError(f"{path}: unknown dtype code {code}")
        dtype = CODE_DTYPES[code]
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != n * d:
        raise ValueError(f"{path}: expected {n * d} values, found {data.size}")
    return data.reshape(n, d).copy()


class RowStreamWriter:
    """Append rows incrementally; the row count is patched into the header on close."""

    def __init__(self, path: str | Path, dim: int, dtype=np.float32,
                 extra: Optional[dict] = None):
        self.path = Path(path)
        self.dim = dim
        self.dtype = np.dtype(dtype)
        if self.dtype not in DTYPE_CODES:
            raise ValueError(f"unsupported dtype {dtype}")
        self.extra = extra or {}
        self.rows = 0
        self._fh = open(self.path, "wb")
        self._fh.write(HEADER.pack(MAGIC, VERSION, DTYPE_CODES[self.dtype], 0, dim))

    def append(self, rows: np.ndarray) -> None:
        rows = np.ascontiguousarray(rows, dtype=self.dtype)
        if rows.ndim == 1:
            rows = rows.reshape(1, -1)
        if rows.shape[1] != self.dim:
            raise ValueError(f"expected rows of dim {self.dim}, got {rows.shape[1]}")
        self._fh.write(rows.tobytes())
        self.rows += rows.shape[0]

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.seek(0)
        self._fh.write(HEADER.pack(MAGIC, VERSION, DTYPE_CODES[self.dtype], self.rows, self.dim))
        self._fh.close()
        sidecar = {
            "dtype": str(self.dtype),
            "rows": self.rows,
            "cols": self.dim,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "extra": self.extra,
        }
        Path(str(self.path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
