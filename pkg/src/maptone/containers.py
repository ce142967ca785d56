"""Shared matrix container: magic "NMFH", float32 row-major payload.

Used project-wide for motion-feature matrices, NMF factors, and
spectrograms. The rank field carries the NMF rank for factor matrices and
0 for plain matrices.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"NMFH"
VERSION = 1


class ContainerError(ValueError):
    pass


def save_matrix(path, matrix: np.ndarray, rank: int = 0) -> None:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim != 2:
        raise ContainerError(f"container stores 2D matrices, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, rank, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_matrix(path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: not an NMFH container (bad magic)")
    if len(blob) < 20:
        raise ContainerError(f"{path}: truncated header")
    version, rank, rows, cols = struct.unpack_from("<IIII", blob, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    expect = 20 + 4 * rows * cols
    if len(blob) != expect:
        raise ContainerError(f"{path}: payload size {len(blob) - 20} does not match "
                             f"{rows}x{cols} float32")
    mat = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=20)
    return mat.reshape(rows, cols).copy(), rank
