"""Voxel grid representation, symmetry mirroring, thresholding and file I/O.

A voxel grid is a float32 numpy array of shape (N, N, N) holding occupancy
probabilities in [0, 1], indexed [x, y, z] with y as the vertical axis.
A half grid covers the low-x side of the symmetry plane and has shape
(N/2, N, N).

File format (magic ``MPGVOXL1``): 16-byte header (8-byte magic, N as
uint32 little-endian, 4 reserved zero bytes) followed by N^3 float32
little-endian values in x-major, then y, then z order.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import MalformedFileError

VOXEL_MAGIC = b"MPGVOXL1"
_HEADER = struct.Struct("<8sI4s")


def validate_grid(grid: np.ndarray) -> None:
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise ValueError(f"expected cubic (N,N,N) grid, got shape {grid.shape}")
    if np.any(grid < 0.0) or np.any(grid > 1.0):
        raise ValueError("occupancy values must lie in [0, 1]")


def mirror_symmetric(half: np.ndarray) -> np.ndarray:
    """Reflect a (N/2, N, N) half grid across the x = N/2 plane.

    The low-x half of the result equals the input, so the output satisfies
    out[x, y, z] == out[N-1-x, y, z] for every index.
    """
    if half.ndim != 3 or half.shape[1] != half.shape[2] or 2 * half.shape[0] != half.shape[1]:
        raise ValueError(f"expected (N/2, N, N) half grid, got shape {half.shape}")
    return np.concatenate([half, half[::-1]], axis=0)


def binarize(grid: np.ndarray, threshold: float) -> np.ndarray:
    """Threshold occupancies to exact {0, 1}; a value of exactly `threshold`
    maps to 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(grid) >= threshold).astype(np.float32)


def save_grid(grid: np.ndarray, path) -> None:
    validate_grid(grid)
    n = grid.shape[0]
    with open(path, "wb") as f:
        f.write(_HEADER.pack(VOXEL_MAGIC, n, b"\x00" * 4))
        f.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def load_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise MalformedFileError(f"{path}: truncated header")
        magic, n, _reserved = _HEADER.unpack(header)
        if magic != VOXEL_MAGIC:
            raise MalformedFileError(f"{path}: bad magic {magic!r}")
        payload = f.read()
    expected = n * n * n * 4
    if len(payload) != expected:
        raise MalformedFileError(
            f"{path}: payload holds {len(payload)} bytes, header declares {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(n, n, n).copy()
