"""Differentiable orthographic silhouette projection of voxel grids.

Conventions, fixed project-wide:

- Grids are indexed [x, y, z], y vertical. Positive azimuth rotates the
  camera counterclockwise when viewed from +y; the volume is inversely
  rotated about its center and resampled with trilinear interpolation
  (out-of-bounds reads are 0).
- The camera is orthographic and looks along the rotated z axis. A
  silhouette pixel is the probability that the ray through it hits at
  least one occupied voxel: 1 - prod_k(1 - x_k) over the z column.
- Silhouettes are float32 arrays of shape (H, W) = (N, N) indexed
  [y, x], row 0 at the bottom; values lie in [0, 1].

Sampling coordinates within 1e-6 of a voxel center are snapped to it, so
axis-aligned azimuths (0, pi/2, pi, 3pi/2) permute voxels exactly instead
of smearing them by the rounding error of cos/sin.

Rendering is linear+product in the occupancies and fully differentiable
with respect to them; `silhouette_gradient` provides the closed-form
adjoint, and the torch ops used in the forward pass support autograd for
training.

Silhouette file formats: binary PGM (P5, thresholded at 0.5, row 0 at the
top of the image) for datasets, and a lossless raw format (magic
``MPGSILH1``: 8-byte magic, H and W as uint32 little-endian, then H*W
float32 little-endian values in row-major order).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import MalformedFileError

TAU = 2.0 * math.pi
SILHOUETTE_MAGIC = b"MPGSILH1"
_SIL_HEADER = struct.Struct("<8sII")

# distance (in voxels) under which a sampling coordinate snaps to a center
SNAP_EPS = 1e-6


@dataclass(frozen=True)
class Viewpoint:
    """Azimuth in [0, 2pi); elevation is carried but fixed to 0 for now."""

    azimuth: float
    elevation: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "azimuth", float(self.azimuth) % TAU)
        if self.elevation != 0.0:
            raise ValueError("non-zero elevation is not supported")


def _corner_weights(n: int, azimuths: torch.Tensor):
    """Trilinear gather indices/weights for rotating (N,N,N) volumes.

    Returns (idx, w): int64 (B, N^3, 8) flat indices into a flattened volume
    and float weights with out-of-bounds corners zeroed. The source of output
    voxel p is R_y(azimuth) applied to p about the grid center.
    """
    b = azimuths.shape[0]
    device = azimuths.device
    center = (n - 1) / 2.0
    ax = torch.arange(n, dtype=torch.float64, device=device) - center
    gx, gy, gz = torch.meshgrid(ax, ax, ax, indexing="ij")
    pts = torch.stack([gx, gy, gz], dim=-1).reshape(-1, 3)  # (N^3, 3)

    ca = torch.cos(azimuths.double())
    sa = torch.sin(azimuths.double())
    rot = torch.zeros(b, 3, 3, dtype=torch.float64, device=device)
    rot[:, 0, 0] = ca
    rot[:, 0, 2] = sa
    rot[:, 1, 1] = 1.0
    rot[:, 2, 0] = -sa
    rot[:, 2, 2] = ca
    src = torch.einsum("bij,nj->bni", rot, pts) + center

    snapped = torch.round(src)
    src = torch.where((src - snapped).abs() < SNAP_EPS, snapped, src)

    base = torch.floor(src)
    frac = src - base
    base = base.long()

    idx_parts = []
    w_parts = []
    for corner in range(8):
        dx, dy, dz = (corner >> 2) & 1, (corner >> 1) & 1, corner & 1
        ix = base[..., 0] + dx
        iy = base[..., 1] + dy
        iz = base[..., 2] + dz
        wx = frac[..., 0] if dx else 1.0 - frac[..., 0]
        wy = frac[..., 1] if dy else 1.0 - frac[..., 1]
        wz = frac[..., 2] if dz else 1.0 - frac[..., 2]
        w = wx * wy * wz
        inside = (
            (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n) & (iz >= 0) & (iz < n)
        )
        flat = (ix.clamp(0, n - 1) * n + iy.clamp(0, n - 1)) * n + iz.clamp(0, n - 1)
        idx_parts.append(flat)
        w_parts.append(w * inside.double())
    return torch.stack(idx_parts, dim=-1), torch.stack(w_parts, dim=-1)


def rotate_volumes(vols: torch.Tensor, azimuths: torch.Tensor) -> torch.Tensor:
    """Rotate a (B, N, N, N) batch by -azimuth about y (differentiable)."""
    b, n = vols.shape[0], vols.shape[1]
    idx, w = _corner_weights(n, azimuths)
    flat = vols.reshape(b, -1)
    gathered = flat.gather(1, idx.reshape(b, -1)).reshape(b, -1, 8)
    return (gathered * w.to(vols.dtype)).sum(-1).reshape(b, n, n, n)


def _rotate_adjoint(grads: torch.Tensor, azimuths: torch.Tensor) -> torch.Tensor:
    """Transpose of `rotate_volumes` as a linear map: scatter-add the
    same trilinear weights back onto the source volume."""
    b, n = grads.shape[0], grads.shape[1]
    idx, w = _corner_weights(n, azimuths)
    contrib = grads.reshape(b, -1, 1) * w.to(grads.dtype)
    out = torch.zeros(b, n * n * n, dtype=grads.dtype, device=grads.device)
    out.scatter_add_(1, idx.reshape(b, -1), contrib.reshape(b, -1))
    return out.reshape(b, n, n, n)


def silhouettes_from_volumes(vols: torch.Tensor, azimuths: torch.Tensor) -> torch.Tensor:
    """Render (B, N, N, N) occupancies to (B, N, N) silhouettes.

    Pixel (v, u) is 1 - prod_k (1 - rotated[u, v, k]): the probability that
    the orthographic ray hits at least one occupied voxel. Differentiable
    w.r.t. the occupancies.
    """
    rotated = rotate_volumes(vols, azimuths)
    hit = 1.0 - torch.prod(1.0 - rotated, dim=3)  # (B, x, y)
    return hit.permute(0, 2, 1)


def _as_volume_batch(grid: np.ndarray) -> torch.Tensor:
    dtype = np.float64 if grid.dtype == np.float64 else np.float32
    return torch.from_numpy(np.ascontiguousarray(grid, dtype=dtype))[None]


def rotate_resample(grid: np.ndarray, view: Viewpoint) -> np.ndarray:
    """Single-grid numpy wrapper around `rotate_volumes`."""
    az = torch.tensor([view.azimuth], dtype=torch.float64)
    with torch.no_grad():
        out = rotate_volumes(_as_volume_batch(grid), az)
    return out[0].numpy()


def silhouette_from_grid(grid: np.ndarray, view: Viewpoint) -> np.ndarray:
    """Single-grid numpy wrapper around `silhouettes_from_volumes`."""
    az = torch.tensor([view.azimuth], dtype=torch.float64)
    with torch.no_grad():
        sil = silhouettes_from_volumes(_as_volume_batch(grid), az)
    return sil[0].numpy()


def silhouette_gradient(grid: np.ndarray, view: Viewpoint, upstream: np.ndarray) -> np.ndarray:
    """Closed-form d(sum(upstream * silhouette))/d(occupancy).

    Chain rule through the hit-probability product: the derivative of
    1 - prod(1 - x_k) w.r.t. x_k is the exclusive product of (1 - x_j) over
    j != k, computed with prefix/suffix cumulative products; the rotation is
    linear, so its adjoint scatters the ray gradients back.
    """
    n = grid.shape[0]
    if upstream.shape != (n, n):
        raise ValueError(f"upstream shape {upstream.shape} does not match silhouette ({n}, {n})")
    dtype = torch.float64 if grid.dtype == np.float64 else torch.float32
    vols = torch.from_numpy(np.ascontiguousarray(grid)).to(dtype)[None]
    az = torch.tensor([view.azimuth], dtype=torch.float64)
    with torch.no_grad():
        rotated = rotate_volumes(vols, az)
        one_minus = 1.0 - rotated
        cp = torch.cumprod(one_minus, dim=3)
        ones = torch.ones_like(cp[..., :1])
        prefix = torch.cat([ones, cp[..., :-1]], dim=3)
        rev = torch.cumprod(one_minus.flip(3), dim=3).flip(3)
        suffix = torch.cat([rev[..., 1:], ones], dim=3)
        up = torch.from_numpy(np.ascontiguousarray(upstream)).to(dtype)
        grad_rot = up.T[None, :, :, None] * prefix * suffix  # (1, x, y, z)
        grad = _rotate_adjoint(grad_rot, az)
    return grad[0].numpy()


def sample_viewpoint(dist, rng: np.random.Generator) -> Viewpoint:
    """Draw a viewpoint from a binned azimuth histogram: pick a bin by its
    weight, then an azimuth uniformly inside the bin."""
    hist = np.asarray(getattr(dist, "histogram", dist), dtype=np.float64)
    if hist.ndim != 1 or np.any(hist < 0) or abs(hist.sum() - 1.0) > 1e-6:
        raise ValueError("view histogram must be non-negative and sum to 1")
    nbins = hist.shape[0]
    b = rng.choice(nbins, p=hist / hist.sum())
    azimuth = (b + rng.random()) * TAU / nbins
    return Viewpoint(azimuth)


def save_pgm(sil: np.ndarray, path) -> None:
    """Write a silhouette as binary PGM, thresholded at 0.5. The in-memory
    bottom row becomes the last file row so viewers show y up."""
    h, w = sil.shape
    data = np.where(sil >= 0.5, 255, 0).astype(np.uint8)[::-1]
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def load_pgm(path) -> np.ndarray:
    """Read a binary PGM written by `save_pgm` back to a {0, 1} float array."""
    with open(path, "rb") as f:
        blob = f.read()
    try:
        fields = []
        pos = 0
        while len(fields) < 4:
            if blob[pos : pos + 1] == b"#":
                pos = blob.index(b"\n", pos) + 1
                continue
            end = pos
            while blob[end : end + 1] not in (b" ", b"\t", b"\n", b"\r"):
                end += 1
            if end > pos:
                fields.append(blob[pos:end])
            pos = end + 1
        magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    except (ValueError, IndexError) as exc:
        raise MalformedFileError(f"{path}: unparsable PGM header") from exc
    if magic != b"P5" or maxval != 255:
        raise MalformedFileError(f"{path}: expected binary PGM with maxval 255")
    payload = blob[pos : pos + w * h]
    if len(payload) != w * h:
        raise MalformedFileError(f"{path}: truncated PGM payload")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)[::-1]
    return (img >= 128).astype(np.float32)


def save_silhouette_raw(sil: np.ndarray, path) -> None:
    h, w = sil.shape
    with open(path, "wb") as f:
        f.write(_SIL_HEADER.pack(SILHOUETTE_MAGIC, h, w))
        f.write(np.ascontiguousarray(sil, dtype="<f4").tobytes())


def load_silhouette_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(_SIL_HEADER.size)
        if len(header) != _SIL_HEADER.size:
            raise MalformedFileError(f"{path}: truncated header")
        magic, h, w = _SIL_HEADER.unpack(header)
        if magic != SILHOUETTE_MAGIC:
            raise MalformedFileError(f"{path}: bad magic {magic!r}")
        payload = f.read()
    if len(payload) != h * w * 4:
        raise MalformedFileError(f"{path}: payload does not match declared {h}x{w}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).copy()
