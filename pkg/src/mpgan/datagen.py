"""Procedural shape families and silhouette dataset synthesis.

Three blocky families provide a known ground-truth 3D distribution: chairs
(seat + back + four legs), tables (top + four legs) and arches (two pillars
+ lintel). Shapes are built on the low-x half grid and mirrored, so every
sample is exactly x-symmetric, binary, and keeps at least one empty voxel
of margin to the grid boundary.

A dataset is a flat collection of binary silhouettes rendered from these
shapes at sampled azimuths. True azimuths, view bins and source shape ids
are oracle metadata: they are written to a separate file and surface only
through `load_oracle`, never through the training-facing `Dataset` handle.

On disk: ``manifest.json`` (spec echo and counts), numbered ``img_*.pgm``
files, and ``oracle.json``. Reference voxel shapes are not stored; they are
regenerated deterministically from the manifest seed via
`reference_shapes`.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import projection, voxel
from .errors import ConfigError
from .views import BIN_COUNT, bin_of_azimuth

TAU = 2.0 * math.pi

FAMILIES = ("chair", "table", "arch")

_MANIFEST = "manifest.json"
_ORACLE = "oracle.json"


def _frac(rng, lo, hi, n):
    """Draw a fraction of the resolution and convert to >= 1 voxels."""
    return max(1, int(round(rng.uniform(lo, hi) * n)))


def _fill(half, x0, x1, y0, y1, z0, z1):
    half[max(x0, 0) : x1, max(y0, 1) : y1, max(z0, 1) : z1] = 1.0


def sample_shape(family: str, resolution: int, rng: np.random.Generator) -> np.ndarray:
    """One binary, x-symmetric shape of the given family."""
    n = resolution
    if family not in FAMILIES:
        raise ConfigError(f"unknown shape family {family!r}; expected one of {FAMILIES}")
    half = np.zeros((n // 2, n, n), dtype=np.float32)
    hx = n // 2

    if family in ("chair", "table"):
        tall = family == "table"
        top_y0 = _frac(rng, 0.50, 0.68, n) if tall else _frac(rng, 0.30, 0.45, n)
        top_t = _frac(rng, 0.08, 0.15, n)
        width = _frac(rng, 0.55, 0.85, n)
        depth = _frac(rng, 0.55, 0.85, n)
        x_lo = max(1, hx - (width + 1) // 2)
        z0 = max(1, (n - depth) // 2)
        z1 = min(n - 1, z0 + depth)
        y1 = min(n - 2, top_y0 + top_t)
        _fill(half, x_lo, hx, top_y0, y1, z0, z1)
        leg_w = _frac(rng, 0.07, 0.13, n)
        for zl in (z0, z1 - leg_w):
            _fill(half, x_lo, x_lo + leg_w, 1, top_y0, zl, zl + leg_w)
        if not tall:
            back_t = _frac(rng, 0.08, 0.15, n)
            back_top = min(n - 2, top_y0 + _frac(rng, 0.35, 0.50, n))
            _fill(half, x_lo, hx, top_y0, back_top, z1 - back_t, z1)
    else:  # arch
        pillar_w = _frac(rng, 0.10, 0.18, n)
        depth = _frac(rng, 0.18, 0.38, n)
        span = _frac(rng, 0.60, 0.85, n)
        height = _frac(rng, 0.55, 0.85, n)
        lintel_t = _frac(rng, 0.10, 0.18, n)
        x_lo = max(1, hx - (span + 1) // 2)
        z0 = max(1, (n - depth) // 2)
        z1 = min(n - 1, z0 + depth)
        y1 = min(n - 1, height)
        _fill(half, x_lo, x_lo + pillar_w, 1, y1, z0, z1)
        _fill(half, x_lo, hx, y1 - lintel_t, y1, z0, z1)

    return voxel.mirror_symmetric(half)


# --- dataset specification ---------------------------------------------------

def _default_azimuth():
    return {"kind": "uniform"}


@dataclass
class DatasetSpec:
    family: str = "chair"
    n_shapes: int = 2000
    views_per_shape: int = 4
    resolution: int = 32
    azimuth: dict = field(default_factory=_default_azimuth)
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown shape family {self.family!r}")
        if self.n_shapes <= 0 or self.views_per_shape <= 0:
            raise ConfigError("shape and view counts must be positive")
        if self.resolution < 8 or self.resolution & (self.resolution - 1):
            raise ConfigError("resolution must be a power of two >= 8")
        kind = self.azimuth.get("kind")
        if kind == "uniform":
            extras = set(self.azimuth) - {"kind"}
            if extras:
                raise ConfigError(f"uniform azimuth spec does not take {sorted(extras)}; "
                                  "set azimuth_kind first when configuring peaks or histograms")
        elif kind == "histogram":
            w = np.asarray(self.azimuth.get("weights", ()), dtype=np.float64)
            if w.shape != (BIN_COUNT,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
                raise ConfigError("histogram azimuth spec needs 16 non-negative weights summing to 1")
        elif kind == "peaks":
            bins = self.azimuth.get("bins", ())
            weights = np.asarray(self.azimuth.get("weights", ()), dtype=np.float64)
            if len(bins) == 0 or len(bins) != len(weights):
                raise ConfigError("peaks azimuth spec needs matching bins and weights")
            if any(not 0 <= b < BIN_COUNT for b in bins):
                raise ConfigError(f"peak bins must lie in [0, {BIN_COUNT})")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-6:
                raise ConfigError("peak weights must be non-negative and sum to 1")
            if self.azimuth.get("kappa", 150.0) <= 0:
                raise ConfigError("peak concentration kappa must be positive")
        else:
            raise ConfigError(f"unknown azimuth spec kind {kind!r}")
        return self


def sample_azimuths(azimuth_spec: dict, count: int, rng: np.random.Generator) -> np.ndarray:
    kind = azimuth_spec["kind"]
    if kind == "uniform":
        return rng.random(count) * TAU
    if kind == "histogram":
        weights = np.asarray(azimuth_spec["weights"], dtype=np.float64)
        bins = rng.choice(BIN_COUNT, size=count, p=weights / weights.sum())
        return (bins + rng.random(count)) * (TAU / BIN_COUNT)
    if kind == "peaks":
        bins = np.asarray(azimuth_spec["bins"])
        weights = np.asarray(azimuth_spec["weights"], dtype=np.float64)
        kappa = float(azimuth_spec.get("kappa", 150.0))
        centers = (bins + 0.5) * (TAU / BIN_COUNT)
        chosen = rng.choice(len(bins), size=count, p=weights / weights.sum())
        return (centers[chosen] + rng.vonmises(0.0, kappa, size=count)) % TAU
    raise ConfigError(f"unknown azimuth spec kind {kind!r}")


# --- dataset construction ----------------------------------------------------

@dataclass
class Dataset:
    """Training-facing silhouette collection; carries no view or shape labels."""

    images: np.ndarray  # (M, N, N) float32 in {0, 1}
    resolution: int
    manifest: dict

    def __len__(self):
        return len(self.images)


@dataclass
class OracleLabels:
    """Evaluation-only ground truth for a procedural dataset."""

    azimuths: np.ndarray
    bins: np.ndarray
    shape_ids: np.ndarray

    def histogram(self) -> np.ndarray:
        counts = np.bincount(self.bins, minlength=BIN_COUNT)
        return counts / counts.sum()


def _shape_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x5A, index])


def reference_shapes(spec: DatasetSpec, count: int | None = None) -> np.ndarray:
    """Regenerate the dataset's ground-truth voxel shapes (evaluation use)."""
    count = spec.n_shapes if count is None else min(count, spec.n_shapes)
    return np.stack([
        sample_shape(spec.family, spec.resolution, _shape_rng(spec.seed, i))
        for i in range(count)
    ])


def render_binary_silhouettes(shapes: np.ndarray, shape_ids: np.ndarray,
                              azimuths: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Exact projections of binary grids, thresholded at 0.5 to {0, 1}."""
    n = shapes.shape[1]
    out = np.empty((len(azimuths), n, n), dtype=np.float32)
    vols = torch.from_numpy(shapes)
    az = torch.from_numpy(np.ascontiguousarray(azimuths, dtype=np.float64))
    ids = np.ascontiguousarray(shape_ids)
    with torch.no_grad():
        for lo in range(0, len(azimuths), batch_size):
            hi = min(lo + batch_size, len(azimuths))
            sils = projection.silhouettes_from_volumes(vols[ids[lo:hi]], az[lo:hi])
            out[lo:hi] = (sils.numpy() >= 0.5).astype(np.float32)
    return out


def build_dataset(spec: DatasetSpec) -> tuple[Dataset, OracleLabels]:
    """Synthesize the silhouette dataset and its (separate) oracle labels.

    Images are ordered by (shape id, view id) so generation is reproducible
    regardless of how the rendering is batched.
    """
    spec.validate()
    shapes = reference_shapes(spec)
    m = spec.n_shapes * spec.views_per_shape
    view_rng = np.random.default_rng([spec.seed, 0x56])
    azimuths = sample_azimuths(spec.azimuth, m, view_rng)
    shape_ids = np.repeat(np.arange(spec.n_shapes), spec.views_per_shape)
    images = render_binary_silhouettes(shapes, shape_ids, azimuths)
    manifest = {
        "format": 1,
        "kind": "procedural",
        "count": m,
        "resolution": spec.resolution,
        "spec": dataclasses.asdict(spec),
    }
    dataset = Dataset(images=images, resolution=spec.resolution, manifest=manifest)
    oracle = OracleLabels(azimuths=azimuths, bins=bin_of_azimuth(azimuths),
                          shape_ids=shape_ids)
    return dataset, oracle


# --- persistence -------------------------------------------------------------

def _require_empty(out_dir, force: bool):
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise ConfigError(f"{out_dir} exists and is not empty (use force to overwrite)")
    os.makedirs(out_dir, exist_ok=True)


def save_dataset(out_dir, dataset: Dataset, oracle: OracleLabels | None = None,
                 force: bool = False) -> None:
    _require_empty(out_dir, force)
    with open(os.path.join(out_dir, _MANIFEST), "w") as f:
        json.dump(dataset.manifest, f, indent=2, sort_keys=True)
    for i, image in enumerate(dataset.images):
        projection.save_pgm(image, os.path.join(out_dir, f"img_{i:06d}.pgm"))
    if oracle is not None:
        with open(os.path.join(out_dir, _ORACLE), "w") as f:
            json.dump({
                "azimuths": oracle.azimuths.tolist(),
                "bins": oracle.bins.tolist(),
                "shape_ids": oracle.shape_ids.tolist(),
            }, f)


def load_manifest(dataset_dir) -> dict:
    path = os.path.join(dataset_dir, _MANIFEST)
    if not os.path.exists(path):
        raise ConfigError(f"{dataset_dir} has no {_MANIFEST}; not a dataset directory")
    with open(path) as f:
        return json.load(f)


def dataset_spec(manifest: dict) -> DatasetSpec:
    spec = manifest.get("spec")
    if spec is None:
        raise ConfigError("dataset manifest carries no generation spec")
    return DatasetSpec(**spec).validate()


def load_dataset(dataset_dir) -> Dataset:
    """Load the training-facing images; oracle labels stay on disk."""
    manifest = load_manifest(dataset_dir)
    count = manifest["count"]
    images = np.stack([
        projection.load_pgm(os.path.join(dataset_dir, f"img_{i:06d}.pgm"))
        for i in range(count)
    ])
    return Dataset(images=images, resolution=manifest["resolution"], manifest=manifest)


def load_oracle(dataset_dir) -> OracleLabels:
    path = os.path.join(dataset_dir, _ORACLE)
    if not os.path.exists(path):
        raise ConfigError(f"{dataset_dir} has no oracle labels")
    with open(path) as f:
        data = json.load(f)
    return OracleLabels(
        azimuths=np.asarray(data["azimuths"], dtype=np.float64),
        bins=np.asarray(data["bins"], dtype=np.int64),
        shape_ids=np.asarray(data["shape_ids"], dtype=np.int64),
    )


def import_silhouettes(src_dir, out_dir, resolution: int, force: bool = False) -> Dataset:
    """Build a dataset from a folder of PGM/PNG mask images (no labels).

    Images are nearest-resized to the target resolution and thresholded at
    0.5. PNG support needs Pillow.
    """
    names = sorted(f for f in os.listdir(src_dir)
                   if f.lower().endswith((".pgm", ".png")))
    if not names:
        raise ConfigError(f"{src_dir} holds no .pgm or .png images")
    images = []
    for name in names:
        path = os.path.join(src_dir, name)
        if name.lower().endswith(".pgm"):
            img = projection.load_pgm(path)
        else:
            try:
                from PIL import Image
            except ImportError as exc:
                raise ConfigError("PNG import needs the pillow package") from exc
            img = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
            img = img[::-1]  # file rows are top-down
        if img.shape != (resolution, resolution):
            try:
                from PIL import Image
            except ImportError as exc:
                raise ConfigError("resizing imported images needs the pillow package") from exc
            resized = Image.fromarray((img * 255).astype(np.uint8)).resize(
                (resolution, resolution), Image.NEAREST)
            img = np.asarray(resized, dtype=np.float32) / 255.0
        images.append((img >= 0.5).astype(np.float32))
    stack = np.stack(images)
    manifest = {"format": 1, "kind": "imported", "count": len(stack),
                "resolution": resolution, "source": os.path.abspath(src_dir)}
    dataset = Dataset(images=stack, resolution=resolution, manifest=manifest)
    save_dataset(out_dir, dataset, oracle=None, force=force)
    return dataset
