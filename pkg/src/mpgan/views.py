"""View bins, view distributions, K-means clustering of view-probability
vectors, and projection-slot assembly.

The azimuth range [0, 2pi) is split into 16 equal bins. A view distribution
is a normalized 16-bin histogram; each discriminator's slot carries one,
together with the training silhouettes assigned to it. Slots are found by
clustering the classifier's per-image probability vectors (not the argmax
angles), which keeps silhouette-ambiguous views, front/back for instance,
in the same cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import nets, projection
from .errors import ConfigError
from .nets import ViewClassifier

TAU = 2.0 * math.pi
BIN_COUNT = 16

# histogram bins below this weight are treated as outliers and removed
PRUNE_THRESHOLD = 0.10


def bin_of_azimuth(azimuth) -> np.ndarray:
    """Map azimuths to bin indices; bin b covers [2pi*b/16, 2pi*(b+1)/16)."""
    return (np.floor((np.asarray(azimuth) % TAU) / (TAU / BIN_COUNT)).astype(np.int64)) % BIN_COUNT


def bin_range(b: int) -> tuple[float, float]:
    return b * TAU / BIN_COUNT, (b + 1) * TAU / BIN_COUNT


@dataclass(frozen=True)
class ViewDistribution:
    """Normalized histogram over the 16 azimuth bins."""

    histogram: np.ndarray

    def __post_init__(self):
        hist = np.asarray(self.histogram, dtype=np.float64)
        object.__setattr__(self, "histogram", hist)
        if hist.shape != (BIN_COUNT,) or not np.isfinite(hist).all() or np.any(hist < 0):
            raise ValueError("histogram must be 16 finite non-negative weights")
        if abs(hist.sum() - 1.0) > 1e-6:
            raise ValueError(f"histogram must sum to 1, got {hist.sum()}")

    @classmethod
    def uniform(cls) -> "ViewDistribution":
        return cls(np.full(BIN_COUNT, 1.0 / BIN_COUNT))

    @classmethod
    def from_bins(cls, bins: np.ndarray) -> "ViewDistribution":
        counts = np.bincount(np.asarray(bins, dtype=np.int64), minlength=BIN_COUNT)
        if counts.sum() == 0:
            raise ValueError("cannot build a histogram from zero bins")
        return cls(counts / counts.sum())

    @classmethod
    def from_azimuths(cls, azimuths: np.ndarray) -> "ViewDistribution":
        return cls.from_bins(bin_of_azimuth(azimuths))

    def pruned(self, threshold: float = PRUNE_THRESHOLD) -> "ViewDistribution":
        """Zero out bins lighter than `threshold` and renormalize. If every
        bin is below the threshold the dominant bin is kept, so pruning can
        never produce an empty histogram."""
        hist = self.histogram.copy()
        hist[hist < threshold] = 0.0
        if hist.sum() <= 0.0:
            hist = np.zeros(BIN_COUNT)
            hist[int(self.histogram.argmax())] = 1.0
        return ViewDistribution(hist / hist.sum())

    def sample(self, rng: np.random.Generator) -> projection.Viewpoint:
        return projection.sample_viewpoint(self.histogram, rng)


@dataclass
class ProjectionSlot:
    """One discriminator's training pool: its silhouettes plus the view
    histogram its fakes are rendered from."""

    index: int
    view_dist: ViewDistribution
    images: np.ndarray  # (M, H, W) float32

    def __post_init__(self):
        if len(self.images) == 0:
            raise ConfigError(f"projection slot {self.index} has no training images")

    def sample_batch(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.integers(0, len(self.images), size=n)
        return self.images[idx]


# --- K-means ----------------------------------------------------------------

def _kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(len(points))]
    d2 = ((points - centroids[0]) ** 2).sum(1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(len(points))]
        else:
            centroids[i] = points[rng.choice(len(points), p=d2 / total)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(1))
    return centroids


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           max_iter: int = 100, tol: float = 1e-6, reseed_limit: int = 5):
    """Euclidean K-means with K-means++ seeding.

    Returns (centroids, labels, inertia_trace). An emptied cluster is
    re-seeded (distance-squared weighted) at most `reseed_limit` times in
    total before a RuntimeError is raised.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < k:
        raise ValueError(f"need at least {k} points for k={k}, got {len(points)}")
    centroids = _kmeans_plus_plus(points, k, rng)
    labels = np.zeros(len(points), dtype=np.int64)
    inertia_trace = []
    reseeds = 0
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
        labels = d2.argmin(1)
        inertia_trace.append(float(d2[np.arange(len(points)), labels].sum()))
        new_centroids = centroids.copy()
        for i in range(k):
            members = points[labels == i]
            if len(members):
                new_centroids[i] = members.mean(0)
            else:
                reseeds += 1
                if reseeds > reseed_limit:
                    raise RuntimeError(f"k-means cluster {i} stayed empty after {reseed_limit} re-seeds")
                dist = ((points - centroids[labels]) ** 2).sum(1)
                total = dist.sum()
                p = dist / total if total > 0 else None
                new_centroids[i] = points[rng.choice(len(points), p=p)]
        shift = np.abs(new_centroids - centroids).max()
        centroids = new_centroids
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    labels = d2.argmin(1)
    return centroids, labels, inertia_trace


@dataclass
class ClusterAssignment:
    """Per-image cluster ids plus each cluster's pruned view histogram."""

    labels: np.ndarray
    histograms: list[ViewDistribution]
    counts: np.ndarray

    def __post_init__(self):
        if np.any(self.counts == 0):
            raise ConfigError("every cluster must hold at least one image")


def cluster_views(probabilities: np.ndarray, k: int, rng: np.random.Generator,
                  soft_histograms: bool = False) -> ClusterAssignment:
    """K-means over per-image view-probability vectors.

    Each cluster's view histogram is built from the argmax bins of its
    members (or their mean probability vector with `soft_histograms`), then
    pruned of bins below 10% and renormalized.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != BIN_COUNT:
        raise ValueError(f"expected (M, {BIN_COUNT}) probability vectors, got {probs.shape}")
    if np.abs(probs.sum(1) - 1.0).max() > 1e-4:
        raise ValueError("probability vectors must be normalized")
    _, labels, _ = kmeans(probs, k, rng)
    histograms = []
    counts = np.bincount(labels, minlength=k)
    for i in range(k):
        members = probs[labels == i]
        if len(members) == 0:
            raise ConfigError(f"cluster {i} is empty")
        if soft_histograms:
            mean = members.mean(0)
            hist = ViewDistribution(mean / mean.sum())
        else:
            hist = ViewDistribution.from_bins(members.argmax(1))
        histograms.append(hist.pruned())
    return ClusterAssignment(labels=labels, histograms=histograms, counts=counts)


def assign_slots(assignment: ClusterAssignment, images: np.ndarray) -> list[ProjectionSlot]:
    """Partition the dataset images into one slot per cluster."""
    if len(images) != len(assignment.labels):
        raise ValueError("assignment does not cover the dataset")
    slots = []
    for i, hist in enumerate(assignment.histograms):
        member_images = images[assignment.labels == i]
        slots.append(ProjectionSlot(index=i, view_dist=hist, images=member_images))
    return slots


def contiguous_bin_clusters(k: int) -> np.ndarray:
    """Merge the 16 bins into k equal groups of adjacent bins; returns the
    bin -> cluster map."""
    if k < 1 or BIN_COUNT % k:
        raise ValueError(f"cluster count must divide {BIN_COUNT}, got {k}")
    return np.repeat(np.arange(k), BIN_COUNT // k)


def slots_from_bins(bins: np.ndarray, images: np.ndarray, k: int) -> list[ProjectionSlot]:
    """Build slots from known per-image view bins by merging adjacent bins
    into k clusters.

    Each slot's histogram is the unpruned empirical histogram of its
    members' bins: these are exact labels, so the 10% outlier rule for
    predicted views does not apply (it would wrongly collapse the k=1
    slot, whose 16 bins all sit near 6%)."""
    bins = np.asarray(bins, dtype=np.int64)
    if len(bins) != len(images):
        raise ValueError("need one bin per image")
    bin_to_cluster = contiguous_bin_clusters(k)
    labels = bin_to_cluster[bins]
    slots = []
    for i in range(k):
        mask = labels == i
        if not mask.any():
            raise ConfigError(f"no images fall in view cluster {i}")
        hist = ViewDistribution.from_bins(bins[mask])
        slots.append(ProjectionSlot(index=i, view_dist=hist, images=images[mask]))
    return slots


# --- view classifier training ------------------------------------------------

def binned_azimuths(n_shapes: int, rng: np.random.Generator):
    """For each shape, one azimuth uniform inside every bin. Returns the
    flat azimuth array (shape-major) and the matching bin labels."""
    offsets = rng.random((n_shapes, BIN_COUNT))
    azimuths = ((np.arange(BIN_COUNT)[None, :] + offsets) * (TAU / BIN_COUNT)).reshape(-1)
    labels = np.tile(np.arange(BIN_COUNT), n_shapes)
    return azimuths, labels


def render_binned_views(vols: np.ndarray, rng: np.random.Generator,
                        batch_size: int = 256):
    """Render every volume once per view bin at a random azimuth inside the
    bin; returns (silhouettes, bin labels) of length len(vols) * 16."""
    n_shapes, n = vols.shape[0], vols.shape[1]
    azimuths, labels = binned_azimuths(n_shapes, rng)
    shape_idx = np.repeat(np.arange(n_shapes), BIN_COUNT)
    sils = np.empty((n_shapes * BIN_COUNT, n, n), dtype=np.float32)
    vols_t = torch.from_numpy(np.ascontiguousarray(vols, dtype=np.float32))
    az_t = torch.from_numpy(azimuths)
    with torch.no_grad():
        for lo in range(0, len(azimuths), batch_size):
            hi = min(lo + batch_size, len(azimuths))
            sils[lo:hi] = projection.silhouettes_from_volumes(
                vols_t[shape_idx[lo:hi]], az_t[lo:hi]).numpy()
    return sils, labels


def synthesize_view_training_set(gen, n_shapes: int, rng: np.random.Generator,
                                 batch_size: int = 256):
    """Render generator samples once per view bin.

    For each synthesized shape and each of the 16 bins, one silhouette is
    rendered at an azimuth uniform within that bin and labeled with the bin
    index. Returns (silhouettes, labels) of length n_shapes * 16.
    """
    vols = nets.sample_volumes(gen, n_shapes, rng)
    return render_binned_views(vols, rng, batch_size=batch_size)


def train_view_classifier(silhouettes: np.ndarray, labels: np.ndarray, steps: int,
                          rng: np.random.Generator, batch_size: int = 32,
                          learning_rate: float = 1e-4, betas=(0.5, 0.9),
                          base_channels: int = 32):
    """Cross-entropy training of the view-bin classifier.

    Returns (classifier, final training accuracy). Training data must cover
    all 16 bins.
    """
    labels = np.asarray(labels, dtype=np.int64)
    present = np.unique(labels)
    if len(present) != BIN_COUNT:
        missing = sorted(set(range(BIN_COUNT)) - set(present.tolist()))
        raise ConfigError(f"view training data is missing bins {missing}")
    clf = ViewClassifier(silhouettes.shape[1], base_channels=base_channels)
    opt = torch.optim.Adam(clf.parameters(), lr=learning_rate, betas=betas)
    images_t = torch.from_numpy(np.ascontiguousarray(silhouettes, dtype=np.float32))
    labels_t = torch.from_numpy(labels)
    clf.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(labels), size=batch_size))
        loss = torch.nn.functional.cross_entropy(clf(images_t[idx]), labels_t[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    accuracy = float((predict_probabilities(clf, silhouettes).argmax(1) == labels).mean())
    return clf, accuracy


def predict_probabilities(clf: ViewClassifier, images: np.ndarray,
                          batch_size: int = 512) -> np.ndarray:
    """Eval-mode view probabilities for a silhouette array, shape (M, 16)."""
    was_training = clf.training
    clf.eval()
    out = np.empty((len(images), clf.n_bins), dtype=np.float64)
    with torch.no_grad():
        for lo in range(0, len(images), batch_size):
            batch = torch.from_numpy(np.ascontiguousarray(images[lo : lo + batch_size], dtype=np.float32))
            out[lo : lo + len(batch)] = clf.probabilities(batch).double().numpy()
    clf.train(was_training)
    return out
