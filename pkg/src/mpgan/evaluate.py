"""Quantitative evaluation: Frechet distance over voxel features, view
classification accuracy, and view-distribution recovery error.

The Frechet score between two sample sets is
``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`` over Gaussian fits of
their feature embeddings. The matrix square root is taken in the symmetric
form sqrt(S1)^... via eigendecompositions of S1 and sqrt(S1) S2 sqrt(S1);
eigenvalues below -1e-6 are an error, small negatives are clamped to zero.

Features come from a small 3D convolutional classifier trained once to
distinguish the procedural shape families; its checkpoint is frozen so
scores stay comparable across runs. Occupancy grids are binarized at 0.5
before feature extraction, matching the binary shapes the extractor was
trained on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import datagen, nets, views
from .errors import ConfigError

FEATURE_DIM = 64


class VoxelFeatureExtractor(nn.Module):
    """3D conv classifier over binary voxel grids; the globally pooled
    penultimate activations are the FID feature embedding."""

    def __init__(self, resolution: int, n_classes: int = len(datagen.FAMILIES),
                 feature_dim: int = FEATURE_DIM):
        super().__init__()
        self.resolution = resolution
        self.feature_dim = feature_dim
        self.n_classes = n_classes
        n_blocks = resolution.bit_length() - 2  # stride-2 blocks down to spatial 2
        base = max(feature_dim >> (n_blocks - 1), 4)
        channels = [1] + [min(base << i, feature_dim) for i in range(n_blocks)]
        channels[-1] = feature_dim
        layers = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            layers += [nn.Conv3d(c_in, c_out, 4, stride=2, padding=1),
                       nn.BatchNorm3d(c_out),
                       nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(feature_dim, n_classes)

    def features(self, vols: torch.Tensor) -> torch.Tensor:
        h = self.body(vols.unsqueeze(1))
        return h.mean(dim=(2, 3, 4))

    def forward(self, vols: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(vols))


def train_feature_extractor(resolution: int, rng: np.random.Generator,
                            n_per_family: int = 150, steps: int = 600,
                            batch_size: int = 32, learning_rate: float = 1e-3):
    """Train the family classifier used as the frozen feature extractor.

    Returns (extractor, held-out accuracy over a 1/6 split).
    """
    grids, labels = [], []
    for ci, family in enumerate(datagen.FAMILIES):
        family_seed = int(rng.integers(2**31))
        for i in range(n_per_family):
            grids.append(datagen.sample_shape(family, resolution,
                                              np.random.default_rng([family_seed, i])))
            labels.append(ci)
    grids = np.stack(grids)
    labels = np.asarray(labels, dtype=np.int64)
    order = rng.permutation(len(grids))
    grids, labels = grids[order], labels[order]
    n_held = max(len(grids) // 6, 1)
    held_grids, held_labels = grids[:n_held], labels[:n_held]
    grids, labels = grids[n_held:], labels[n_held:]

    model = VoxelFeatureExtractor(resolution)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    data = torch.from_numpy(grids)
    target = torch.from_numpy(labels)
    model.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, len(grids), size=batch_size))
        loss = nn.functional.cross_entropy(model(data[idx]), target[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    with torch.no_grad():
        pred = model(torch.from_numpy(held_grids)).argmax(1).numpy()
    return model, float((pred == held_labels).mean())


def save_extractor(path, model: VoxelFeatureExtractor) -> None:
    manifest = {"kind": "feature-extractor", "resolution": model.resolution,
                "feature_dim": model.feature_dim, "n_classes": model.n_classes,
                "format": 1}
    nets.save_checkpoint(path, manifest, nets.module_tensors(model, "extractor"))


def load_extractor(path) -> VoxelFeatureExtractor:
    manifest, tensors = nets.load_checkpoint(path)
    if manifest.get("kind") != "feature-extractor":
        raise ConfigError(f"{path} is not a feature-extractor checkpoint")
    model = VoxelFeatureExtractor(manifest["resolution"], n_classes=manifest["n_classes"],
                                  feature_dim=manifest["feature_dim"])
    nets.load_module_tensors(model, tensors, "extractor")
    model.eval()
    return model


def extract_features(model: VoxelFeatureExtractor, grids: np.ndarray,
                     batch_size: int = 128, threshold: float = 0.5) -> np.ndarray:
    """Binarize grids at `threshold` and embed them; returns (M, d)."""
    from .voxel import binarize

    model.eval()
    out = np.empty((len(grids), model.feature_dim), dtype=np.float64)
    with torch.no_grad():
        for lo in range(0, len(grids), batch_size):
            batch = binarize(np.asarray(grids[lo : lo + batch_size]), threshold)
            out[lo : lo + len(batch)] = model.features(torch.from_numpy(batch)).double().numpy()
    return out


@dataclass
class FidReport:
    mu1: np.ndarray
    mu2: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray
    score: float


def _psd_sqrt(matrix: np.ndarray, eig_floor: float = -1e-6) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(matrix)
    if eigvals.min() < eig_floor:
        raise ValueError(f"covariance has a negative eigenvalue {eigvals.min():.3e}")
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def fid_from_features(feats1: np.ndarray, feats2: np.ndarray) -> FidReport:
    feats1 = np.asarray(feats1, dtype=np.float64)
    feats2 = np.asarray(feats2, dtype=np.float64)
    d = feats1.shape[1]
    if feats2.shape[1] != d:
        raise ValueError("feature sets have different dimensions")
    if len(feats1) < d + 1 or len(feats2) < d + 1:
        raise ValueError(f"need at least d+1={d + 1} samples per set for a full-rank covariance")
    if not (np.isfinite(feats1).all() and np.isfinite(feats2).all()):
        raise ValueError("non-finite feature values")
    mu1, mu2 = feats1.mean(0), feats2.mean(0)
    sigma1 = np.cov(feats1, rowvar=False)
    sigma2 = np.cov(feats2, rowvar=False)

    root1 = _psd_sqrt(sigma1)
    inner = root1 @ sigma2 @ root1
    inner = (inner + inner.T) / 2.0
    eigvals = np.linalg.eigvalsh(inner)
    if eigvals.min() < -1e-6:
        raise ValueError(f"cross term has a negative eigenvalue {eigvals.min():.3e}")
    trace_sqrt = np.sqrt(np.clip(eigvals, 0.0, None)).sum()

    score = float(((mu1 - mu2) ** 2).sum() + np.trace(sigma1) + np.trace(sigma2) - 2.0 * trace_sqrt)
    if score < -1e-4:
        raise ValueError(f"Frechet score {score} below the numerical floor")
    return FidReport(mu1=mu1, mu2=mu2, sigma1=sigma1, sigma2=sigma2, score=max(score, 0.0))


def fid(real_grids: np.ndarray, generated_grids: np.ndarray,
        extractor: VoxelFeatureExtractor, threshold: float = 0.5) -> FidReport:
    """Frechet distance between feature embeddings of two voxel-grid sets."""
    return fid_from_features(extract_features(extractor, real_grids, threshold=threshold),
                             extract_features(extractor, generated_grids, threshold=threshold))


def view_accuracy(classifier, silhouettes: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 view-bin accuracy of the classifier on labeled silhouettes."""
    if len(silhouettes) == 0:
        raise ValueError("need at least one labeled silhouette")
    probs = views.predict_probabilities(classifier, silhouettes)
    return float((probs.argmax(1) == np.asarray(labels)).mean())


def view_distribution_error(predicted, reference) -> float:
    """Total-variation distance between two 16-bin view histograms."""
    p = np.asarray(getattr(predicted, "histogram", predicted), dtype=np.float64)
    q = np.asarray(getattr(reference, "histogram", reference), dtype=np.float64)
    for hist in (p, q):
        if hist.shape != p.shape or np.any(hist < 0) or abs(hist.sum() - 1.0) > 1e-6:
            raise ValueError("view histograms must be non-negative and sum to 1")
    return float(0.5 * np.abs(p - q).sum())


def pooled_slot_histogram(slots) -> np.ndarray:
    """Dataset-level view histogram recovered from slots: the size-weighted
    mixture of the slot histograms."""
    total = sum(len(s.images) for s in slots)
    pooled = np.zeros(views.BIN_COUNT)
    for s in slots:
        pooled += (len(s.images) / total) * s.view_dist.histogram
    return pooled
