"""Report figures, rendered headless to SVG files next to the JSON output."""

from __future__ import annotations

import json

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .views import BIN_COUNT  # noqa: E402


def view_histogram_figure(recovered, reference, path, title="View distribution recovery"):
    """Grouped bars: recovered slot-mixture histogram against the reference."""
    recovered = np.asarray(recovered)
    reference = np.asarray(reference)
    x = np.arange(BIN_COUNT)
    width = 0.4
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(x - width / 2, recovered, width, label="recovered", color="#3b6fb6")
    ax.bar(x + width / 2, reference, width, label="reference", color="#e58f3c")
    ax.set_xlabel("azimuth bin")
    ax.set_ylabel("probability")
    ax.set_xticks(x)
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def metric_series_figure(values, path, ylabel, title, xlabel="joint iteration"):
    """Line chart for a per-iteration metric (accuracy, Frechet score, ...)."""
    values = list(values)
    fig, ax = plt.subplots(figsize=(5.5, 3.2))
    ax.plot(np.arange(1, len(values) + 1), values, marker="o", color="#3b6fb6")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def loss_curves_figure(metrics_jsonl_path, path, stride: int = 1):
    """Discriminator and generator loss streams from a metrics JSONL file."""
    steps, d_means, g_losses = [], [], []
    with open(metrics_jsonl_path) as f:
        for line in f:
            rec = json.loads(line)
            steps.append(rec["step"])
            d_means.append(float(np.mean(rec["d_loss"])))
            g_losses.append(rec["g_loss"])
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(steps[::stride], d_means[::stride], label="discriminator (mean over heads)",
            color="#3b6fb6", linewidth=0.9)
    ax.plot(steps[::stride], g_losses[::stride], label="generator",
            color="#e58f3c", linewidth=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("objective value")
    ax.set_title("Adversarial objectives")
    ax.legend(frameon=False)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
