"""Alternating training of the shape GAN and the view classifier.

The loop starts from a single-discriminator GAN trained under an assumed
uniform view distribution (bootstrap). Each joint iteration then:

1. synthesizes a labeled view training set by rendering the current
   generator's shapes once per view bin, and trains a fresh view
   classifier on it;
2. predicts view probabilities for every unannotated training silhouette;
3. clusters the probability vectors into K slots with per-slot view
   histograms;
4. trains the multi-discriminator GAN on those slots.

The generator, the discriminator set and their optimizer state persist
across iterations; the classifier is re-initialized each iteration so it
always reflects the current generator rather than inheriting biases from
earlier, worse ones.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, asdict, replace

import numpy as np
import torch

from . import evaluate, nets, train, views
from .errors import ConfigError
from .train import ModelBundle, TrainConfig
from .views import ProjectionSlot, ViewDistribution


@dataclass
class JointConfig:
    bootstrap_steps: int = 2000
    gan_steps: int = 2000
    classifier_steps: int = 1500
    joint_iterations: int = 5
    clusters: int = 8
    view_shapes: int = 1000
    classifier_channels: int = 32
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "JointConfig":
        for name in ("bootstrap_steps", "gan_steps", "classifier_steps",
                     "joint_iterations", "clusters", "view_shapes", "classifier_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        self.train.validate()
        return self

    def as_manifest(self) -> dict:
        data = asdict(self)
        data["train"] = asdict(self.train)
        return data


def _param_checksum(module: torch.nn.Module) -> float:
    with torch.no_grad():
        return float(sum(p.double().abs().sum() for p in module.parameters()))


def bootstrap(cfg: JointConfig, dataset, rng: np.random.Generator,
              metrics: train.MetricsWriter | None = None) -> ModelBundle:
    """Single-discriminator GAN over the whole dataset with a uniform view
    histogram; seeds the joint loop."""
    cfg.validate()
    if len(dataset.images) == 0:
        raise ConfigError("cannot bootstrap on an empty dataset")
    boot_cfg = replace(cfg.train, n_heads=1, iterations=cfg.bootstrap_steps)
    bundle = train.build_models(boot_cfg)
    slot = ProjectionSlot(0, ViewDistribution.uniform(), dataset.images)
    train.train_mp_gan(bundle, [slot], boot_cfg, rng, metrics=metrics)
    return bundle


def expand_heads(bundle: ModelBundle, cfg: JointConfig) -> ModelBundle:
    """Grow the bootstrapped single head into the K-head discriminator set:
    the shared stem and the trained head weights seed every new head. The
    generator and its optimizer state carry over unchanged."""
    if bundle.discriminators.n_heads == cfg.clusters:
        return bundle
    mp_cfg = replace(cfg.train, n_heads=cfg.clusters)
    expanded = train.build_models(mp_cfg)
    expanded.generator = bundle.generator
    expanded.gen_opt = bundle.gen_opt
    expanded.discriminators.stem.load_state_dict(bundle.discriminators.stem.state_dict())
    head_state = bundle.discriminators.heads[0].state_dict()
    for head in expanded.discriminators.heads:
        head.load_state_dict(head_state)
    expanded.disc_opt = torch.optim.Adam(expanded.discriminators.parameters(),
                                         lr=mp_cfg.learning_rate,
                                         betas=(mp_cfg.adam_beta1, mp_cfg.adam_beta2))
    expanded.step = bundle.step
    return expanded


def joint_iterate(bundle: ModelBundle, cfg: JointConfig, dataset,
                  rng: np.random.Generator,
                  oracle_bins: np.ndarray | None = None,
                  extractor=None, real_shapes: np.ndarray | None = None,
                  out_dir=None, metrics: train.MetricsWriter | None = None,
                  fid_samples: int = 300,
                  start_iteration: int = 1) -> tuple[ModelBundle, list[dict]]:
    """Run the alternating iterations; returns the bundle and one report per
    iteration.

    `oracle_bins`, `extractor` and `real_shapes` are evaluation-only inputs:
    when given, reports carry view accuracy against the withheld labels,
    the distribution-recovery error, and the Frechet score.
    `start_iteration` only shifts report numbering and checkpoint names for
    resumed runs.
    """
    cfg.validate()
    if bundle.discriminators.n_heads != cfg.clusters:
        raise ConfigError("bundle has the wrong number of discriminator heads; call expand_heads")
    mp_cfg = replace(cfg.train, n_heads=cfg.clusters, iterations=cfg.gan_steps)
    reports = []
    for iteration in range(start_iteration, start_iteration + cfg.joint_iterations):
        gan_sum_before = _param_checksum(bundle.generator) + _param_checksum(bundle.discriminators)
        sils, labels = views.synthesize_view_training_set(bundle.generator, cfg.view_shapes, rng)
        torch.manual_seed(int(rng.integers(2**31)))  # fresh classifier init
        clf, clf_acc = views.train_view_classifier(
            sils, labels, cfg.classifier_steps, rng,
            batch_size=cfg.train.batch_size,
            learning_rate=cfg.train.learning_rate,
            betas=(cfg.train.adam_beta1, cfg.train.adam_beta2),
            base_channels=cfg.classifier_channels,
        )
        assert _param_checksum(bundle.generator) + _param_checksum(bundle.discriminators) == gan_sum_before, \
            "classifier phase must not touch GAN parameters"
        bundle.view_classifier = clf

        probs = views.predict_probabilities(clf, dataset.images)
        try:
            assignment = views.cluster_views(probs, cfg.clusters, rng)
            slots = views.assign_slots(assignment, dataset.images)
        except (ConfigError, RuntimeError) as exc:
            raise RuntimeError(f"joint iteration {iteration}: view clustering failed: {exc}") from exc

        clf_sum = _param_checksum(clf)
        train.train_mp_gan(bundle, slots, mp_cfg, rng, metrics=metrics)
        assert _param_checksum(clf) == clf_sum, "GAN phase must not touch the classifier"

        report = {
            "iteration": iteration,
            "classifier_train_accuracy": clf_acc,
            "slot_sizes": [int(len(s.images)) for s in slots],
            "slot_histograms": [s.view_dist.histogram.tolist() for s in slots],
            "gan_step": bundle.step,
        }
        if oracle_bins is not None:
            report["view_accuracy"] = float((probs.argmax(1) == oracle_bins).mean())
            pooled = evaluate.pooled_slot_histogram(slots)
            oracle_hist = np.bincount(oracle_bins, minlength=views.BIN_COUNT) / len(oracle_bins)
            report["view_distribution_tv"] = evaluate.view_distribution_error(pooled, oracle_hist)
        if extractor is not None and real_shapes is not None:
            vols = nets.sample_volumes(bundle.generator, fid_samples,
                                       np.random.default_rng(int(rng.integers(2**31))))
            report["fid"] = evaluate.fid(real_shapes, vols, extractor).score
        reports.append(report)
        if out_dir is not None:
            train.save_bundle(os.path.join(out_dir, f"ckpt_joint{iteration}.mpg"),
                              bundle, mp_cfg)
    return bundle, reports


def run_vp_mp_gan(cfg: JointConfig, dataset, rng: np.random.Generator,
                  oracle_bins: np.ndarray | None = None,
                  extractor=None, real_shapes: np.ndarray | None = None,
                  out_dir=None, metrics: train.MetricsWriter | None = None):
    """Bootstrap, expand to K heads, then alternate; the full pipeline."""
    bundle = bootstrap(cfg, dataset, rng, metrics=metrics)
    bundle = expand_heads(bundle, cfg)
    return joint_iterate(bundle, cfg, dataset, rng, oracle_bins=oracle_bins,
                         extractor=extractor, real_shapes=real_shapes,
                         out_dir=out_dir, metrics=metrics)
