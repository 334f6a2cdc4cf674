"""Adversarial losses and the multi-discriminator training step.

Loss conventions. Discriminator scores are raw; the logistic transform
lives inside the losses, computed with the numerically stable log-sigmoid:

- discriminator objective (one head):
      mean(log sigma(D(real))) + mean(log(1 - sigma(D(fake))))
- generator objective (non-saturating, over all heads):
      sum_i mean(log sigma(D_i(P_i(G(z), phi))))

Both are reported in this ascent form; updates descend their negation. The
generator update uses the arithmetic mean of the per-head gradients, so the
descended quantity is -(generator objective) / K.

One step draws a single latent batch, renders it once per head with
viewpoints from that head's histogram, updates every discriminator on its
own independently drawn real batch (shared-stem gradients accumulate across
heads and are applied once), then updates the generator through the same
rendered silhouettes against the refreshed discriminators.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from . import nets
from .errors import ConfigError
from .nets import DiscriminatorSet, Generator, ViewClassifier
from .projection import silhouettes_from_volumes
from .views import ProjectionSlot, ViewDistribution


@dataclass
class TrainConfig:
    resolution: int = 32
    n_heads: int = 1
    iterations: int = 4000
    batch_size: int = 32
    learning_rate: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    g_steps: int = 1
    d_steps: int = 1
    latent_dim: int = 128
    generator_channels: int = 128
    discriminator_channels: int = 32
    shared_blocks: int = 1
    symmetric: bool = True
    seed: int = 0
    deterministic: bool = True

    def validate(self):
        positive = ("resolution", "n_heads", "iterations", "batch_size", "learning_rate",
                    "adam_beta1", "adam_beta2", "g_steps", "d_steps", "latent_dim",
                    "generator_channels", "discriminator_channels", "shared_blocks")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.symmetric and self.resolution % 2:
            raise ConfigError("symmetric generation requires an even resolution")
        return self


@dataclass
class ModelBundle:
    """All trainable state of one run."""

    generator: Generator
    discriminators: DiscriminatorSet
    gen_opt: torch.optim.Adam
    disc_opt: torch.optim.Adam
    view_classifier: ViewClassifier | None = None
    step: int = 0


def set_deterministic(enabled: bool = True):
    torch.use_deterministic_algorithms(enabled)


def build_models(cfg: TrainConfig) -> ModelBundle:
    """Construct generator/discriminators and their optimizers from a seeded
    torch RNG so identically configured runs start identically."""
    cfg.validate()
    if cfg.deterministic:
        set_deterministic(True)
    torch.manual_seed(cfg.seed)
    gen = Generator(cfg.resolution, latent_dim=cfg.latent_dim,
                    base_channels=cfg.generator_channels, symmetric=cfg.symmetric)
    disc = DiscriminatorSet(cfg.resolution, n_heads=cfg.n_heads,
                            base_channels=cfg.discriminator_channels,
                            shared_blocks=cfg.shared_blocks)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    return ModelBundle(
        generator=gen,
        discriminators=disc,
        gen_opt=torch.optim.Adam(gen.parameters(), lr=cfg.learning_rate, betas=betas),
        disc_opt=torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=betas),
    )


def discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Batch-mean ascent objective for one discriminator head."""
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ValueError("discriminator loss needs non-empty real and fake batches")
    return F.logsigmoid(real_scores).mean() + F.logsigmoid(-fake_scores).mean()


def generator_loss(fake_scores_per_head) -> torch.Tensor:
    """Non-saturating generator objective: per-head batch means, summed."""
    scores = list(fake_scores_per_head)
    if not scores:
        raise ValueError("generator loss needs at least one head's scores")
    return sum(F.logsigmoid(s).mean() for s in scores)


def _draw_azimuths(dist: ViewDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    hist = dist.histogram
    bins = rng.choice(len(hist), size=n, p=hist / hist.sum())
    return (bins + rng.random(n)) * (2.0 * np.pi / len(hist))


def mp_gan_update(bundle: ModelBundle, z: torch.Tensor,
                  azimuths_per_head: list[np.ndarray],
                  real_batches: list[np.ndarray],
                  update_discriminators: bool = True,
                  update_generator: bool = True) -> dict:
    """One training cycle on pre-drawn inputs; returns {'d_loss', 'g_loss'}.

    Separated from the sampling so tests can drive identical batches
    through alternative loss implementations. The generated batch is
    rendered once per head; those silhouettes feed the discriminator
    updates (detached) and then, against the refreshed discriminators, the
    generator update.
    """
    gen, disc = bundle.generator, bundle.discriminators
    k = disc.n_heads
    if len(azimuths_per_head) != k or len(real_batches) != k:
        raise ValueError(f"need one azimuth array and one real batch per head (K={k})")
    gen.train()
    disc.train()

    vols = gen(z)
    sils = [
        silhouettes_from_volumes(vols, torch.from_numpy(np.ascontiguousarray(az)))
        for az in azimuths_per_head
    ]
    record = {}

    if update_discriminators:
        bundle.disc_opt.zero_grad()
        d_losses = []
        d_total = None
        for i in range(k):
            real = torch.from_numpy(np.ascontiguousarray(real_batches[i], dtype=np.float32))
            loss_i = discriminator_loss(disc(real, i), disc(sils[i].detach(), i))
            d_losses.append(float(loss_i.detach()))
            d_total = -loss_i if d_total is None else d_total - loss_i
        d_total.backward()
        bundle.disc_opt.step()
        record["d_loss"] = d_losses

    if update_generator:
        bundle.gen_opt.zero_grad()
        g_loss = generator_loss(disc(sils[i], i) for i in range(k))
        (-(g_loss) / k).backward()
        bundle.gen_opt.step()
        record["g_loss"] = float(g_loss.detach())

    flat = record.get("d_loss", []) + [record.get("g_loss", 0.0)]
    if not all(np.isfinite(v) for v in flat):
        raise RuntimeError(f"non-finite loss at step {bundle.step}: {record}")
    return record


def _draw_step_inputs(slots, cfg, rng):
    z = nets.latent_batch(rng, cfg.batch_size, cfg.latent_dim)
    azimuths = [_draw_azimuths(s.view_dist, cfg.batch_size, rng) for s in slots]
    reals = [s.sample_batch(rng, cfg.batch_size) for s in slots]
    return z, azimuths, reals


def train_step(bundle: ModelBundle, slots: list[ProjectionSlot], cfg: TrainConfig,
               rng: np.random.Generator) -> dict:
    """One full training cycle: cfg.d_steps discriminator updates and
    cfg.g_steps generator updates (1:1 by default, sharing one rendered
    batch). Returns the cycle's metrics record."""
    if len(slots) != bundle.discriminators.n_heads:
        raise ConfigError(f"{bundle.discriminators.n_heads} heads but {len(slots)} slots")
    for _ in range(cfg.d_steps - 1):
        mp_gan_update(bundle, *_draw_step_inputs(slots, cfg, rng), update_generator=False)
    record = mp_gan_update(bundle, *_draw_step_inputs(slots, cfg, rng))
    for _ in range(cfg.g_steps - 1):
        mp_gan_update(bundle, *_draw_step_inputs(slots, cfg, rng), update_discriminators=False)
    record["step"] = bundle.step
    bundle.step += 1
    return record


class MetricsWriter:
    """Append-only JSON-lines metrics stream."""

    def __init__(self, path=None):
        self.path = path
        self._fh = open(path, "a") if path else None

    def write(self, record: dict):
        if self._fh:
            json.dump(record, self._fh)
            self._fh.write("\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def train_mp_gan(bundle: ModelBundle, slots: list[ProjectionSlot], cfg: TrainConfig,
                 rng: np.random.Generator, iterations: int | None = None,
                 metrics: MetricsWriter | None = None) -> list[dict]:
    """Run `iterations` training cycles (default cfg.iterations); returns the
    metric records, each extended with wall-clock milliseconds."""
    for slot in slots:
        if len(slot.images) == 0:
            raise ConfigError(f"slot {slot.index} has an empty dataset")
    records = []
    for _ in range(cfg.iterations if iterations is None else iterations):
        t0 = time.perf_counter()
        record = train_step(bundle, slots, cfg, rng)
        record["wall_ms"] = (time.perf_counter() - t0) * 1e3
        if metrics:
            metrics.write(record)
        records.append(record)
    return records


def config_manifest(cfg: TrainConfig, step: int, kind: str = "mp-gan") -> dict:
    manifest = asdict(cfg)
    manifest.update({"kind": kind, "step": step, "format": 1})
    return manifest


def save_bundle(path, bundle: ModelBundle, cfg: TrainConfig) -> None:
    tensors = {}
    tensors.update(nets.module_tensors(bundle.generator, "generator"))
    tensors.update(nets.module_tensors(bundle.discriminators, "discriminators"))
    tensors.update(nets.optimizer_tensors(bundle.gen_opt, "opt.gen"))
    tensors.update(nets.optimizer_tensors(bundle.disc_opt, "opt.disc"))
    if bundle.view_classifier is not None:
        tensors.update(nets.module_tensors(bundle.view_classifier, "view_classifier"))
    nets.save_checkpoint(path, config_manifest(cfg, bundle.step), tensors)


def load_bundle(path) -> tuple[ModelBundle, TrainConfig]:
    manifest, tensors = nets.load_checkpoint(path)
    known = {f.name for f in TrainConfig.__dataclass_fields__.values()}
    cfg = TrainConfig(**{k: v for k, v in manifest.items() if k in known})
    bundle = build_models(cfg)
    nets.load_module_tensors(bundle.generator, tensors, "generator")
    nets.load_module_tensors(bundle.discriminators, tensors, "discriminators")
    nets.load_optimizer_tensors(bundle.gen_opt, tensors, "opt.gen")
    nets.load_optimizer_tensors(bundle.disc_opt, tensors, "opt.disc")
    if any(k.startswith("view_classifier.") for k in tensors):
        clf = ViewClassifier(cfg.resolution, base_channels=cfg.discriminator_channels)
        nets.load_module_tensors(clf, tensors, "view_classifier")
        bundle.view_classifier = clf
    bundle.step = int(manifest["step"])
    return bundle, cfg
