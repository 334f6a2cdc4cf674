"""Command-line entry points.

Subcommands: ``dataset`` (synthesize a silhouette dataset), ``train``
(single / mp-gan-oracle / vp-mp-gan), ``generate`` (sample voxel grids,
meshes or silhouettes from a checkpoint), ``eval`` (fid / view-acc /
view-dist with optional SVG figures), ``extractor-train`` (train and
freeze the FID feature extractor) and ``import`` (wrap a folder of mask
images as a dataset).

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command is deterministic under a fixed ``--seed``. Worker threads
come from ``--threads`` or the ``MPGAN_THREADS`` environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import re
import sys

import numpy as np
import torch

from . import datagen, evaluate, joint, nets, train, views, voxel
from .config import load_config
from .errors import ConfigError, MalformedFileError
from .projection import Viewpoint, save_pgm, silhouette_from_grid

LATEST_CHECKPOINT = "ckpt_latest.mpg"


def _apply_threads(args):
    threads = getattr(args, "threads", None)
    if threads is None:
        env = os.environ.get("MPGAN_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        if threads <= 0:
            raise ConfigError("--threads must be positive")
        torch.set_num_threads(threads)


def _load_run_config(args):
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.train.seed = seed
        cfg.dataset.seed = seed
    cfg.joint.train = cfg.train
    return cfg


def _fresh_output_file(path, force: bool):
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} already exists (use --force to overwrite)")


# --- dataset ------------------------------------------------------------------

def cmd_dataset(args) -> int:
    cfg = _load_run_config(args)
    dataset, oracle = datagen.build_dataset(cfg.dataset)
    datagen.save_dataset(args.out, dataset, oracle, force=args.force)
    summary = {
        "out": os.path.abspath(args.out),
        "count": len(dataset),
        "resolution": dataset.resolution,
        "family": cfg.dataset.family,
        "azimuth": cfg.dataset.azimuth,
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_import(args) -> int:
    dataset = datagen.import_silhouettes(args.src, args.out, args.resolution, force=args.force)
    print(json.dumps({"out": os.path.abspath(args.out), "count": len(dataset),
                      "resolution": args.resolution}, indent=2, sort_keys=True))
    return 0


# --- training -----------------------------------------------------------------

def _resume_or_build(out_dir, cfg):
    latest = os.path.join(out_dir, LATEST_CHECKPOINT)
    if os.path.exists(latest):
        bundle, saved_cfg = train.load_bundle(latest)
        saved = dataclasses.asdict(saved_cfg)
        current = dataclasses.asdict(cfg.train)
        saved.pop("iterations"), current.pop("iterations")  # extending a run is fine
        if saved != current:
            raise ConfigError(f"{latest} was trained with a different configuration")
        print(f"resuming from {latest} at step {bundle.step}")
        return bundle
    return train.build_models(cfg.train)


def _train_flat(args, cfg, slots) -> int:
    """Shared driver for the single and oracle-slot modes."""
    bundle = _resume_or_build(args.out, cfg)
    remaining = cfg.train.iterations - bundle.step
    if remaining <= 0:
        print(f"checkpoint already at step {bundle.step}; nothing to train")
        return 0
    rng = np.random.default_rng([cfg.train.seed, bundle.step])
    metrics = train.MetricsWriter(os.path.join(args.out, "metrics.jsonl"))
    try:
        train.train_mp_gan(bundle, slots, cfg.train, rng, iterations=remaining,
                           metrics=metrics)
    finally:
        metrics.close()
        train.save_bundle(os.path.join(args.out, LATEST_CHECKPOINT), bundle, cfg.train)
    print(json.dumps({"steps": bundle.step, "heads": len(slots),
                      "checkpoint": os.path.join(args.out, LATEST_CHECKPOINT)}))
    return 0


def _joint_resume(out_dir):
    done = []
    for name in os.listdir(out_dir):
        m = re.fullmatch(r"ckpt_joint(\d+)\.mpg", name)
        if m:
            done.append(int(m.group(1)))
    return max(done) if done else 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    dataset = datagen.load_dataset(args.dataset)
    if dataset.resolution != cfg.train.resolution:
        raise ConfigError(f"dataset resolution {dataset.resolution} does not match "
                          f"train.resolution {cfg.train.resolution}")
    os.makedirs(args.out, exist_ok=True)

    if args.mode == "single":
        cfg.train.n_heads = 1
        cfg.validate()
        slots = [views.ProjectionSlot(0, views.ViewDistribution.uniform(), dataset.images)]
        return _train_flat(args, cfg, slots)

    if args.mode == "mp-gan-oracle":
        cfg.validate()
        oracle = datagen.load_oracle(args.dataset)
        slots = views.slots_from_bins(oracle.bins, dataset.images, cfg.train.n_heads)
        return _train_flat(args, cfg, slots)

    # vp-mp-gan
    cfg.train.n_heads = cfg.joint.clusters
    cfg.validate()
    rng = np.random.default_rng(cfg.train.seed)
    metrics = train.MetricsWriter(os.path.join(args.out, "metrics.jsonl"))
    completed = _joint_resume(args.out)
    reports = []
    try:
        if completed == 0:
            bundle = joint.bootstrap(cfg.joint, dataset, rng, metrics=metrics)
            bundle = joint.expand_heads(bundle, cfg.joint)
        else:
            print(f"resuming after joint iteration {completed}")
            bundle, _ = train.load_bundle(os.path.join(args.out, f"ckpt_joint{completed}.mpg"))
            rng = np.random.default_rng([cfg.train.seed, completed])
        remaining = cfg.joint.joint_iterations - completed
        if remaining > 0:
            run_cfg = dataclasses.replace(cfg.joint, joint_iterations=remaining)
            run_cfg.train = cfg.train
            bundle, reports = joint.joint_iterate(bundle, run_cfg, dataset, rng,
                                                  out_dir=args.out, metrics=metrics,
                                                  start_iteration=completed + 1)
        with open(os.path.join(args.out, "report.jsonl"), "a") as f:
            for rep in reports:
                json.dump(rep, f)
                f.write("\n")
    finally:
        metrics.close()
    print(json.dumps({"joint_iterations": completed + len(reports),
                      "gan_steps": bundle.step, "out": os.path.abspath(args.out)}))
    return 0


def cmd_extractor_train(args) -> int:
    torch.manual_seed(args.seed)
    model, accuracy = evaluate.train_feature_extractor(
        args.resolution, np.random.default_rng(args.seed),
        n_per_family=args.shapes_per_family, steps=args.steps)
    _fresh_output_file(args.out, args.force)
    evaluate.save_extractor(args.out, model)
    print(json.dumps({"out": os.path.abspath(args.out), "held_out_accuracy": accuracy}))
    return 0


# --- generation ----------------------------------------------------------------

def write_obj_mesh(grid: np.ndarray, path) -> None:
    """Naive cube-per-voxel OBJ export of a binary grid (12 triangles per
    occupied voxel, y up)."""
    faces = ((0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6),
             (0, 2, 6, 4), (1, 5, 7, 3))
    with open(path, "w") as f:
        f.write("# cube-per-voxel mesh\n")
        count = 0
        for x, y, z in np.argwhere(grid >= 0.5):
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        f.write(f"v {x + dx} {y + dy} {z + dz}\n")
            base = count * 8 + 1
            for quad in faces:
                a, b, c, d = (base + i for i in quad)
                f.write(f"f {a} {b} {c}\nf {a} {c} {d}\n")
            count += 1


def cmd_generate(args) -> int:
    bundle, cfg = train.load_bundle(args.checkpoint)
    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    vols = nets.sample_volumes(bundle.generator, args.count, rng)
    azimuths = [float(a) for a in args.azimuths.split(",")] if args.azimuths else [0.0]
    written = []
    for i, vol in enumerate(vols):
        if args.format == "voxel":
            path = os.path.join(args.out, f"gen_{i:04d}.vox")
            _fresh_output_file(path, args.force)
            voxel.save_grid(vol, path)
            written.append(path)
        elif args.format == "mesh":
            path = os.path.join(args.out, f"gen_{i:04d}.obj")
            _fresh_output_file(path, args.force)
            write_obj_mesh(voxel.binarize(vol, args.threshold), path)
            written.append(path)
        else:  # silhouette
            for j, az in enumerate(azimuths):
                path = os.path.join(args.out, f"gen_{i:04d}_view{j}.pgm")
                _fresh_output_file(path, args.force)
                save_pgm(silhouette_from_grid(vol, Viewpoint(az)), path)
                written.append(path)
    print(json.dumps({"count": args.count, "format": args.format, "files": len(written)}))
    return 0


# --- evaluation -----------------------------------------------------------------

def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    bundle, _ = train.load_bundle(args.checkpoint)
    dataset = datagen.load_dataset(args.dataset)
    rng = np.random.default_rng(args.seed)
    report = {"metric": args.metric, "checkpoint": os.path.abspath(args.checkpoint),
              "dataset": os.path.abspath(args.dataset)}

    if args.metric == "fid":
        if not args.extractor:
            raise ConfigError("fid needs --extractor pointing at a frozen feature extractor")
        extractor = evaluate.load_extractor(args.extractor)
        spec = datagen.dataset_spec(dataset.manifest)
        real = datagen.reference_shapes(spec)
        vols = nets.sample_volumes(bundle.generator, args.samples, rng)
        report["score"] = evaluate.fid(real, vols, extractor).score
        half = len(real) // 2
        report["baseline_floor"] = evaluate.fid(real[:half], real[half:], extractor).score
        report["n_real"] = len(real)
        report["n_generated"] = args.samples
    elif args.metric == "view-acc":
        oracle = datagen.load_oracle(args.dataset)
        if bundle.view_classifier is None:
            raise ConfigError("checkpoint holds no view classifier; run vp-mp-gan training")
        report["accuracy"] = evaluate.view_accuracy(bundle.view_classifier,
                                                    dataset.images, oracle.bins)
        report["chance"] = 1.0 / views.BIN_COUNT
    elif args.metric == "view-dist":
        oracle = datagen.load_oracle(args.dataset)
        if bundle.view_classifier is None:
            raise ConfigError("checkpoint holds no view classifier; run vp-mp-gan training")
        probs = views.predict_probabilities(bundle.view_classifier, dataset.images)
        assignment = views.cluster_views(probs, cfg.joint.clusters, rng)
        slots = views.assign_slots(assignment, dataset.images)
        recovered = evaluate.pooled_slot_histogram(slots)
        reference = oracle.histogram()
        report["total_variation"] = evaluate.view_distribution_error(recovered, reference)
        report["recovered"] = recovered.tolist()
        report["reference"] = reference.tolist()
    else:
        raise ConfigError(f"unknown metric {args.metric!r}")

    out_path = args.out or "-"
    payload = json.dumps(report, indent=2, sort_keys=True)
    if out_path == "-":
        print(payload)
    else:
        _fresh_output_file(out_path, args.force)
        with open(out_path, "w") as f:
            f.write(payload + "\n")
        print(f"wrote {out_path}")

    if args.plots:
        from . import figures

        base = os.path.splitext(out_path)[0] if out_path != "-" else args.metric
        if args.metric == "view-dist":
            figures.view_histogram_figure(report["recovered"], report["reference"],
                                          base + "_histogram.svg")
            print(f"wrote {base}_histogram.svg")
        metrics_path = os.path.join(os.path.dirname(args.checkpoint), "metrics.jsonl")
        if os.path.exists(metrics_path):
            from .figures import loss_curves_figure

            loss_curves_figure(metrics_path, base + "_losses.svg")
            print(f"wrote {base}_losses.svg")
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpgan",
                                     description="silhouette-supervised 3D shape GAN")
    parser.add_argument("--threads", type=int, default=None,
                        help="torch worker threads (default: MPGAN_THREADS or torch default)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="synthesize a procedural silhouette dataset")
    p.add_argument("--config", help="INI config file with a [dataset] section")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("import", help="wrap a folder of PGM/PNG masks as a dataset")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("train", help="train a generator from a silhouette dataset")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("single", "mp-gan-oracle", "vp-mp-gan"),
                   default="vp-mp-gan")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extractor-train", help="train the frozen FID feature extractor")
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=16)
    p.add_argument("--shapes-per-family", type=int, default=150)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_extractor_train)

    p = sub.add_parser("generate", help="sample shapes from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("voxel", "mesh", "silhouette"), default="voxel")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--azimuths", help="comma-separated azimuths for silhouette export")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metric", choices=("fid", "view-acc", "view-dist"), required=True)
    p.add_argument("--extractor", help="feature-extractor checkpoint (fid)")
    p.add_argument("--samples", type=int, default=1000, help="generated sample count (fid)")
    p.add_argument("--out", help="report JSON path (default: stdout)")
    p.add_argument("--plots", action="store_true", help="emit SVG figures next to the report")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_threads(args)
        return args.func(args)
    except (ConfigError, MalformedFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
