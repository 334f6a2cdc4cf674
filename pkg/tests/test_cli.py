import json
import os

import numpy as np
import pytest

from mpgan import cli, evaluate, nets, voxel
from mpgan.cli import main, write_obj_mesh

TINY_TRAIN = [
    "--set", "train.resolution=16", "--set", "train.batch_size=8",
    "--set", "train.latent_dim=16", "--set", "train.generator_channels=16",
    "--set", "train.discriminator_channels=8",
]


def make_dataset(tmp_path, n_shapes=30, views=2, seed=4):
    out = tmp_path / "ds"
    code = main([
        "dataset", "--out", str(out), "--seed", str(seed),
        "--set", "dataset.n_shapes=%d" % n_shapes,
        "--set", "dataset.views_per_shape=%d" % views,
        "--set", "dataset.resolution=16",
    ])
    assert code == 0
    return out


def test_dataset_command(tmp_path, capsys):
    out = make_dataset(tmp_path)
    printed = json.loads(capsys.readouterr().out)
    assert printed["count"] == 60
    assert (out / "manifest.json").exists()
    assert (out / "oracle.json").exists()
    assert (out / "img_000000.pgm").exists()

    # refuse to overwrite without --force
    assert main(["dataset", "--out", str(out), "--seed", "4"]) == 2


def test_dataset_determinism_byte_identical(tmp_path):
    a = make_dataset(tmp_path / "a", seed=11)
    b = make_dataset(tmp_path / "b", seed=11)
    for name in sorted(os.listdir(a)):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_train_single_and_resume(tmp_path, capsys):
    ds = make_dataset(tmp_path)
    out = tmp_path / "run"
    args = ["train", "--dataset", str(ds), "--out", str(out), "--mode", "single",
            "--seed", "3", *TINY_TRAIN, "--set", "train.iterations=8"]
    assert main(args) == 0
    capsys.readouterr()
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert len(metrics) == 8
    assert all(np.isfinite(m["g_loss"]) for m in metrics)
    assert all(len(m["d_loss"]) == 1 for m in metrics)
    assert (out / "ckpt_latest.mpg").exists()

    # resume continues the step counter to the new target
    args_more = [a if a != "train.iterations=8" else "train.iterations=12" for a in args]
    assert main(args_more) == 0
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert [m["step"] for m in metrics] == list(range(12))


def test_train_oracle_mode_emits_per_head_streams(tmp_path):
    ds = make_dataset(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--dataset", str(ds), "--out", str(out),
                 "--mode", "mp-gan-oracle", "--seed", "3", *TINY_TRAIN,
                 "--set", "train.iterations=6", "--set", "train.n_heads=4"]) == 0
    metrics = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
    assert all(len(m["d_loss"]) == 4 for m in metrics)


def test_train_vp_mode_writes_reports_and_checkpoints(tmp_path):
    ds = make_dataset(tmp_path)
    out = tmp_path / "run"
    args = ["train", "--dataset", str(ds), "--out", str(out), "--mode", "vp-mp-gan",
            "--seed", "3", *TINY_TRAIN,
            "--set", "joint.bootstrap_steps=5", "--set", "joint.gan_steps=5",
            "--set", "joint.classifier_steps=12", "--set", "joint.view_shapes=3",
            "--set", "joint.joint_iterations=2", "--set", "joint.clusters=2",
            "--set", "joint.classifier_channels=8"]
    assert main(args) == 0
    reports = [json.loads(l) for l in (out / "report.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in reports] == [1, 2]
    assert (out / "ckpt_joint1.mpg").exists()
    assert (out / "ckpt_joint2.mpg").exists()


def test_generate_formats_and_overwrite_protection(tmp_path, capsys):
    ds = make_dataset(tmp_path)
    run = tmp_path / "run"
    main(["train", "--dataset", str(ds), "--out", str(run), "--mode", "single",
          "--seed", "3", *TINY_TRAIN, "--set", "train.iterations=4"])
    ck = run / "ckpt_latest.mpg"

    vox_dir = tmp_path / "vox"
    assert main(["generate", "--checkpoint", str(ck), "--count", "5",
                 "--out", str(vox_dir), "--format", "voxel", "--seed", "7"]) == 0
    files = sorted(os.listdir(vox_dir))
    assert len(files) == 5
    for name in files:
        grid = voxel.load_grid(vox_dir / name)
        assert grid.shape == (16, 16, 16)

    # determinism: the same seed produces identical bytes
    vox2 = tmp_path / "vox2"
    main(["generate", "--checkpoint", str(ck), "--count", "5",
          "--out", str(vox2), "--format", "voxel", "--seed", "7"])
    for name in files:
        assert (vox_dir / name).read_bytes() == (vox2 / name).read_bytes()

    # no silent overwrite
    assert main(["generate", "--checkpoint", str(ck), "--count", "5",
                 "--out", str(vox_dir), "--format", "voxel", "--seed", "7"]) == 2

    sil_dir = tmp_path / "sil"
    assert main(["generate", "--checkpoint", str(ck), "--count", "2",
                 "--out", str(sil_dir), "--format", "silhouette",
                 "--azimuths", "0,1.5707963", "--seed", "7"]) == 0
    assert len(os.listdir(sil_dir)) == 4


def test_mesh_export_single_voxel(tmp_path):
    grid = np.zeros((4, 4, 4), np.float32)
    grid[1, 2, 3] = 1.0
    path = tmp_path / "one.obj"
    write_obj_mesh(grid, path)
    lines = path.read_text().splitlines()
    vertices = [l for l in lines if l.startswith("v ")]
    faces = [l for l in lines if l.startswith("f ")]
    assert len(vertices) == 8
    assert len(faces) == 12


def test_eval_fid_reports_baseline_floor(tmp_path, capsys, extractor16):
    ds = make_dataset(tmp_path, n_shapes=80, views=1)
    run = tmp_path / "run"
    main(["train", "--dataset", str(ds), "--out", str(run), "--mode", "single",
          "--seed", "3", *TINY_TRAIN, "--set", "train.iterations=4"])
    capsys.readouterr()
    ext_path = tmp_path / "extractor.mpg"
    evaluate.save_extractor(ext_path, extractor16)

    report_path = tmp_path / "fid.json"
    assert main(["eval", "--checkpoint", str(run / "ckpt_latest.mpg"),
                 "--dataset", str(ds), "--metric", "fid",
                 "--extractor", str(ext_path), "--samples", "80",
                 "--out", str(report_path)]) == 0
    report = json.loads(report_path.read_text())
    assert report["score"] >= 0.0
    assert report["baseline_floor"] >= 0.0
    assert report["score"] > report["baseline_floor"]


def test_eval_view_metrics_and_plots(tmp_path, capsys):
    ds = make_dataset(tmp_path)
    out = tmp_path / "run"
    main(["train", "--dataset", str(ds), "--out", str(out), "--mode", "vp-mp-gan",
          "--seed", "3", *TINY_TRAIN,
          "--set", "joint.bootstrap_steps=4", "--set", "joint.gan_steps=4",
          "--set", "joint.classifier_steps=10", "--set", "joint.view_shapes=3",
          "--set", "joint.joint_iterations=1", "--set", "joint.clusters=2",
          "--set", "joint.classifier_channels=8"])
    capsys.readouterr()
    ck = out / "ckpt_joint1.mpg"

    acc_path = tmp_path / "acc.json"
    assert main(["eval", "--checkpoint", str(ck), "--dataset", str(ds),
                 "--metric", "view-acc", "--out", str(acc_path)]) == 0
    acc = json.loads(acc_path.read_text())
    assert 0.0 <= acc["accuracy"] <= 1.0
    assert acc["chance"] == pytest.approx(1 / 16)

    dist_path = tmp_path / "dist.json"
    assert main(["eval", "--checkpoint", str(ck), "--dataset", str(ds),
                 "--metric", "view-dist", "--set", "joint.clusters=2",
                 "--out", str(dist_path), "--plots"]) == 0
    report = json.loads(dist_path.read_text())
    assert 0.0 <= report["total_variation"] <= 1.0
    assert (tmp_path / "dist_histogram.svg").exists()


def test_eval_errors(tmp_path, capsys):
    ds = make_dataset(tmp_path)
    run = tmp_path / "run"
    main(["train", "--dataset", str(ds), "--out", str(run), "--mode", "single",
          "--seed", "3", *TINY_TRAIN, "--set", "train.iterations=4"])
    ck = str(run / "ckpt_latest.mpg")
    # fid without extractor -> config error
    assert main(["eval", "--checkpoint", ck, "--dataset", str(ds), "--metric", "fid"]) == 2
    # view metrics need a checkpoint holding a classifier
    assert main(["eval", "--checkpoint", ck, "--dataset", str(ds), "--metric", "view-acc"]) == 2
    # unknown metric is a usage error from argparse (exit code 2)
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--checkpoint", ck, "--dataset", str(ds), "--metric", "bogus"])
    assert exc.value.code == 2


def test_extractor_train_command(tmp_path, capsys):
    out = tmp_path / "extractor.mpg"
    assert main(["extractor-train", "--out", str(out), "--resolution", "16",
                 "--shapes-per-family", "12", "--steps", "30", "--seed", "5"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert "held_out_accuracy" in printed
    model = evaluate.load_extractor(out)
    assert model.resolution == 16
    # refuses silent overwrite
    assert main(["extractor-train", "--out", str(out), "--resolution", "16",
                 "--shapes-per-family", "12", "--steps", "30", "--seed", "5"]) == 2


def test_import_command(tmp_path, capsys):
    from mpgan import projection

    src = tmp_path / "masks"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        projection.save_pgm((rng.random((16, 16)) < 0.5).astype(np.float32),
                            src / f"m{i}.pgm")
    out = tmp_path / "imported"
    assert main(["import", "--src", str(src), "--out", str(out),
                 "--resolution", "16"]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["count"] == 3


def test_threads_env_fallback(tmp_path, monkeypatch):
    import torch

    before = torch.get_num_threads()
    monkeypatch.setenv("MPGAN_THREADS", "1")
    make_dataset(tmp_path, n_shapes=2, views=1)
    assert torch.get_num_threads() == 1
    torch.set_num_threads(before)
