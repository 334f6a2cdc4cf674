import numpy as np
import pytest

from mpgan import voxel
from mpgan.errors import MalformedFileError


def test_mirror_all_zero():
    half = np.zeros((2, 4, 4), np.float32)
    full = voxel.mirror_symmetric(half)
    assert full.shape == (4, 4, 4)
    assert not full.any()


def test_mirror_single_voxel():
    half = np.zeros((2, 4, 4), np.float32)
    half[0, 0, 0] = 1.0
    full = voxel.mirror_symmetric(half)
    expected = np.zeros((4, 4, 4), np.float32)
    expected[0, 0, 0] = 1.0
    expected[3, 0, 0] = 1.0
    assert np.array_equal(full, expected)


def test_mirror_constant_half():
    half = np.full((8, 16, 16), 0.5, np.float32)
    full = voxel.mirror_symmetric(half)
    assert np.array_equal(full, np.full((16, 16, 16), 0.5, np.float32))


def test_mirror_reflection_invariant_and_low_half_preserved():
    rng = np.random.default_rng(0)
    for _ in range(10):
        half = rng.random((8, 16, 16)).astype(np.float32)
        full = voxel.mirror_symmetric(half)
        assert np.array_equal(full[:8], half)
        assert np.array_equal(full, full[::-1])


def test_mirror_rejects_bad_shape():
    with pytest.raises(ValueError):
        voxel.mirror_symmetric(np.zeros((3, 4, 4), np.float32))


def test_binarize_constant_grids():
    low = np.full((4, 4, 4), 0.4, np.float32)
    high = np.full((4, 4, 4), 0.6, np.float32)
    assert not voxel.binarize(low, 0.5).any()
    assert voxel.binarize(high, 0.5).all()


def test_binarize_threshold_inclusive():
    grid = np.zeros((3, 3, 3), np.float32)
    grid[0, 0, 0], grid[1, 0, 0], grid[2, 0, 0] = 0.1, 0.5, 0.9
    out = voxel.binarize(grid, 0.5)
    assert (out[0, 0, 0], out[1, 0, 0], out[2, 0, 0]) == (0.0, 1.0, 1.0)
    assert set(np.unique(out)) <= {0.0, 1.0}


def test_binarize_idempotent():
    rng = np.random.default_rng(1)
    grid = rng.random((8, 8, 8)).astype(np.float32)
    once = voxel.binarize(grid, 0.3)
    assert np.array_equal(voxel.binarize(once, 0.3), once)


@pytest.mark.parametrize("threshold", [0.0, 1.0, -0.1, 1.5])
def test_binarize_rejects_bad_threshold(threshold):
    with pytest.raises(ValueError):
        voxel.binarize(np.zeros((2, 2, 2), np.float32), threshold)


def test_grid_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    grid = rng.random((16, 16, 16)).astype(np.float32)
    path = tmp_path / "g.vox"
    voxel.save_grid(grid, path)
    loaded = voxel.load_grid(path)
    assert loaded.dtype == np.float32
    assert np.array_equal(loaded, grid)


def test_load_truncated_payload(tmp_path):
    grid = np.zeros((4, 4, 4), np.float32)
    path = tmp_path / "g.vox"
    voxel.save_grid(grid, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(MalformedFileError):
        voxel.load_grid(path)


def test_load_resolution_mismatch(tmp_path):
    # header declares N=16 but payload holds 16^3 - 1 floats
    path = tmp_path / "g.vox"
    payload = np.zeros(16**3 - 1, "<f4").tobytes()
    path.write_bytes(voxel.VOXEL_MAGIC + (16).to_bytes(4, "little") + b"\x00" * 4 + payload)
    with pytest.raises(MalformedFileError):
        voxel.load_grid(path)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "g.vox"
    path.write_bytes(b"NOTVOXEL" + (2).to_bytes(4, "little") + b"\x00" * 4 + b"\x00" * 32)
    with pytest.raises(MalformedFileError):
        voxel.load_grid(path)


def test_file_layout_is_x_major(tmp_path):
    # index (x, y, z) maps to payload offset (x*N + y)*N + z
    import struct

    grid = np.zeros((2, 2, 2), np.float32)
    grid[1, 0, 1] = 1.0
    path = tmp_path / "g.vox"
    voxel.save_grid(grid, path)
    blob = path.read_bytes()
    assert blob[:8] == voxel.VOXEL_MAGIC
    floats = struct.unpack("<8f", blob[16:])
    assert floats[(1 * 2 + 0) * 2 + 1] == 1.0
    assert sum(floats) == 1.0
