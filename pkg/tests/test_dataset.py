import json

import numpy as np
import pytest

from se3nets.dataset import DatasetError, apply_noise, generate_dataset, read_dataset, write_dataset


@pytest.fixture(scope="module")
def small():
    return generate_dataset("push", frames=3, seed=11)


def assert_same(a, b):
    assert len(a) == len(b)
    for f, g in zip(a.frames, b.frames):
        for name in ("cloud", "action", "target", "labels", "valid", "transforms"):
            x, y = getattr(f, name), getattr(g, name)
            assert x.dtype == y.dtype and x.shape == y.shape
            assert x.tobytes() == y.tobytes(), name


def test_round_trip_bit_exact(small, tmp_path):
    write_dataset(small, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert_same(small, back)
    assert back.manifest["frame_count"] == 3
    for key in ("version", "family", "H", "W", "n", "k_true_max", "noise", "seed", "scale_divisor", "alpha", "beta"):
        assert back.manifest[key] == small.manifest[key]


def test_byte_layout(small, tmp_path):
    write_dataset(small, tmp_path / "d")
    raw = (tmp_path / "d" / "frames.bin").read_bytes()
    f = small[0]
    pix = 32 * 40
    off = 0
    for arr, size in ((f.cloud, pix * 3 * 8), (f.action, 10 * 8), (f.target, pix * 3 * 8)):
        np.testing.assert_array_equal(np.frombuffer(raw[off:off + size], "<f8"), arr.ravel())
        off += size
    assert raw[off:off + pix] == f.labels.tobytes()
    off += pix
    assert raw[off:off + pix] == f.valid.astype(np.uint8).tobytes()
    off += pix
    assert raw[off] == len(f.transforms) == 3
    np.testing.assert_array_equal(np.frombuffer(raw[off + 1:off + 1 + 3 * 48], "<f8"), f.transforms.ravel())


def test_same_seed_bit_identical_files(tmp_path):
    write_dataset(generate_dataset("push", frames=4, seed=2), tmp_path / "a")
    write_dataset(generate_dataset("push", frames=4, seed=2), tmp_path / "b")
    write_dataset(generate_dataset("push", frames=4, seed=3), tmp_path / "c")
    for name in ("frames.bin", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "frames.bin").read_bytes() != (tmp_path / "c" / "frames.bin").read_bytes()


def test_arm_dataset_round_trip(tmp_path):
    ds = generate_dataset("arm", frames=2, seed=1)
    assert ds.manifest["n"] == 3 and ds.manifest["k_true_max"] == 4
    write_dataset(ds, tmp_path / "arm")
    assert_same(ds, read_dataset(tmp_path / "arm"))


def test_truncated_file_raises(small, tmp_path):
    write_dataset(small, tmp_path / "d")
    path = tmp_path / "d" / "frames.bin"
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(DatasetError, match="truncated"):
        read_dataset(tmp_path / "d")


def test_frame_count_mismatch_raises(small, tmp_path):
    write_dataset(small, tmp_path / "d")
    mpath = tmp_path / "d" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["frame_count"] = 5
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="manifest lists"):
        read_dataset(tmp_path / "d")


def test_manifest_errors(small, tmp_path):
    write_dataset(small, tmp_path / "d")
    mpath = tmp_path / "d" / "manifest.json"
    good = mpath.read_text()
    mpath.write_text(good[:-10])
    with pytest.raises(DatasetError, match="malformed"):
        read_dataset(tmp_path / "d")
    manifest = json.loads(good)
    del manifest["alpha"]
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(DatasetError, match="missing keys"):
        read_dataset(tmp_path / "d")
    with pytest.raises(DatasetError):
        read_dataset(tmp_path / "nowhere")


def test_split_is_70_30_and_ordered():
    ds = generate_dataset("push", frames=10, seed=0)
    tr, te = ds.split()
    assert len(tr) == 7 and len(te) == 3
    assert tr[0] is ds[0] and te[0] is ds[7]


def test_apply_noise_leaves_source_untouched(small):
    before = [f.cloud.copy() for f in small.frames]
    noisy = apply_noise(small, depth_sd=0.0075, depth_scaled=True, assoc_window=9, assoc_thresh=0.1)
    for f, b in zip(small.frames, before):
        np.testing.assert_array_equal(f.cloud, b)
    assert noisy.manifest["noise"]["depth_sd"] == 0.0075
    assert noisy.manifest["noise"]["assoc_window"] == 9
    assert small.manifest["noise"]["depth_sd"] == 0.0
    again = apply_noise(small, depth_sd=0.0075, depth_scaled=True, assoc_window=9, assoc_thresh=0.1)
    assert_same(noisy, again)
