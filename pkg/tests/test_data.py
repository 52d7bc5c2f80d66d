import json

import numpy as np
import pytest

from branchconnect import data
from branchconnect.data import DataFormatError


def nearest_centroid_accuracy(train, test):
    cents = np.stack([train.images[train.labels == c].mean(axis=0) for c in range(train.C)])
    d = ((test.images[:, None] - cents[None]) ** 2).sum(axis=(2, 3, 4))
    return float(np.mean(d.argmin(axis=1) == test.labels))


def small_cifar(n=10, C=10, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, size=(n, 3, 32, 32)).astype(np.float64) / 255.0
    return data.Dataset(images, rng.integers(0, C, size=n), C, data.per_pixel_mean(images), "tiny")


# ---------------------------------------------------------------- CIFAR binary


def test_cifar10_record_count(tmp_path):
    p = data.write_cifar_binary(small_cifar(10), tmp_path / "b.bin")
    assert p.stat().st_size == 30730
    assert len(data.load_cifar_binary(p)) == 10


def test_cifar10_rejects_label_255(tmp_path):
    raw = bytearray(data.encode_cifar(small_cifar(3)))
    raw[3073] = 255
    (tmp_path / "bad.bin").write_bytes(bytes(raw))
    with pytest.raises(DataFormatError, match="record 1 has label 255"):
        data.load_cifar_binary(tmp_path / "bad.bin")


def test_cifar_length_must_be_whole_records(tmp_path):
    (tmp_path / "short.bin").write_bytes(b"\0" * 3072)
    with pytest.raises(DataFormatError, match="multiple"):
        data.load_cifar_binary(tmp_path / "short.bin")
    (tmp_path / "c100.bin").write_bytes(b"\0" * 3073)
    with pytest.raises(DataFormatError):
        data.load_cifar_binary(tmp_path / "c100.bin", "cifar100")


def test_cifar_round_trip_is_identical(tmp_path):
    ds = small_cifar(7)
    p = data.write_cifar_binary(ds, tmp_path / "a.bin")
    back = data.load_cifar_binary(p)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    data.write_cifar_binary(back, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_cifar_channel_major_layout(tmp_path):
    ds = small_cifar(1)
    raw = data.encode_cifar(ds)
    assert raw[0] == ds.labels[0]
    # red plane first, row-major
    assert raw[1 + 5] == round(ds.images[0, 0, 0, 5] * 255)
    assert raw[1 + 1024 + 32] == round(ds.images[0, 1, 1, 0] * 255)


def test_cifar100_uses_fine_label(tmp_path):
    ds = small_cifar(4, C=100, seed=3)
    raw = data.encode_cifar(ds, "cifar100", coarse_labels=np.array([7, 7, 7, 7]))
    (tmp_path / "t.bin").write_bytes(raw)
    back = data.load_cifar_binary(tmp_path / "t.bin", "cifar100")
    assert back.C == 100
    np.testing.assert_array_equal(back.labels, ds.labels)


def test_cifar_dir_layout(tmp_path):
    for i in (1, 2):
        data.write_cifar_binary(small_cifar(5, seed=i), tmp_path / f"data_batch_{i}.bin")
    data.write_cifar_binary(small_cifar(4, seed=9), tmp_path / "test_batch.bin")
    tr, te = data.load_cifar_dir(tmp_path)
    assert (len(tr), len(te)) == (10, 4)
    np.testing.assert_array_equal(te.mean_image, tr.mean_image)
    with pytest.raises(FileNotFoundError):
        data.load_cifar_dir(tmp_path / "nope")


def test_sidecar_metadata(tmp_path):
    ds = small_cifar(5)
    p = data.write_cifar_binary(ds, tmp_path / "a.bin")
    meta = json.loads((tmp_path / "a.bin.json").read_text())
    assert meta == {"name": "tiny", "C": 10, "N": 5, "mean_sha256": data.mean_checksum(ds.mean_image)}
    assert p.exists()


def test_unknown_variant():
    with pytest.raises(ValueError, match="variant"):
        data._decode(b"", "svhn", "x")


# ---------------------------------------------------------------- synthetic


def test_synthetic_seeded():
    a = data.generate_synthetic(4, 5, 8, seed=3)
    b = data.generate_synthetic(4, 5, 8, seed=3)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, data.generate_synthetic(4, 5, 8, seed=4).images)
    assert a.class_counts().tolist() == [5] * 4


def test_noiseless_templates_separable():
    ds = data.generate_synthetic(10, 20, 16, seed=0, noise=0.0)
    tr, te = data.split(ds, 100, 100, seed=1)
    assert nearest_centroid_accuracy(tr, te) == 1.0


def test_nearest_centroid_reference_accuracy():
    # reference accuracy for C=10, n=100, noise=0.3: the problem is easy but not trivial
    ds = data.generate_synthetic(10, 100, 32, seed=0, noise=0.3)
    tr, te = data.split(ds, 500, 500, seed=0)
    assert nearest_centroid_accuracy(tr, te) > 0.95


def test_synthetic_preconditions():
    with pytest.raises(ValueError, match="C >= 2"):
        data.generate_synthetic(1, 5, 8)
    with pytest.raises(ValueError, match="hw >= 8"):
        data.generate_synthetic(3, 5, 4)


def test_dataset_label_range():
    with pytest.raises(ValueError, match="labels"):
        data.Dataset(np.zeros((2, 3, 8, 8)), [0, 5], 3, np.zeros((3, 8, 8)))
    with pytest.raises(ValueError, match="labels"):
        data.Dataset(np.zeros((2, 3, 8, 8)), [0], 3, np.zeros((3, 8, 8)))


# ---------------------------------------------------------------- preprocessing


def test_self_mean_subtraction_is_zero():
    ds = data.generate_synthetic(3, 10, 8, seed=0)
    out = data.preprocess(ds.images, ds.mean_image)
    assert np.abs(out.mean(axis=0)).max() < 1e-6


def test_mirror_is_involution(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    np.testing.assert_array_equal(data.hflip(data.hflip(x)), x)


def test_eval_center_crop():
    assert data.center_offset(32, 28) == 2
    x = np.arange(2 * 3 * 32 * 32, dtype=float).reshape(2, 3, 32, 32)
    out = data.preprocess(x, 0.0, crop=28, mode="eval")
    np.testing.assert_array_equal(out, x[:, :, 2:30, 2:30])
    np.testing.assert_array_equal(out, data.preprocess(x, 0.0, crop=28, mode="eval"))


def test_crop_larger_than_image():
    with pytest.raises(ValueError, match="crop"):
        data.preprocess(np.zeros((1, 3, 8, 8)), 0.0, crop=9)


def test_train_mode_draw_order():
    x = np.arange(2 * 1 * 6 * 6, dtype=float).reshape(2, 1, 6, 6)
    out = data.preprocess(x, 0.0, crop=4, mirror=True, mode="train", rng=np.random.default_rng(5))
    r = np.random.default_rng(5)
    for i in range(2):
        ox, oy = r.integers(0, 3), r.integers(0, 3)
        ref = x[i, :, oy:oy + 4, ox:ox + 4]
        if r.random() < 0.5:
            ref = ref[:, :, ::-1]
        np.testing.assert_array_equal(out[i], ref)


def test_train_mode_without_augmentation_uses_no_rng():
    x = np.ones((1, 3, 8, 8))
    np.testing.assert_array_equal(data.preprocess(x, 0.5, mode="train"), x - 0.5)
    with pytest.raises(ValueError, match="rng"):
        data.preprocess(x, 0.5, mirror=True, mode="train")


def test_mirror_rate_about_half():
    x = np.arange(8, dtype=float).reshape(1, 1, 1, 8).repeat(2000, axis=0)
    out = data.preprocess(x, 0.0, mirror=True, mode="train", rng=np.random.default_rng(0))
    flipped = np.mean(out[:, 0, 0, 0] == 7)
    assert abs(flipped - 0.5) < 0.05


# ---------------------------------------------------------------- splitting


def test_split_partition():
    ds = data.generate_synthetic(4, 10, 8, seed=0)
    ds.images[:, 0, 0, 0] = np.arange(40)  # tag each record
    tr, te = data.split(ds, 25, 15, seed=2)
    tags = np.concatenate([tr.images[:, 0, 0, 0], te.images[:, 0, 0, 0]])
    assert sorted(tags.tolist()) == list(range(40))


def test_split_seeded_and_train_mean_only():
    ds = data.generate_synthetic(4, 10, 8, seed=0)
    a, b = data.split(ds, 20, 10, seed=1), data.split(ds, 20, 10, seed=1)
    np.testing.assert_array_equal(a[0].images, b[0].images)
    np.testing.assert_array_equal(a[1].mean_image, a[0].images.mean(axis=0))
    assert a[0].class_counts().sum() == 20


def test_split_empty_test_and_too_many():
    ds = data.generate_synthetic(4, 10, 8, seed=0)
    tr, te = data.split(ds, 40, 0)
    assert len(te) == 0 and len(tr) == 40
    with pytest.raises(ValueError, match="cannot take"):
        data.split(ds, 30, 11)


def test_batch_needs_records():
    with pytest.raises(ValueError, match="bad batch"):
        data.Batch(np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int))
