import gzip

import numpy as np
import pytest

from icon_peft.data import (
    DatasetSource,
    ImageSet,
    load_dataset,
    read_cifar_binary,
    read_idx,
    source_split,
    synth_dataset,
    synth_factors,
    write_idx,
)
from icon_peft.errors import ConfigError, DataError


def test_synth_same_seed_identical():
    a, b = synth_dataset(7, 64, 8), synth_dataset(7, 64, 8)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synth_dataset(8, 64, 8).images)


@pytest.mark.parametrize("classes", [2, 4, 6, 8, 12])
def test_synth_labels_balanced(classes):
    data = synth_dataset(0, classes * 9, classes)
    assert data.images.shape == (classes * 9, 3, 32, 32)
    assert np.bincount(data.labels, minlength=classes).tolist() == [9] * classes


def test_synth_factorisation():
    assert synth_factors(8) == (2, 4)
    assert synth_factors(6) == (3, 2)
    assert synth_factors(5) == (5, 1)


def test_synth_band_sets_mean_intensity():
    data = synth_dataset(0, 400, 8, noise=0.05, motifs_per_image=0)
    band = data.labels // 4
    assert data.images[band == 0].mean() < data.images[band == 1].mean() - 0.5


def test_synth_coarse_task_merges_mirror_orientations():
    joint = synth_dataset(3, 64, 8)
    coarse = synth_dataset(3, 64, 8, task="coarse")
    assert np.array_equal(joint.images, coarse.images)
    assert coarse.num_classes == 4
    assert np.array_equal(coarse.labels, (joint.labels // 4) * 2 + (joint.labels % 4) // 2)


def test_synth_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        synth_dataset(0, 4, 1)
    with pytest.raises(ConfigError):
        synth_dataset(0, 4, 4, task="nope")


def test_source_split_is_disjoint_from_training_split():
    src = DatasetSource(n_train=32, n_test=16)
    data = load_dataset(src)
    pre = source_split(src, 32)
    assert not np.array_equal(pre.images, data.train.images)
    assert not np.array_equal(data.test.images, data.train.images)


def test_image_set_rejects_out_of_range_label():
    with pytest.raises(DataError, match="label 5 at index 2"):
        ImageSet(np.zeros((3, 1, 2, 2)), np.array([0, 1, 5]), 5)


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64])
def test_idx_round_trip(tmp_path, dtype):
    arr = (np.arange(24).reshape(2, 3, 4) * 3).astype(dtype)
    write_idx(tmp_path / "a.idx", arr)
    out = read_idx(tmp_path / "a.idx")
    assert out.dtype == np.dtype(dtype) and np.array_equal(out, arr)


def test_idx_header_layout(tmp_path):
    write_idx(tmp_path / "l.idx", np.array([3, 1, 4], dtype=np.uint8))
    raw = (tmp_path / "l.idx").read_bytes()
    assert raw == bytes([0, 0, 8, 1, 0, 0, 0, 3, 3, 1, 4])


def test_idx_gzip_and_errors(tmp_path):
    arr = np.arange(6, dtype=np.uint8).reshape(2, 3)
    write_idx(tmp_path / "x.idx", arr)
    with gzip.open(tmp_path / "x.idx.gz", "wb") as fh:
        fh.write((tmp_path / "x.idx").read_bytes())
    assert np.array_equal(read_idx(tmp_path / "x.idx.gz"), arr)
    (tmp_path / "bad.idx").write_bytes(b"\x01\x00\x08\x01")
    with pytest.raises(DataError, match="magic"):
        read_idx(tmp_path / "bad.idx")
    (tmp_path / "short.idx").write_bytes((tmp_path / "x.idx").read_bytes()[:-1])
    with pytest.raises(DataError, match="expected 6"):
        read_idx(tmp_path / "short.idx")


def test_idx_source_loads_grayscale(tmp_path):
    rng = np.random.default_rng(0)
    write_idx(tmp_path / "img.idx", rng.integers(0, 256, (5, 8, 8)).astype(np.uint8))
    write_idx(tmp_path / "lab.idx", np.array([0, 1, 2, 1, 0], dtype=np.uint8))
    src = DatasetSource(kind="idx_files", num_classes=3,
                        train=[str(tmp_path / "img.idx"), str(tmp_path / "lab.idx")])
    data = load_dataset(src)
    assert data.train.images.shape == (5, 1, 8, 8)
    assert data.train.images.max() <= 1.0 and data.test is None


def _cifar_records(labels, pixels, label_bytes):
    rows = []
    for lab, px in zip(labels, pixels):
        head = bytes([0, lab]) if label_bytes == 2 else bytes([lab])
        rows.append(head + px.tobytes())
    return b"".join(rows)


@pytest.mark.parametrize("label_bytes", [1, 2])
def test_cifar_binary_round_trip(tmp_path, label_bytes):
    rng = np.random.default_rng(label_bytes)
    pixels = rng.integers(0, 256, (3, 3, 32, 32)).astype(np.uint8)
    (tmp_path / "b.bin").write_bytes(_cifar_records([7, 0, 3], pixels, label_bytes))
    images, labels = read_cifar_binary(tmp_path / "b.bin", label_bytes)
    assert labels.tolist() == [7, 0, 3]
    assert np.array_equal(images, pixels)


def test_cifar_bad_size(tmp_path):
    (tmp_path / "b.bin").write_bytes(b"\x00" * 100)
    with pytest.raises(DataError, match="3073"):
        read_cifar_binary(tmp_path / "b.bin")


def test_cifar_source_normalises(tmp_path):
    pixels = np.full((2, 3, 32, 32), 255, dtype=np.uint8)
    (tmp_path / "b.bin").write_bytes(_cifar_records([1, 2], pixels, 1))
    src = DatasetSource(kind="cifar_binary", num_classes=10, train=[str(tmp_path / "b.bin")],
                        mean=[0.5, 0.5, 0.5], std=[0.25, 0.25, 0.25])
    data = load_dataset(src)
    np.testing.assert_allclose(data.train.images, 2.0)


def test_cifar_labels_validated_against_class_count(tmp_path):
    (tmp_path / "b.bin").write_bytes(_cifar_records([9], np.zeros((1, 3, 32, 32), np.uint8), 1))
    with pytest.raises(DataError):
        load_dataset(DatasetSource(kind="cifar_binary", num_classes=5, train=[str(tmp_path / "b.bin")]))
