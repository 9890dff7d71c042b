import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from overfitmeter.data import (
    AugmentParams,
    BadMagicError,
    CountMismatchError,
    DataError,
    Dataset,
    TruncatedFileError,
    augment,
    flip_count,
    flip_images,
    inject_label_noise,
    load_cifar_binary,
    load_idx,
    rotate_images,
    shift_images,
    split,
    subsample,
    synth_blobs,
    write_cifar_binary,
    write_idx,
)


def tiny(m=10, k=2, side=4):
    rng = np.random.default_rng(0)
    return Dataset(rng.uniform(size=(m, side, side, 1)), np.arange(m) % k, k)


# ----------------------------------------------------------------- readers

def test_idx_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, size=(7, 5, 6), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7)
    write_idx(images, labels, tmp_path / "img", tmp_path / "lbl")
    ds = load_idx(tmp_path / "img", tmp_path / "lbl")
    assert ds.images.shape == (7, 5, 6, 1) and ds.value_range == "byte"
    np.testing.assert_array_equal(ds.images[..., 0], images)
    np.testing.assert_array_equal(ds.labels, labels)


def test_idx_bad_magic(tmp_path):
    (tmp_path / "img").write_bytes(struct.pack(">IIII", 0x00000000, 1, 2, 2) + bytes(4))
    (tmp_path / "lbl").write_bytes(struct.pack(">II", 0x801, 1) + bytes(1))
    with pytest.raises(BadMagicError):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def test_idx_truncated(tmp_path):
    write_idx(np.zeros((3, 4, 4), np.uint8), np.zeros(3), tmp_path / "img", tmp_path / "lbl")
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "img").write_bytes(raw[:-1])
    with pytest.raises(TruncatedFileError):
        load_idx(tmp_path / "img", tmp_path / "lbl")


def test_idx_count_mismatch(tmp_path):
    write_idx(np.zeros((3, 4, 4), np.uint8), np.zeros(3), tmp_path / "img", tmp_path / "lbl")
    write_idx(np.zeros((2, 4, 4), np.uint8), np.zeros(2), tmp_path / "img2", tmp_path / "lbl2")
    with pytest.raises(CountMismatchError):
        load_idx(tmp_path / "img", tmp_path / "lbl2")


def test_cifar_round_trip_and_layout(tmp_path):
    rng = np.random.default_rng(2)
    images = rng.integers(0, 256, size=(3, 32, 32, 3), dtype=np.uint8)
    labels = np.array([4, 0, 9])
    write_cifar_binary(images, labels, tmp_path / "b1.bin")
    raw = (tmp_path / "b1.bin").read_bytes()
    # planar record: label, then all red, then green, then blue
    assert raw[0] == 4 and raw[1] == images[0, 0, 0, 0] and raw[1 + 1024] == images[0, 0, 0, 1]
    ds = load_cifar_binary([tmp_path / "b1.bin", tmp_path / "b1.bin"])
    assert len(ds) == 6
    np.testing.assert_array_equal(ds.images[:3], images)
    np.testing.assert_array_equal(ds.labels[3:], labels)


def test_cifar_truncated(tmp_path):
    (tmp_path / "b.bin").write_bytes(bytes(3073 + 5))
    with pytest.raises(TruncatedFileError):
        load_cifar_binary(tmp_path / "b.bin")


def test_dataset_validation():
    with pytest.raises(CountMismatchError):
        Dataset(np.zeros((3, 2, 2, 1)), np.zeros(2, np.int64), 2)
    with pytest.raises(DataError, match="labels"):
        Dataset(np.zeros((2, 2, 2, 1)), np.array([0, 2]), 2)
    with pytest.raises(DataError, match="range"):
        Dataset(np.full((1, 2, 2, 1), 2.0), np.array([0]), 2)


def test_to_range_round_trip():
    ds = tiny()
    back = ds.to_range("byte").to_range("unit")
    np.testing.assert_allclose(back.images, ds.images, atol=1e-12)
    assert ds.to_range("unit") is ds


# ---------------------------------------------------------------- generator

def test_synth_is_deterministic():
    a = synth_blobs(3, 4, 8, seed=5)
    b = synth_blobs(3, 4, 8, seed=5)
    assert a.images.tobytes() == b.images.tobytes()
    assert not np.array_equal(a.images, synth_blobs(3, 4, 8, seed=6).images)


def test_synth_without_jitter_repeats_templates():
    ds = synth_blobs(4, 5, 8, seed=0, jitter=0.0)
    for c in range(4):
        members = ds.images[ds.labels == c]
        assert np.all(members == members[0])
    assert ds.images.min() >= 0.15 and ds.images.max() <= 0.85


def test_synth_templates_are_mirror_symmetric():
    ds = synth_blobs(3, 1, 8, seed=2, jitter=0.0)
    np.testing.assert_array_equal(ds.images, flip_images(ds.images))


def test_synth_classes_are_separable_by_nearest_centroid():
    ds = synth_blobs(10, 50, 8, seed=0, jitter=0.05)
    flat = ds.images.reshape(len(ds), -1)
    centroids = np.stack([flat[ds.labels == c].mean(axis=0) for c in range(10)])
    d = ((flat[:, None, :] - centroids[None]) ** 2).sum(-1)
    assert np.mean(d.argmin(1) == ds.labels) == 1.0


# ----------------------------------------------------------- split/sample

def test_split_sizes_and_disjointness():
    m = 50000
    ds = Dataset(np.zeros((m, 1, 1, 1)), np.arange(m) % 10, 10)
    ds = ds.with_labels(np.arange(m) % 10)
    train, val = split(ds, 0.9, seed=0)
    assert len(train) == 45000 and len(val) == 5000
    assert train.role == "train" and val.role == "validation"


def test_split_partitions_samples():
    ds = Dataset(np.arange(20.0).reshape(20, 1, 1, 1) / 20, np.zeros(20, np.int64), 2)
    train, val = split(ds, 0.75, seed=3)
    ids = np.concatenate([train.images.ravel(), val.images.ravel()])
    assert sorted(ids) == sorted(ds.images.ravel())
    with pytest.raises(ValueError):
        split(ds, 1.0, seed=0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=2, max_size=6), st.integers(0, 2**16), st.data())
def test_subsample_is_stratified(class_sizes, seed, data):
    labels = np.repeat(np.arange(len(class_sizes)), class_sizes)
    m = len(labels)
    ds = Dataset(np.zeros((m, 1, 1, 1)), labels, len(class_sizes))
    count = data.draw(st.integers(1, m))
    sub = subsample(ds, count, seed)
    assert len(sub) == count
    got = np.bincount(sub.labels, minlength=len(class_sizes))
    expected = np.array(class_sizes) * count / m
    assert np.all(np.abs(got - expected) < 1)


# -------------------------------------------------------------- transforms

def test_shift_example():
    img = np.arange(9.0).reshape(1, 3, 3, 1)
    out = shift_images(img, 1, -1)[0, :, :, 0]
    np.testing.assert_array_equal(out, [[0, 0, 0], [1, 2, 0], [4, 5, 0]])
    assert np.all(shift_images(img, 3, 0) == 0)


def test_rotation_zero_is_identity_and_quarter_turn_permutes():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(2, 5, 5, 1))
    np.testing.assert_array_equal(rotate_images(img, 0.0), img)
    quarter = rotate_images(img, 90.0)
    np.testing.assert_allclose(quarter, np.rot90(img, k=1, axes=(1, 2)), atol=1e-12)


def test_flip_is_an_involution():
    img = np.random.default_rng(1).uniform(size=(4, 4, 2))
    np.testing.assert_array_equal(flip_images(flip_images(img)), img)


def test_augment_with_zero_params_is_identity():
    img = np.random.default_rng(2).uniform(size=(6, 6, 1))
    np.testing.assert_array_equal(augment(img, AugmentParams(), seed=0), img)


def test_augment_flip_only_matches_flip():
    img = np.random.default_rng(3).uniform(size=(6, 6, 1))
    np.testing.assert_array_equal(augment(img, AugmentParams(flip_probability=1.0), seed=0), flip_images(img))


def test_augment_is_seeded_and_stays_in_range():
    img = np.random.default_rng(4).uniform(size=(8, 8, 1))
    params = AugmentParams(max_shift=2, max_rotation=15, flip_probability=0.5)
    a = augment(img, params, seed=11)
    np.testing.assert_array_equal(a, augment(img, params, seed=11))
    assert a.min() >= 0 and a.max() <= 1


# -------------------------------------------------------------- label noise

def test_flip_count_rounds_half_up():
    assert flip_count(0.5, 3) == 2
    assert flip_count(0.29, 100) == 29
    assert flip_count(0.25, 10) == 3
    assert flip_count(0.0, 10) == 0 and flip_count(1.0, 7) == 7


def test_label_noise_flips_exact_count_to_false_labels():
    ds = tiny(m=200, k=5)
    for rate in (0.0, 0.1, 0.33, 0.5, 1.0):
        noisy, mask = inject_label_noise(ds, rate, seed=7)
        assert mask.count == flip_count(rate, 200)
        np.testing.assert_array_equal(noisy.labels != ds.labels, mask.flipped)
        np.testing.assert_array_equal(mask.original_labels, ds.labels)
        np.testing.assert_array_equal(noisy.images, ds.images)


def test_label_noise_false_labels_are_uniform():
    ds = Dataset(np.zeros((20000, 1, 1, 1)), np.zeros(20000, np.int64), 4)
    noisy, _ = inject_label_noise(ds, 1.0, seed=0)
    freq = np.bincount(noisy.labels, minlength=4) / 20000
    assert freq[0] == 0
    np.testing.assert_allclose(freq[1:], 1 / 3, atol=0.02)


def test_label_noise_is_seeded():
    ds = tiny(m=50, k=3)
    a, _ = inject_label_noise(ds, 0.4, seed=1)
    b, _ = inject_label_noise(ds, 0.4, seed=1)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_label_noise_rejects_bad_inputs():
    ds = Dataset(np.zeros((3, 1, 1, 1)), np.zeros(3, np.int64), 1)
    with pytest.raises(ValueError, match="two classes"):
        inject_label_noise(ds, 0.5, seed=0)
    with pytest.raises(ValueError):
        inject_label_noise(tiny(), 1.5, seed=0)


def test_binary_noise_at_full_rate_complements_labels():
    ds = tiny(m=40, k=2)
    noisy, mask = inject_label_noise(ds, 1.0, seed=0)
    np.testing.assert_array_equal(noisy.labels, 1 - ds.labels)
    assert mask.count == 40


def test_half_rate_on_hundred_samples_flips_fifty():
    noisy, mask = inject_label_noise(tiny(m=100, k=10), 0.5, seed=3)
    assert mask.count == 50


def test_operations_never_mutate_inputs():
    ds = synth_blobs(3, 10, 8, seed=0)
    images, labels = ds.images.copy(), ds.labels.copy()
    inject_label_noise(ds, 0.5, seed=1)
    split(ds, 0.5, seed=1)
    subsample(ds, 9, seed=1)
    ds.to_range("byte")
    augment(ds.images[0], AugmentParams(1, 10, 1.0), seed=1)
    shift_images(ds.images, 1, 1)
    rotate_images(ds.images, 5.0)
    np.testing.assert_array_equal(ds.images, images)
    np.testing.assert_array_equal(ds.labels, labels)
