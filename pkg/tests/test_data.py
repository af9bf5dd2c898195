import gzip
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smckit.data import (
    DataFormatError, Dataset, EpochSampler, NoiseSpec, augment, corruption_count, cutout_box, epoch_batches,
    inject_label_noise, load_cifar10_binary, load_idx, make_batch, random_subset, write_cifar10_binary, write_idx,
    write_noise_csv,
)

from conftest import synthetic_images


def random_uint8(shape, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=shape, dtype=np.uint8)


# loaders

def test_cifar_round_trip(tmp_path):
    imgs, labels = random_uint8((7, 32, 32, 3)), np.arange(7) % 10
    write_cifar10_binary(tmp_path / "b.bin", imgs, labels)
    ds = load_cifar10_binary(tmp_path / "b.bin")
    np.testing.assert_array_equal(ds.images, imgs)
    np.testing.assert_array_equal(ds.labels, labels)
    write_cifar10_binary(tmp_path / "c.bin", ds.images, ds.labels)
    assert (tmp_path / "b.bin").read_bytes() == (tmp_path / "c.bin").read_bytes()


def test_cifar_label_byte_offset(tmp_path):
    write_cifar10_binary(tmp_path / "b.bin", random_uint8((3, 32, 32, 3)), [7, 2, 9])
    raw = (tmp_path / "b.bin").read_bytes()
    ds = load_cifar10_binary(tmp_path / "b.bin")
    assert [raw[i * 3073] for i in range(3)] == ds.labels.tolist()
    # pixel (row 0, col 1) of the green plane of record 1
    assert raw[3073 + 1 + 1024 + 1] == ds.images[1, 0, 1, 1]


def test_cifar_empty_and_truncated(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"")
    with pytest.raises(DataFormatError):
        load_cifar10_binary(tmp_path / "e.bin")
    write_cifar10_binary(tmp_path / "b.bin", random_uint8((2, 32, 32, 3)), [1, 2])
    (tmp_path / "t.bin").write_bytes((tmp_path / "b.bin").read_bytes()[:-1])
    with pytest.raises(DataFormatError):
        load_cifar10_binary(tmp_path / "t.bin")
    with pytest.raises(DataFormatError):
        load_cifar10_binary(tmp_path / "b.bin", expected_records=10000)


def test_idx_round_trip_and_gzip(tmp_path):
    imgs, labels = random_uint8((5, 28, 28)), np.array([0, 9, 3, 3, 1])
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
    ds = load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (5, 28, 28, 1) and ds.image_shape == (1, 28, 28)
    np.testing.assert_array_equal(ds.images[..., 0], imgs)
    for name in ("i", "l"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    np.testing.assert_array_equal(load_idx(tmp_path / "i.gz", tmp_path / "l.gz").labels, labels)


def test_idx_header_count(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", random_uint8((10, 4, 4)), np.zeros(10, dtype=int))
    raw = (tmp_path / "i").read_bytes()
    assert int.from_bytes(raw[4:8], "big") == len(load_idx(tmp_path / "i", tmp_path / "l")) == 10


def test_idx_byteswapped_magic(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", random_uint8((2, 4, 4)), [0, 1])
    raw = (tmp_path / "i").read_bytes()
    (tmp_path / "i").write_bytes(raw[:4][::-1] + raw[4:])
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_short_labels(tmp_path):
    write_idx(tmp_path / "i", tmp_path / "l", random_uint8((3, 4, 4)), [0, 1, 2])
    write_idx(tmp_path / "i2", tmp_path / "l2", random_uint8((2, 4, 4)), [0, 1])
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "i", tmp_path / "l2")


def test_val_uses_given_stats():
    train = synthetic_images(20)
    val = synthetic_images(10, seed=3, split="val").with_stats(train.mean, train.std)
    np.testing.assert_array_equal(val.mean, train.mean)
    x = val.normalized(np.arange(2))
    ref = ((val.images[:2] / 255.0 - train.mean) / train.std).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(x, ref, atol=1e-15)


def test_random_subset_is_seeded():
    ds = synthetic_images(50)
    a, b = random_subset(ds, 10, 4), random_subset(ds, 10, 4)
    np.testing.assert_array_equal(a.images, b.images)
    assert len(a) == 10


# sampling

def test_sampler_two_batches_and_lookahead():
    s = EpochSampler(8, 4, seed=0, epochs=1)
    assert s.steps_per_epoch == 2
    np.testing.assert_array_equal(s.lookahead(0, 0), s.batch(0, 1))
    assert s.lookahead(0, 1) is None


def test_sampler_remainder():
    assert [len(b) for b in epoch_batches(10, 4, seed=0, epoch=0)] == [4, 4, 2]


def test_sampler_deterministic_and_epochs_differ():
    a, b = epoch_batches(30, 8, 5, 2), epoch_batches(30, 8, 5, 2)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(np.concatenate(a), np.concatenate(epoch_batches(30, 8, 5, 3)))


def test_sampler_rejects_oversized_batch():
    with pytest.raises(ValueError):
        epoch_batches(3, 4, 0, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 4), st.integers(0, 99))
def test_lookahead_is_next_step_batch(n, bs, epochs, seed):
    if bs > n:
        bs = n
    steps = list(EpochSampler(n, bs, seed, epochs))
    assert len(steps) == epochs * -(-n // bs)
    for cur, nxt in zip(steps, steps[1:]):
        np.testing.assert_array_equal(cur.lookahead, nxt.indices)
    assert steps[-1].lookahead is None
    for e in range(epochs):
        covered = np.concatenate([s.indices for s in steps if s.epoch == e])
        assert sorted(covered.tolist()) == list(range(n))


# augmentation

def test_empty_recipe_is_normalization_only():
    ds = synthetic_images(6)
    batch = make_batch(ds, np.arange(6))
    a = augment(batch, "A", 3, 0, [], ds)
    b = augment(batch, "B", 3, 0, [], ds)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.images, ds.normalized(np.arange(6)))


def test_augment_is_keyed_and_deterministic():
    ds = synthetic_images(16, size=8)
    batch = make_batch(ds, np.arange(16))
    rec = ["pad4_crop", "hflip"]
    a1, a2 = augment(batch, "A", 7, 1, rec, ds), augment(batch, "A", 7, 1, rec, ds)
    np.testing.assert_array_equal(a1.images, a2.images)
    assert not np.array_equal(a1.images, augment(batch, "B", 7, 1, rec, ds).images)
    assert not np.array_equal(a1.images, augment(batch, "A", 8, 1, rec, ds).images)


def test_augment_independent_of_batch_composition():
    ds = synthetic_images(10, size=8)
    rec = ["pad4_crop", "hflip", "cutout:4"]
    full = augment(make_batch(ds, np.arange(10)), "B", 2, 9, rec, ds)
    part = augment(make_batch(ds, np.array([7, 3])), "B", 2, 9, rec, ds)
    np.testing.assert_array_equal(part.images, full.images[[7, 3]])


def test_augment_channel_order_and_threads_agree():
    ds = synthetic_images(12, size=8)
    batch = make_batch(ds, np.arange(12))
    rec = ["pad4_crop", "hflip", "cutout:4"]
    fwd = {c: augment(batch, c, 5, 2, rec, ds).images for c in "ABC"}
    rev = {c: augment(batch, c, 5, 2, rec, ds).images for c in "CBA"}
    with ThreadPoolExecutor(3) as pool:
        par = dict(zip("ABC", pool.map(lambda c: augment(batch, c, 5, 2, rec, ds).images, "ABC")))
    for c in "ABC":
        np.testing.assert_array_equal(fwd[c], rev[c])
        np.testing.assert_array_equal(fwd[c], par[c])


def test_augment_views_carry_batch_indices():
    ds = synthetic_images(9, size=8)
    batch = make_batch(ds, np.array([4, 0, 8]))
    for c in "ABC":
        assert augment(batch, c, 0, 0, ["hflip"], ds).indices.tolist() == [4, 0, 8]


def clipped_area(cy, cx, size, H, W):
    """Count of grid cells inside the square, by brute force."""
    half = size // 2
    ys = [y for y in range(H) if cy - half <= y < cy - half + size]
    xs = [x for x in range(W) if cx - half <= x < cx - half + size]
    return len(ys) * len(xs)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_cutout_area_matches_geometry(seed):
    img = np.full((32, 32, 1), 200, dtype=np.uint8)
    ds = Dataset(img[None], [0], 2, "train", np.zeros(1), np.ones(1))
    view = augment(make_batch(ds, [0]), "A", seed % 1000, seed, ["cutout"], ds, cutout_size=16)
    zeroed = int(np.sum(view.images == 0))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, seed % 1000, 0, 0])))
    rng.integers(0, 9, size=2)
    rng.random()
    cy, cx = int(rng.integers(0, 32)), int(rng.integers(0, 32))
    assert 64 <= zeroed <= 256
    assert zeroed == clipped_area(cy, cx, 16, 32, 32)
    y0, y1, x0, x1 = cutout_box(cy, cx, 16, 32, 32)
    assert zeroed == (y1 - y0) * (x1 - x0)


def test_unknown_recipe_rejected():
    ds = synthetic_images(2)
    with pytest.raises(ValueError):
        augment(make_batch(ds, [0]), "A", 0, 0, ["rotate"], ds)


# label noise

def test_zero_noise_is_identity():
    ds = synthetic_images(30)
    noisy, mask = inject_label_noise(ds, NoiseSpec(0.0, 1))
    np.testing.assert_array_equal(noisy.labels, ds.labels)
    assert not mask.any()


def test_noise_exact_count():
    ds = Dataset(np.zeros((1000, 1, 1, 1), np.uint8), np.arange(1000) % 10, 10)
    noisy, mask = inject_label_noise(ds, NoiseSpec(0.4, 3))
    assert mask.sum() == 400
    assert np.all(noisy.labels[mask] != ds.labels[mask])
    assert np.array_equal(noisy.labels[~mask], ds.labels[~mask])
    again, _ = inject_label_noise(ds, NoiseSpec(0.4, 3))
    np.testing.assert_array_equal(again.labels, noisy.labels)


def test_noise_train_only():
    with pytest.raises(ValueError):
        inject_label_noise(synthetic_images(5, split="val"), NoiseSpec(0.1))
    with pytest.raises(ValueError):
        NoiseSpec(1.5)


def test_noise_csv(tmp_path):
    ds = synthetic_images(40)
    noisy, mask = inject_label_noise(ds, NoiseSpec(0.25, 0))
    write_noise_csv(tmp_path / "n.csv", ds, noisy, mask)
    lines = (tmp_path / "n.csv").read_text().splitlines()
    assert lines[0] == "index,old_label,new_label" and len(lines) == 11
    i, old, new = map(int, lines[1].split(","))
    assert ds.labels[i] == old and noisy.labels[i] == new


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 500), st.floats(0, 1), st.integers(2, 12), st.integers(0, 999))
def test_noise_properties(n, eta, k, seed):
    labels = np.random.default_rng(seed).integers(0, k, size=n)
    ds = Dataset(np.zeros((n, 1, 1, 1), np.uint8), labels, k)
    noisy, mask = inject_label_noise(ds, NoiseSpec(eta, seed))
    assert len(noisy) == n
    assert mask.sum() == corruption_count(eta, n) == int(np.floor(eta * n + 0.5))
    assert np.all(noisy.labels[mask] != labels[mask])
    assert noisy.labels.min() >= 0 and noisy.labels.max() < k
