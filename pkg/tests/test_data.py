import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mbq import autograd as ag
from mbq.data import (
    CIFAR_RECORD,
    Dataset,
    FormatError,
    denormalize,
    epoch_batches,
    iterate,
    load_cifar10_bin,
    load_mnist_idx,
    normalize,
    simplex_centers,
    stream_rng,
    synth_blobs,
    write_mnist_idx,
)


def idx_images(n, pixels=None):
    pixels = np.zeros((n, 28, 28), np.uint8) if pixels is None else pixels
    return struct.pack(">IIII", 0x803, n, 28, 28) + pixels.tobytes()


def idx_labels(labels):
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels)


# -- MNIST IDX ------------------------------------------------------------------------


def test_four_image_fixture(tmp_path):
    (tmp_path / "i").write_bytes(idx_images(4))
    (tmp_path / "l").write_bytes(idx_labels([0, 3, 9, 1]))
    ds = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert len(ds) == 4 and ds.images.shape == (4, 1, 28, 28)
    assert np.all(ds.images == 0)
    assert ds.labels.tolist() == [0, 3, 9, 1] and ds.num_classes == 10


def test_pixel_scaling(tmp_path):
    px = np.zeros((1, 28, 28), np.uint8)
    px[0, 0, 0], px[0, 5, 7] = 255, 51
    (tmp_path / "i").write_bytes(idx_images(1, px))
    (tmp_path / "l").write_bytes(idx_labels([2]))
    ds = load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images[0, 0, 0, 0] == 1.0
    assert ds.images[0, 0, 5, 7] == pytest.approx(0.2)


def test_gzip_round_trip(tmp_path, rng):
    px = rng.integers(0, 256, (5, 28, 28), dtype=np.uint8)
    write_mnist_idx(px, [1, 2, 3, 4, 5], tmp_path / "i.gz", tmp_path / "l.gz")
    assert gzip.decompress((tmp_path / "i.gz").read_bytes())[:4] == b"\x00\x00\x08\x03"
    ds = load_mnist_idx(tmp_path / "i.gz", tmp_path / "l.gz")
    np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), px)


def test_bad_magic_reports_offset(tmp_path):
    (tmp_path / "i").write_bytes(struct.pack(">IIII", 0x801, 1, 28, 28) + bytes(784))
    (tmp_path / "l").write_bytes(idx_labels([0]))
    with pytest.raises(FormatError) as err:
        load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert err.value.offset == 0 and "magic" in str(err.value)


def test_truncated_payload_reports_offset(tmp_path):
    data = idx_images(2)[:-10]
    (tmp_path / "i").write_bytes(data)
    (tmp_path / "l").write_bytes(idx_labels([0, 1]))
    with pytest.raises(FormatError) as err:
        load_mnist_idx(tmp_path / "i", tmp_path / "l")
    assert err.value.offset == len(data) and "truncated" in str(err.value)


def test_label_count_mismatch(tmp_path):
    (tmp_path / "i").write_bytes(idx_images(2))
    (tmp_path / "l").write_bytes(idx_labels([0]))
    with pytest.raises(FormatError):
        load_mnist_idx(tmp_path / "i", tmp_path / "l")


def test_shipped_subset_loads(mnist_paths):
    ds = load_mnist_idx(mnist_paths["train_images"], mnist_paths["train_labels"])
    assert ds.images.shape == (4000, 1, 28, 28)
    assert np.bincount(ds.labels).tolist() == [400] * 10
    assert 0 <= ds.images.min() and ds.images.max() <= 1


# -- CIFAR-10 binary -------------------------------------------------------------------


def cifar_record(label, fill=0):
    return bytes([label]) + bytes([fill]) * (CIFAR_RECORD - 1)


def test_cifar_two_records(tmp_path):
    (tmp_path / "b.bin").write_bytes(cifar_record(9, 255) + cifar_record(0, 0))
    ds = load_cifar10_bin([tmp_path / "b.bin"])
    assert ds.images.shape == (2, 3, 32, 32)
    assert ds.labels.tolist() == [9, 0]
    assert np.all(ds.images[0] == 1.0) and np.all(ds.images[1] == 0.0)


def test_cifar_channel_major_layout(tmp_path):
    pixels = np.zeros((3, 32, 32), np.uint8)
    pixels[1, 2, 3] = 255  # green channel, row 2, column 3
    (tmp_path / "b.bin").write_bytes(bytes([4]) + pixels.tobytes())
    ds = load_cifar10_bin(tmp_path / "b.bin")
    assert len(ds) == 1 and ds.images[0, 1, 2, 3] == 1.0 and ds.images.sum() == 1.0


def test_cifar_bad_length(tmp_path):
    (tmp_path / "b.bin").write_bytes(cifar_record(1) + b"\x00\x01")
    with pytest.raises(FormatError) as err:
        load_cifar10_bin([tmp_path / "b.bin"])
    assert err.value.offset == CIFAR_RECORD


# -- blobs ----------------------------------------------------------------------------------


def test_simplex_centers_equidistant():
    c = simplex_centers(4, 8, 3.0)
    dist = np.linalg.norm(c[:, None] - c[None], axis=2)
    np.testing.assert_allclose(dist[~np.eye(4, dtype=bool)], 3.0, rtol=1e-12)
    with pytest.raises(ValueError):
        simplex_centers(10, 4, 1.0)


def test_blobs_deterministic():
    a, b = synth_blobs(100, 8, 4, 3.0, seed=7), synth_blobs(100, 8, 4, 3.0, seed=7)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert synth_blobs(100, 8, 4, 3.0, seed=8).images.tobytes() != a.images.tobytes()


def test_blobs_argument_checks():
    with pytest.raises(ValueError):
        synth_blobs(10, 8, 1, 3.0)
    with pytest.raises(ValueError):
        synth_blobs(10, 1, 2, 3.0)


def _train_linear(ds, epochs=50, lr=0.5):
    rng = np.random.default_rng(0)
    w = ag.Tensor(rng.standard_normal((ds.num_classes, ds.images.shape[1])) * 0.01, requires_grad=True)
    c = ag.Tensor(np.zeros(ds.num_classes), requires_grad=True)
    for epoch in range(epochs):
        for idx in epoch_batches(np.arange(len(ds)), 50, stream_rng(0, epoch, 0)):
            logits = ag.bias_add(ag.linear(ag.Tensor(ds.images[idx]), w), c)
            grads = ag.backward(ag.softmax_cross_entropy(logits, ds.labels[idx]))
            w.data = w.data - lr * grads[w]
            c.data = c.data - lr * grads[c]
    return lambda other: float(np.mean(np.argmax(other.images @ w.data.T + c.data, axis=1) == other.labels))


def test_well_separated_blobs_linearly_learnable():
    train = synth_blobs(1000, 8, 4, 10.0, seed=0)
    assert _train_linear(train, epochs=50)(train) >= 0.99


def test_coincident_blobs_at_chance():
    # identical centers: labels carry no signal, held-out accuracy stays at chance
    accuracy = _train_linear(synth_blobs(2000, 8, 4, 0.0, seed=0), epochs=5, lr=0.05)
    assert abs(accuracy(synth_blobs(4000, 8, 4, 0.0, seed=1)) - 0.25) < 0.03


# -- normalisation and batching -------------------------------------------------------------


def test_normalize_round_trip(rng):
    ds = Dataset(rng.random((20, 3, 4, 4)), rng.integers(0, 10, 20), 10)
    n = normalize(ds)
    flat = n.images.transpose(1, 0, 2, 3).reshape(3, -1)
    np.testing.assert_allclose(flat.mean(axis=1), 0, atol=1e-6)
    np.testing.assert_allclose(flat.std(axis=1), 1, atol=1e-5)
    np.testing.assert_allclose(denormalize(n).images, ds.images, atol=1e-6)


def test_normalize_uses_given_stats(rng):
    train = Dataset(rng.random((10, 2)), np.zeros(10, int), 2)
    test = Dataset(rng.random((5, 2)), np.zeros(5, int), 2)
    ntr = normalize(train)
    nte = normalize(test, ntr.mean, ntr.std)
    np.testing.assert_allclose(nte.images, (test.images - ntr.mean) / ntr.std, rtol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 200), st.integers(1, 64), st.integers(0, 2**31 - 1))
def test_epoch_batches_visit_each_index_once(n, bs, seed):
    idx = np.arange(n) * 3 + 1
    batches = epoch_batches(idx, bs, np.random.default_rng(seed))
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == idx.tolist()
    assert all(len(b) == bs for b in batches[:-1]) and 0 < len(batches[-1]) <= bs


def test_iterate_preserves_order(rng):
    ds = Dataset(rng.random((7, 2)), np.arange(7) % 3, 3)
    got = [idx.tolist() for idx, _, _ in iterate(ds, 3)]
    assert got == [[0, 1, 2], [3, 4, 5], [6]]


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), np.zeros(2, int), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 5]), 2)
