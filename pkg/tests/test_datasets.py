import logging

import numpy as np
import pytest

import oracles
from evofed.datasets import (
    IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
    BadMagicError,
    CountMismatchError,
    Dataset,
    TruncatedFileError,
    load_idx,
    noniid_split,
    synth_blobs,
    train_test_split,
)

IMAGES = np.array([[[0, 255], [51, 102]], [[255, 255], [0, 0]], [[1, 2], [3, 4]]], dtype=np.uint8)
LABELS = np.array([3, 0, 9], dtype=np.uint8)


@pytest.fixture()
def idx_pair(request, tmp_path):
    suffix = getattr(request, "param", "")
    images = oracles.write_idx(tmp_path / f"images.idx{suffix}", IDX_IMAGES_MAGIC, IMAGES)
    labels = oracles.write_idx(tmp_path / f"labels.idx{suffix}", IDX_LABELS_MAGIC, LABELS)
    yield images, labels


def labelled(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(np.zeros((labels.size, 1)), labels, num_classes)


def test_blobs_are_deterministic():
    a, b = synth_blobs(3, 100, 2, 4, 0.1), synth_blobs(3, 100, 2, 4, 0.1)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(synth_blobs(4, 100, 2, 4, 0.1).inputs, a.inputs)


def test_blobs_are_balanced_and_scaled():
    ds = synth_blobs(0, 100, 3, 4, 0.2)
    assert list(np.bincount(ds.labels)) == [25] * 4
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0
    np.testing.assert_array_equal(ds.inputs.min(axis=0), 0.0)
    np.testing.assert_array_equal(ds.inputs.max(axis=0), 1.0)


def test_blobs_without_spread_are_linearly_separable():
    ds = synth_blobs(5, 200, 2, 4, 0.0)
    centers = np.stack([ds.inputs[ds.labels == c][0] for c in range(4)])
    for c in range(4):
        assert np.all(ds.inputs[ds.labels == c] == centers[c])
    # nearest-center classifier written as a linear model
    weights, bias = 2.0 * centers.T, -np.sum(centers**2, axis=1)
    predicted = np.argmax(ds.inputs @ weights + bias, axis=1)
    np.testing.assert_array_equal(predicted, ds.labels)


@pytest.mark.parametrize(
    "n, d, classes, spread", [(3, 2, 4, 0.1), (10, 0, 2, 0.1), (10, 2, 2, -1.0)]
)
def test_invalid_blobs(n, d, classes, spread):
    with pytest.raises(ValueError):
        synth_blobs(0, n, d, classes, spread)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan], [0.0]]), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 1)), np.array([0, 1]), 2)


def test_train_test_split():
    ds = synth_blobs(1, 100, 2, 4, 0.1)
    train, test = train_test_split(ds, 0.2, 1)
    assert (len(train), len(test)) == (80, 20)
    rows = {tuple(x) for x in np.vstack([train.inputs, test.inputs])}
    assert len(rows) == len({tuple(x) for x in ds.inputs})
    with pytest.raises(ValueError):
        train_test_split(ds, 1.0, 1)


@pytest.mark.parametrize("idx_pair", ["", ".gz"], indirect=True)
def test_load_idx(idx_pair):
    ds = load_idx(*idx_pair)
    assert ds.inputs.shape == (3, 4)
    np.testing.assert_array_equal(ds.inputs[0], [0.0, 1.0, 0.2, 0.4])
    np.testing.assert_array_equal(ds.labels, [3, 0, 9])
    assert ds.num_classes == 10


def test_load_idx_class_count(tmp_path, idx_pair):
    binary = oracles.write_idx(
        tmp_path / "binary.idx", IDX_LABELS_MAGIC, np.array([1, 0, 1], dtype=np.uint8)
    )
    assert load_idx(idx_pair[0], binary).num_classes == 2
    assert load_idx(idx_pair[0], binary, num_classes=10).num_classes == 10
    with pytest.raises(ValueError):
        load_idx(*idx_pair, num_classes=5)


def test_load_idx_centered(idx_pair):
    ds = load_idx(*idx_pair, center=True)
    np.testing.assert_allclose(ds.inputs.mean(axis=0), 0.0, atol=1e-15)


def test_idx_bad_magic(tmp_path, idx_pair):
    images = oracles.write_idx(tmp_path / "bad.idx", IDX_LABELS_MAGIC, IMAGES)
    with pytest.raises(BadMagicError):
        load_idx(images, idx_pair[1])


def test_idx_truncated(tmp_path, idx_pair):
    images = oracles.write_idx(tmp_path / "short.idx", IDX_IMAGES_MAGIC, IMAGES, dims=(4, 2, 2))
    with pytest.raises(TruncatedFileError):
        load_idx(images, idx_pair[1])
    header = tmp_path / "header.idx"
    header.write_bytes(IDX_IMAGES_MAGIC.to_bytes(4, "big") + b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        load_idx(header, idx_pair[1])


def test_idx_count_mismatch(tmp_path, idx_pair):
    labels = oracles.write_idx(tmp_path / "labels2.idx", IDX_LABELS_MAGIC, LABELS[:2])
    with pytest.raises(CountMismatchError):
        load_idx(idx_pair[0], labels)


def test_noniid_split_gives_each_client_its_classes():
    ds = labelled(np.arange(1000) % 10, 10)
    plan = noniid_split(ds, 5, 2, 0)
    assert np.all((plan.assignment >= 0) & (plan.assignment < 5))
    seen = []
    for j, shard in enumerate(plan.shards(ds)):
        assert len(set(shard.labels)) == 2
        assert len(shard) == 200
        seen.append(plan.indices(j))
    np.testing.assert_array_equal(np.sort(np.concatenate(seen)), np.arange(1000))


def test_shared_classes_are_split_evenly():
    ds = labelled(np.arange(400) % 4, 4)
    plan = noniid_split(ds, 4, 2, 3)
    sizes = [len(shard) for shard in plan.shards(ds)]
    assert sum(sizes) == 400
    assert max(sizes) - min(sizes) <= 2
    assert all(len(set(shard.labels)) == 2 for shard in plan.shards(ds))


def test_noniid_split_is_deterministic():
    ds = labelled(np.arange(300) % 10, 10)
    first, second = noniid_split(ds, 5, 2, 9), noniid_split(ds, 5, 2, 9)
    np.testing.assert_array_equal(first.assignment, second.assignment)


def test_single_client_gets_everything(caplog):
    ds = labelled(np.arange(50) % 10, 10)
    with caplog.at_level(logging.WARNING, logger="evofed"):
        plan = noniid_split(ds, 1, 2, 0)
    np.testing.assert_array_equal(plan.indices(0), np.arange(50))
    assert "do not cover" in caplog.text


def test_invalid_splits():
    ds = labelled(np.arange(20) % 4, 4)
    with pytest.raises(ValueError):
        noniid_split(ds, 2, 5, 0)
    with pytest.raises(ValueError):
        noniid_split(ds, 0, 2, 0)
