import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcae.data import (NOVEL_ANGLES, TRAIN_ANGLES, BadMagicError, CountMismatchError, DataError, Dataset,
                       TruncatedFileError, ViewpointSpec, augment, hflip, iterate_batches, load_idx, load_mnist,
                       load_dataset, make_viewpoint_dataset, render_shape, save_dataset, split_train_val, stratified_subset, write_idx)


def _fixture(tmp_path, n=1, gz=False):
    imgs = np.arange(n * 4, dtype=np.uint8).reshape(n, 2, 2) * 60
    labels = np.arange(n, dtype=np.uint8) % 10
    ip, lp = tmp_path / "img", tmp_path / "lab"
    write_idx(ip, imgs)
    write_idx(lp, labels)
    if gz:
        for p in (ip, lp):
            p.with_suffix(".gz").write_bytes(gzip.compress(p.read_bytes()))
        ip, lp = ip.with_suffix(".gz"), lp.with_suffix(".gz")
    return ip, lp, imgs, labels


def test_idx_one_image_fixture(tmp_path):
    ip, lp, _, _ = _fixture(tmp_path)
    raw = ip.read_bytes()
    assert raw[:4] == b"\x00\x00\x08\x03" and raw[4:8] == b"\x00\x00\x00\x01"
    ds = load_idx(ip, lp)
    assert ds.images.shape == (1, 1, 2, 2) and ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.images[0, 0] * 255, [[0, 60], [120, 180]])
    assert ds.labels.tolist() == [0]


def test_idx_gzip(tmp_path):
    ip, lp, imgs, _ = _fixture(tmp_path, 3, gz=True)
    assert load_idx(ip, lp).images.shape == (3, 1, 2, 2)


def test_idx_errors_are_distinct(tmp_path):
    ip, lp, _, _ = _fixture(tmp_path, 2)
    bad = tmp_path / "bad"
    bad.write_bytes(b"\x00\x00\x08\x01" + ip.read_bytes()[4:])
    with pytest.raises(BadMagicError):
        load_idx(bad, lp)
    bad.write_bytes(ip.read_bytes()[:-1])
    with pytest.raises(TruncatedFileError):
        load_idx(bad, lp)
    bad.write_bytes(b"\x00\x00")
    with pytest.raises(TruncatedFileError):
        load_idx(bad, lp)
    write_idx(bad, np.zeros(3, np.uint8))
    with pytest.raises(CountMismatchError):
        load_idx(ip, bad)
    with pytest.raises(DataError):
        load_idx(tmp_path / "missing", lp)


def test_mnist_header_counts():
    try:
        ds = load_mnist()
    except DataError:
        pytest.skip("MNIST files not available")
    assert ds.images.shape == (60000, 1, 28, 28)
    assert 0.0 <= ds.images.min() and ds.images.max() <= 1.0
    assert len(load_mnist(split="test")) == 10000


def test_env_var_overrides_data_dir(tmp_path, monkeypatch):
    imgs = np.zeros((2, 28, 28), np.uint8)
    write_idx(tmp_path / "train-images-idx3-ubyte", imgs)
    write_idx(tmp_path / "train-labels.idx1-ubyte", np.array([1, 2], np.uint8))
    monkeypatch.setenv("MCAE_DATA_DIR", str(tmp_path))
    assert len(load_mnist("/nonexistent")) == 2


def _ds(n):
    return Dataset(np.zeros((n, 1, 2, 2), np.float32), np.arange(n) % 10)


def test_split_sizes_and_partition():
    tr, va = split_train_val(_ds(100), 0.1, seed=3)
    assert (len(tr), len(va)) == (90, 10)
    with pytest.raises(DataError):
        split_train_val(_ds(1))
    with pytest.raises(ValueError):
        split_train_val(_ds(10), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_split_is_deterministic_partition(n, f, seed):
    ds = Dataset(np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), np.zeros(n, np.int64))
    tr, va = split_train_val(ds, f, seed)
    a = set(tr.images.ravel().astype(int))
    b = set(va.images.ravel().astype(int))
    assert a | b == set(range(n)) and not a & b
    assert len(va) == min(max(round(f * n), 1), n - 1)
    tr2, va2 = split_train_val(ds, f, seed)
    assert np.array_equal(va.images, va2.images)


def test_stratified_subset_balanced():
    ds = Dataset(np.zeros((1000, 1, 1, 1), np.float32), np.arange(1000) % 10)
    sub = stratified_subset(ds, 100, 0)
    assert np.bincount(sub.labels).tolist() == [10] * 10


def test_augment_policies():
    rng = np.random.default_rng(0)
    img = rng.random((1, 6, 6)).astype(np.float32)
    assert augment(img, "none", rng) is img
    shifted = augment(img, "pad4_randcrop", rng, offset=(0, 0))
    assert np.all(shifted[:, :4, :] == 0) and np.all(shifted[:, :, :4] == 0)
    np.testing.assert_array_equal(shifted[:, 4:, 4:], img[:, :2, :2])
    assert np.array_equal(augment(img, "pad4_randcrop", rng, offset=(4, 4)), img)
    flipped = augment(img, "pad4_randcrop+hflip", rng, offset=(4, 4), flip=True)
    np.testing.assert_array_equal(flipped, img[:, :, ::-1])
    assert np.array_equal(hflip(hflip(img)), img)
    with pytest.raises(ValueError):
        augment(img, "rotate", rng)


def test_augment_deterministic_and_shape():
    img = np.random.default_rng(1).random((1, 8, 8)).astype(np.float32)
    a = augment(img, "pad4_randcrop+hflip", np.random.default_rng(5))
    b = augment(img, "pad4_randcrop+hflip", np.random.default_rng(5))
    assert a.shape == img.shape and np.array_equal(a, b)


def test_batches_cover_dataset():
    ds = _ds(10)
    seen = np.concatenate([idx for idx, _, _ in iterate_batches(ds, 4, np.random.default_rng(0))])
    assert sorted(seen.tolist()) == list(range(10))
    assert [len(i) for i, _, _ in iterate_batches(ds, 4)] == [4, 4, 2]


def test_viewpoint_angle_sets():
    assert not set(TRAIN_ANGLES) & set(NOVEL_ANGLES)
    assert NOVEL_ANGLES[0] == 60 and NOVEL_ANGLES[-1] == 280
    with pytest.raises(ValueError):
        ViewpointSpec(novel_angles=(0, 60))
    with pytest.raises(ValueError):
        ViewpointSpec(novel_angles=(20 + 360,))


def test_square_at_zero_matches_template():
    sq = render_shape("square", 0)[0]
    template = np.zeros((28, 28), np.float32)
    template[9:19, 9:19] = 1
    assert np.array_equal(sq, template)


def test_rotation_changes_glyph():
    assert not np.allclose(render_shape("L", 0), render_shape("L", 90))
    np.testing.assert_allclose(render_shape("square", 90), render_shape("square", 0), atol=1e-6)


def test_viewpoint_dataset_splits():
    spec = ViewpointSpec()
    tr, fam, nov = make_viewpoint_dataset(spec, 2, 0)
    C = len(spec.classes)
    assert len(tr) == C * len(TRAIN_ANGLES) * 2 and len(nov) == C * len(NOVEL_ANGLES) * 2
    for ds in (tr, fam, nov):
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        counts = np.bincount(ds.labels, minlength=C)
        assert (counts == counts[0]).all()
    assert set(nov.meta["angles"]) == set(NOVEL_ANGLES)
    assert not np.array_equal(tr.images, fam.images)
    again = make_viewpoint_dataset(spec, 2, 0)[0]
    assert np.array_equal(again.images, tr.images)


def test_viewpoint_dataset_serialises(tmp_path):
    tr, _, _ = make_viewpoint_dataset(ViewpointSpec(), 1, 3)
    save_dataset(tmp_path / "vp.bin", tr)
    back = load_dataset(tmp_path / "vp.bin")
    assert back.images.tobytes() == tr.images.tobytes()
    assert np.array_equal(back.labels, tr.labels) and back.num_classes == tr.num_classes
    assert np.array_equal(back.meta["angles"], tr.meta["angles"])
