import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from tbnet.data import (IDENTITY_AUGMENT, AugmentParams, DataError, DatasetManifest, PreprocessSpec, Record,
                        apply_augment, augment, augment_batch, corner_box, load_images, load_manifest,
                        preprocess, read_image, sample_augment_params, split_counts, split_dataset,
                        write_manifest)


def _png(path, value=128, size=(8, 8), mode="L"):
    if mode == "I;16":
        Image.fromarray(np.full(size, value, np.uint16)).save(path)
    else:
        Image.fromarray(np.full(size, value, np.uint8)).save(path)
    return path


def _manifest(n, n_pos, root="."):
    return DatasetManifest([Record(f"img{i}.png", int(i < n_pos)) for i in range(n)], root=root)


# -- manifest ------------------------------------------------------------------------
def test_two_row_manifest(tmp_path):
    _png(tmp_path / "a.png")
    _png(tmp_path / "b.png")
    (tmp_path / "m.csv").write_text("path,label\na.png,0\nb.png,positive\n")
    m = load_manifest(tmp_path / "m.csv")
    assert len(m) == 2
    assert m.labels().tolist() == [0, 1]
    assert m.resolve(m.records[0]) == tmp_path / "a.png"


def test_bad_label_names_row(tmp_path):
    _png(tmp_path / "a.png")
    _png(tmp_path / "b.png")
    (tmp_path / "m.csv").write_text("path,label\na.png,0\nb.png,2\n")
    with pytest.raises(DataError, match=r"m\.csv:3.*'2'"):
        load_manifest(tmp_path / "m.csv")


def test_missing_file(tmp_path):
    (tmp_path / "m.csv").write_text("path,label\nnope.png,1\n")
    with pytest.raises(DataError, match="not found"):
        load_manifest(tmp_path / "m.csv")


def test_duplicate_path(tmp_path):
    _png(tmp_path / "a.png")
    (tmp_path / "m.csv").write_text("path,label\na.png,0\na.png,1\n")
    with pytest.raises(DataError, match="duplicate"):
        load_manifest(tmp_path / "m.csv")


def test_undecodable_image(tmp_path):
    (tmp_path / "a.png").write_bytes(b"not a png")
    (tmp_path / "m.csv").write_text("path,label\na.png,0\n")
    with pytest.raises(DataError, match="decode"):
        load_manifest(tmp_path / "m.csv")


def test_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("file,class\n")
    with pytest.raises(DataError, match="header"):
        load_manifest(tmp_path / "m.csv")


def test_write_then_load_round_trip(tmp_path):
    for i in range(3):
        _png(tmp_path / f"img{i}.png")
    m = DatasetManifest([Record(f"img{i}.png", i % 2, "train") for i in range(3)], root=str(tmp_path))
    write_manifest(m, tmp_path / "out.csv")
    assert load_manifest(tmp_path / "out.csv").records == m.records


COHORT = os.environ.get("TBNET_COHORT_MANIFEST")


@pytest.mark.skipif(not COHORT, reason="set TBNET_COHORT_MANIFEST to the assembled cohort manifest")
def test_full_cohort_counts():
    m = load_manifest(COHORT, verify_images=False)
    assert m.counts() == {"total": 6939, "positive": 3461, "negative": 3478}


# -- split ---------------------------------------------------------------------------
@pytest.mark.parametrize("n,expect", [(10, (8, 1, 1)), (6939, (5551, 694, 694)), (15, (11, 2, 2)), (11, (9, 1, 1))])
def test_split_counts(n, expect):
    assert split_counts(n) == expect
    assert sum(split_counts(n)) == n


def test_split_n10():
    s = split_dataset(_manifest(10, 5), seed=1)
    assert [len(s.subset(k)) for k in ("train", "val", "test")] == [8, 1, 1]


def _check_partition(original, split):
    assert sorted(r.image_path for r in split.records) == sorted(r.image_path for r in original.records)
    assert all(r.split in ("train", "val", "test") for r in split.records)
    assert [r.label for r in split.records] == [r.label for r in original.records]


def test_split_cohort_size_stratified():
    m = _manifest(6939, 3461)
    s = split_dataset(m, seed=0)
    _check_partition(m, s)
    sizes = [len(s.subset(k)) for k in ("train", "val", "test")]
    assert sizes == [5551, 694, 694]
    frac = 3461 / 6939
    for k in ("train", "val", "test"):
        assert abs(s.labels(k).mean() - frac) <= 0.02


def test_split_deterministic_and_seed_sensitive():
    m = _manifest(200, 70)
    a, b, c = split_dataset(m, seed=3), split_dataset(m, seed=3), split_dataset(m, seed=4)
    assert a.records == b.records
    assert a.records != c.records


def test_split_too_small():
    with pytest.raises(DataError, match="10"):
        split_dataset(_manifest(9, 4))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(10, 400), pos_frac=st.floats(0.2, 0.8), seed=st.integers(0, 1000))
def test_split_partition_property(n, pos_frac, seed):
    n_pos = max(1, min(n - 1, int(n * pos_frac)))
    m = _manifest(n, n_pos)
    s = split_dataset(m, seed=seed)
    _check_partition(m, s)
    assert tuple(len(s.subset(k)) for k in ("train", "val", "test")) == split_counts(n)
    # largest-remainder stratification: each split is within one sample of its exact share
    for k in ("train", "val", "test"):
        size = len(s.subset(k))
        assert abs(s.labels(k).sum() - size * n_pos / n) < 1.0 + 1e-9


# -- preprocess ----------------------------------------------------------------------
def test_constant_image_is_constant():
    out = preprocess(np.full((300, 260), 77, np.uint8))
    assert out.shape == (1, 1, 224, 224) and out.dtype == np.float32
    np.testing.assert_allclose(out, 77 / 255, rtol=1e-6)


def test_corner_imputation_exact_pixels():
    img = np.arange(16, dtype=np.uint8).reshape(4, 4) * 10
    img[0, 0], img[0, 3] = 250, 5
    spec = PreprocessSpec(target_size=(4, 4), corner_fraction=0.25)
    out = preprocess(img, spec)[0, 0]
    mu = img.astype(np.float64).mean()
    expect = img / 255.0
    expect[0, 0] = expect[0, 3] = mu / 255
    np.testing.assert_allclose(out, expect, rtol=1e-6)
    changed = np.argwhere(~np.isclose(out, img / 255.0))
    assert sorted(map(tuple, changed)) == [(0, 0), (0, 3)]


def test_corner_rectangles_at_default_size():
    img = np.zeros((224, 224), np.uint8)
    img[::2] = 200
    out = preprocess(img)[0, 0]
    ch, cw = corner_box((224, 224), 0.15)
    assert (ch, cw) == (34, 34)
    mu = np.float32(img.mean() / 255)
    modified = ~np.isclose(out, img / 255.0)
    expected = np.zeros_like(modified)
    expected[:34, :34] = expected[:34, -34:] = True
    assert np.array_equal(modified, expected)
    np.testing.assert_allclose(out[expected], mu, rtol=1e-6)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 64), w=st.integers(1, 64), seed=st.integers(0, 100))
def test_preprocess_range(h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w)).astype(np.uint8)
    out = preprocess(img, PreprocessSpec(target_size=(32, 32)))
    assert out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, preprocess(img, PreprocessSpec(target_size=(32, 32))))


def test_uint16_scaling(tmp_path):
    _png(tmp_path / "a.png", value=65535, mode="I;16")
    img = read_image(tmp_path / "a.png")
    assert img.dtype == np.uint16
    np.testing.assert_allclose(preprocess(img), 1.0)


def test_colour_image_uses_channel_mean(tmp_path):
    arr = np.zeros((4, 4, 3), np.uint8)
    arr[..., 0], arr[..., 1], arr[..., 2] = 30, 60, 90
    Image.fromarray(arr).save(tmp_path / "c.png")
    np.testing.assert_allclose(read_image(tmp_path / "c.png"), 60.0)


@pytest.mark.parametrize("bad", [np.zeros((0, 4)), np.zeros((2, 3, 3)), np.zeros(5)])
def test_preprocess_rejects(bad):
    with pytest.raises(DataError):
        preprocess(bad)


@pytest.mark.parametrize("f", [0.0, 0.5, -0.1])
def test_corner_fraction_bounds(f):
    with pytest.raises(ValueError):
        PreprocessSpec(corner_fraction=f)


def test_threaded_loading_matches_serial(synthetic_manifest):
    m = load_manifest(synthetic_manifest)
    recs = m.records[:6]
    assert np.array_equal(load_images(m, recs, threads=1), load_images(m, recs, threads=3))


# -- augmentation --------------------------------------------------------------------
def test_identity_params(rng):
    x = rng.uniform(0, 1, (1, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(apply_augment(x, IDENTITY_AUGMENT), x)


def test_double_flip(rng):
    x = rng.uniform(0, 1, (1, 16, 16)).astype(np.float32)
    flip = AugmentParams(flip=True)
    np.testing.assert_array_equal(apply_augment(apply_augment(x, flip), flip), x)
    np.testing.assert_array_equal(apply_augment(x, flip), x[..., ::-1])


def test_contrast_factor_distribution():
    rng = np.random.default_rng(0)
    factors = np.array([sample_augment_params(rng, (224, 224)).contrast for _ in range(10_000)])
    assert factors.min() >= 0.8 and factors.max() <= 1.2
    assert abs(factors.mean() - 1.0) < 0.01


def test_sampled_params_within_bounds():
    rng = np.random.default_rng(1)
    for _ in range(500):
        p = sample_augment_params(rng, (224, 224))
        top, left, h, w = p.crop
        assert h >= 0.9 * 224 and w >= 0.9 * 224
        assert top + h <= 224 and left + w <= 224
        assert -0.1 <= p.shift <= 0.1


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_augment_deterministic_shape_and_range(seed):
    x = np.random.default_rng(seed).uniform(0, 1, (1, 24, 24)).astype(np.float32)
    a, b = augment(x, (0, seed, 1)), augment(x, (0, seed, 1))
    assert a.shape == x.shape and np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_augment_batch_uses_per_sample_seeds(rng):
    batch = rng.uniform(0, 1, (3, 1, 16, 16)).astype(np.float32)
    seeds = [(0, i, 1) for i in range(3)]
    out = augment_batch(batch, seeds)
    for i in range(3):
        np.testing.assert_array_equal(out[i], augment(batch[i], seeds[i]))
