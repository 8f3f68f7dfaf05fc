import io
import math
import os

import numpy as np
import pytest
from PIL import Image

from ctscan_cnn.engine.data import (
    PreprocessOptions,
    Sample,
    batches,
    decode_image,
    load_samples,
    otsu_mask,
    preprocess,
    resize_bilinear,
    scan_dataset,
    smooth_mask,
    split_holdout,
    to_grayscale,
)
from ctscan_cnn.engine.rng import make_rng
from ctscan_cnn.errors import ConfigError, DataError, DecodeError, IngestionError

from conftest import synthetic


def _encode(arr, fmt="PNG", mode=None):
    buf = io.BytesIO()
    img = Image.fromarray(arr) if mode is None else Image.fromarray(arr).convert(mode)
    img.save(buf, format=fmt)
    return buf.getvalue()


def _samples(n):
    return [Sample(f"s{i:04d}", np.zeros((1, 2, 2), np.float32), i % 4) for i in range(n)]


# ── Scanning ─────────────────────────────────────────────────────────────

def test_scan_sorted_with_labels(dataset_root):
    entries = scan_dataset(dataset_root)
    assert len(entries) == 40
    assert [rel for rel, _ in entries] == sorted(rel for rel, _ in entries)
    labels = dict(entries)
    assert labels["adenocarcinoma/adenocarcinoma_0000.png"] == 0
    assert labels["normal/normal_0009.png"] == 3
    assert np.bincount([label for _, label in entries]).tolist() == [10, 10, 10, 10]


def test_scan_accepts_nested_long_directory_names(tmp_path):
    img = _encode(np.zeros((4, 4), np.uint8))
    target = tmp_path / "train" / "large.cell.carcinoma_left.hilum_T2_N2_M0_IIIa"
    target.mkdir(parents=True)
    (target / "a.png").write_bytes(img)
    (target / "notes.txt").write_text("ignored")
    assert scan_dataset(tmp_path) == [("train/large.cell.carcinoma_left.hilum_T2_N2_M0_IIIa/a.png", 1)]


def test_scan_errors(tmp_path):
    with pytest.raises(DataError):
        scan_dataset(tmp_path / "missing")
    (tmp_path / "normal").mkdir()
    with pytest.raises(DataError):
        scan_dataset(tmp_path)
    (tmp_path / "mystery").mkdir()
    (tmp_path / "mystery" / "x.png").write_bytes(_encode(np.zeros((4, 4), np.uint8)))
    with pytest.raises(IngestionError, match="mystery"):
        scan_dataset(tmp_path)


# ── Decoding ─────────────────────────────────────────────────────────────

def test_decode_grayscale_and_rgb():
    gray = np.array([[0, 255], [128, 64]], np.uint8)
    out = decode_image(_encode(gray))
    assert out.shape == (1, 2, 2) and out.dtype == np.float32
    assert out[0, 0, 1] == 1.0 and out[0, 0, 0] == 0.0

    rgb = np.zeros((3, 5, 3), np.uint8)
    rgb[..., 0] = 255
    out = decode_image(_encode(rgb))
    assert out.shape == (3, 3, 5)
    assert np.all(out[0] == 1.0) and not out[1:].any()


def test_decode_jpeg_and_palette():
    jpeg = decode_image(_encode(np.full((8, 8, 3), 200, np.uint8), fmt="JPEG"))
    assert jpeg.shape == (3, 8, 8)
    assert np.allclose(jpeg, 200 / 255, atol=0.02)
    pal = decode_image(_encode(np.full((4, 4, 3), 50, np.uint8), mode="P"))
    assert pal.shape == (3, 4, 4)


def test_decode_rejects_garbage_and_16bit():
    with pytest.raises(DecodeError, match="bad.png"):
        decode_image(b"not an image", "bad.png")
    buf = io.BytesIO()
    Image.fromarray(np.zeros((4, 4), np.uint16)).save(buf, format="PNG")
    with pytest.raises(DecodeError):
        decode_image(buf.getvalue())
    buf = io.BytesIO()
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(buf, format="BMP")
    with pytest.raises(DecodeError, match="BMP"):
        decode_image(buf.getvalue())


# ── Preprocessing ────────────────────────────────────────────────────────

def test_grayscale_weights():
    img = np.zeros((3, 1, 1))
    img[:, 0, 0] = [1.0, 1.0, 1.0]
    assert to_grayscale(img)[0, 0, 0] == pytest.approx(1.0)
    img[:, 0, 0] = [1.0, 0.0, 0.0]
    assert to_grayscale(img)[0, 0, 0] == pytest.approx(0.299)


def test_resize_identity_and_constant():
    img = np.random.default_rng(0).random((1, 64, 64))
    np.testing.assert_array_equal(resize_bilinear(img, 64, 64), img)
    const = np.full((1, 512, 512), 0.3)
    np.testing.assert_allclose(resize_bilinear(const, 64, 64), 0.3, atol=1e-12)


def test_resize_halves_by_averaging():
    """Half-pixel centres make a 2x downscale the mean of each 2x2 block."""
    img = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
    out = resize_bilinear(img, 2, 2)
    expected = img[0].reshape(2, 2, 2, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(out[0], expected)


def test_preprocess_default_shape_and_range():
    rgb = np.random.default_rng(1).random((3, 512, 512)).astype(np.float32)
    out = preprocess(rgb)
    assert out.shape == (1, 64, 64) and out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0
    out3 = preprocess(rgb[:1], PreprocessOptions(grayscale=False, size=32))
    assert out3.shape == (3, 32, 32)


def test_otsu_mask_bimodal_and_constant():
    img = np.zeros((1, 8, 8))
    img[0, 2:6, 2:6] = 0.9
    mask = otsu_mask(img)
    assert mask.sum() == 16 and mask[3, 3]
    assert otsu_mask(np.full((1, 4, 4), 0.5)).all()


def test_smooth_mask_removes_speck_and_fills_hole():
    mask = np.zeros((12, 12), bool)
    mask[0, 11] = True                  # isolated speck
    mask[3:10, 3:10] = True
    mask[6, 6] = False                  # pinhole
    out = smooth_mask(mask, 3)
    assert not out[0, 11]
    assert out[6, 6]


def test_preprocess_segment_zeroes_background():
    img = np.full((1, 16, 16), 0.1)
    img[0, 4:12, 4:12] = 0.8
    out = preprocess(img, PreprocessOptions(size=16, segment=True, morphology=True))
    assert out[0, 0, 0] == 0.0
    assert out[0, 8, 8] == pytest.approx(0.8, abs=1e-6)


def test_preprocess_denoise_removes_salt():
    img = np.full((1, 9, 9), 0.2)
    img[0, 4, 4] = 1.0
    out = preprocess(img, PreprocessOptions(size=9, denoise=True))
    assert out[0, 4, 4] == pytest.approx(0.2, abs=1e-6)


# ── Loading ──────────────────────────────────────────────────────────────

def test_load_samples_parallel_matches_serial(dataset_root):
    entries = scan_dataset(dataset_root)
    opts = PreprocessOptions(size=16)
    serial = load_samples(dataset_root, entries, opts, workers=1)
    parallel = load_samples(dataset_root, entries, opts, workers=4)
    assert [s.id for s in serial] == [rel for rel, _ in entries]
    assert [s.id for s in parallel] == [s.id for s in serial]
    assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(serial, parallel))
    assert serial[0].pixels.shape == (1, 16, 16)


def test_load_samples_cache_roundtrip(dataset_root, tmp_path):
    entries = scan_dataset(dataset_root)
    opts = PreprocessOptions(size=16)
    cache = tmp_path / "cache"
    first = load_samples(dataset_root, entries, opts, cache_dir=cache)
    assert len(list(cache.glob("samples_*.npz"))) == 1
    second = load_samples(dataset_root, entries, opts, cache_dir=cache)
    assert [s.id for s in second] == [s.id for s in first]
    assert all(np.array_equal(a.pixels, b.pixels) and a.label == b.label for a, b in zip(first, second))
    load_samples(dataset_root, entries, PreprocessOptions(size=8), cache_dir=cache)
    assert len(list(cache.glob("samples_*.npz"))) == 2


def test_load_samples_reports_undecodable_file(tmp_path):
    (tmp_path / "normal").mkdir()
    (tmp_path / "normal" / "broken.png").write_bytes(b"\x89PNG garbage")
    with pytest.raises(DecodeError, match="broken.png"):
        load_samples(tmp_path, scan_dataset(tmp_path))


def test_rgb_jpeg_dataset_loads_as_grayscale(tmp_path):
    synthetic.write_dataset(tmp_path, per_class=1, size=20, rgb=True, jpeg=True)
    samples = load_samples(tmp_path, scan_dataset(tmp_path), PreprocessOptions(size=10))
    assert len(samples) == 4 and samples[0].pixels.shape == (1, 10, 10)


# ── Split / batches ──────────────────────────────────────────────────────

def test_split_sizes():
    assert split_holdout(_samples(967)).sizes() == (676, 145, 146)
    assert split_holdout(_samples(100)).sizes() == (70, 15, 15)
    assert split_holdout(_samples(3)).sizes() == (2, 0, 1)


def test_split_is_a_seeded_partition():
    samples = _samples(50)
    a = split_holdout(samples, seed=1000)
    b = split_holdout(samples, seed=1000)
    c = split_holdout(samples, seed=1001)
    ids = lambda part: [s.id for s in part]
    assert ids(a.train) == ids(b.train) and ids(a.test) == ids(b.test)
    assert ids(a.train) != ids(c.train)
    every = ids(a.train) + ids(a.validation) + ids(a.test)
    assert sorted(every) == sorted(ids(samples))


def test_split_errors():
    with pytest.raises(ConfigError):
        split_holdout(_samples(10), ratios=(0.5, 0.3, 0.3))
    with pytest.raises(DataError):
        split_holdout([])


def test_batches_short_last_and_shuffle():
    part = _samples(27)
    sizes = [x.shape[0] for x, _ in batches(part, 13)]
    assert sizes == [13, 13, 1]
    x, onehot = next(batches(part, 13))
    assert x.dtype == np.float32 and onehot.shape == (13, 4)
    np.testing.assert_array_equal(onehot.argmax(axis=1), [s.label for s in part[:13]])

    first = [oh.argmax(axis=1).tolist() for _, oh in batches(part, 5, shuffle=True, rng=make_rng(1, "shuffle"))]
    again = [oh.argmax(axis=1).tolist() for _, oh in batches(part, 5, shuffle=True, rng=make_rng(1, "shuffle"))]
    assert first == again
    with pytest.raises(ConfigError):
        list(batches(part, 0))


def test_split_partitions_every_size_up_to_1000():
    pool = _samples(1000)
    for n in range(1, 1001):
        split = split_holdout(pool[:n], seed=1000)
        train, val, test = ({s.id for s in part} for part in (split.train, split.validation, split.test))
        assert len(train) + len(val) + len(test) == n
        assert not (train & val) and not (train & test) and not (val & test)
        assert train | val | test == {s.id for s in pool[:n]}
        assert len(train) == math.floor(n * 0.70 + 1e-9)
        assert len(val) == math.floor(n * 0.15 + 1e-9)


# ── Pipeline properties ──────────────────────────────────────────────────

def test_decode_8bit_levels():
    pixels = np.array([[0, 85], [170, 255]], np.uint8)
    out = decode_image(_encode(pixels))
    np.testing.assert_allclose(out[0], [[0.0, 1 / 3], [2 / 3, 1.0]], atol=1e-6)


def test_bilinear_two_by_two_to_one_pixel():
    img = np.array([[[0.0, 0.0], [1.0, 1.0]]])
    assert resize_bilinear(img, 1, 1)[0, 0, 0] == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("segment,morphology", [(True, True), (False, True), (True, False)])
def test_constant_image_survives_every_stage(segment, morphology):
    img = np.full((3, 100, 80), 0.4)
    opts = PreprocessOptions(size=64, grayscale=True, denoise=True, segment=segment, morphology=morphology)
    out = preprocess(img, opts)
    assert out.shape == (1, 64, 64)
    np.testing.assert_allclose(out, 0.4, atol=1e-6)


def test_preprocess_is_identity_on_conforming_input():
    img = np.random.default_rng(11).random((1, 64, 64)).astype(np.float32)
    np.testing.assert_allclose(preprocess(img), img, atol=1e-6)
    np.testing.assert_allclose(preprocess(preprocess(img)), preprocess(img), atol=1e-6)


def test_cache_misses_after_an_image_changes(dataset_root, tmp_path):
    entries = scan_dataset(dataset_root)
    opts = PreprocessOptions(size=16)
    cache = tmp_path / "cache"
    first = load_samples(dataset_root, entries, opts, cache_dir=cache)

    rel = entries[0][0]
    path = dataset_root / rel
    Image.fromarray(np.full((32, 32), 255, np.uint8)).save(path)
    st = path.stat()
    os.utime(path, ns=(st.st_atime_ns, st.st_mtime_ns + 10**9))

    second = load_samples(dataset_root, entries, opts, cache_dir=cache)
    assert len(list(cache.glob("samples_*.npz"))) == 2
    assert np.all(second[0].pixels == 1.0)
    assert not np.array_equal(first[0].pixels, second[0].pixels)
