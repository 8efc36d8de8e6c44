import numpy as np
import pytest
from hypothesis import given, strategies as st

from exemseg.volume import (Volume, bilinear_resize, bundle_volume, extract_and_resize,
                            load_volume, nearest_resize, normalize_percentile,
                            resample_spacing, save_volume, unbundle_volume)

from oracles import bilinear_resize_reference, percentile_reference


def make_vol(rng, shape=(6, 5, 4), spacing=(1.0, 1.0, 2.0)):
    return Volume(rng.standard_normal(shape).astype(np.float32), spacing,
                  {"subject": "t01"})


def test_save_load_round_trip_exact(tmp_path, rng):
    vol = make_vol(rng)
    save_volume(vol, tmp_path / "vol")
    back = load_volume(tmp_path / "vol")
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == vol.spacing
    assert back.metadata == vol.metadata


def test_mask_round_trip_and_validation(tmp_path, rng):
    mask = Volume((rng.random((4, 4, 3)) > 0.5).astype(np.uint8), (1, 1, 1))
    save_volume(mask, tmp_path / "m", kind="mask")
    back = load_volume(tmp_path / "m")
    np.testing.assert_array_equal(back.data, mask.data)

    bad = Volume(np.full((2, 2, 2), 2, dtype=np.uint8), (1, 1, 1))
    with pytest.raises(ValueError, match="outside"):
        save_volume(bad, tmp_path / "bad", kind="mask")


def test_truncated_payload_reports_byte_counts(tmp_path, rng):
    vol = make_vol(rng)
    save_volume(vol, tmp_path / "vol")
    raw = (tmp_path / "vol.raw").read_bytes()
    (tmp_path / "vol.raw").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match=r"\d+ bytes.*\d+"):
        load_volume(tmp_path / "vol")


def test_missing_sidecar(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope")


def test_bundle_round_trip(rng):
    vol = make_vol(rng)
    back = unbundle_volume(bundle_volume(vol))
    assert back.data.tobytes() == vol.data.tobytes()
    assert back.spacing == vol.spacing
    with pytest.raises(ValueError, match="magic"):
        unbundle_volume(b"garbage header")


# -- resampling -----------------------------------------------------------------


def test_resample_identity(rng):
    vol = make_vol(rng)
    out = resample_spacing(vol, vol.spacing)
    np.testing.assert_array_equal(out.data, vol.data)
    assert out.shape == vol.shape


def test_resample_extent_arithmetic(rng):
    vol = Volume(rng.standard_normal((64, 32, 10)).astype(np.float32), (2.0, 2.0, 1.0))
    out = resample_spacing(vol, (1.6, 1.6, 1.0))
    assert out.shape == (80, 40, 10)   # round(extent * spacing / target)


def test_resample_mask_stays_binary(rng):
    m = (rng.random((12, 12, 6)) > 0.6).astype(np.uint8)
    out = resample_spacing(Volume(m, (1.0, 1.0, 5.0)), (0.7, 0.7, 2.5), is_mask=True)
    assert set(np.unique(out.data)) <= {0, 1}


def test_resample_constant_volume_stays_constant():
    vol = Volume(np.full((8, 8, 4), 3.25, dtype=np.float32), (1.0, 1.0, 1.0))
    out = resample_spacing(vol, (0.5, 2.0, 1.5))
    np.testing.assert_allclose(out.data, 3.25, rtol=1e-6)


def test_resample_rejects_bad_spacing(rng):
    with pytest.raises(ValueError):
        resample_spacing(make_vol(rng), (0.0, 1.0, 1.0))


# -- normalization ---------------------------------------------------------------


def test_normalize_matches_sort_oracle(rng):
    vol = make_vol(rng, shape=(9, 7, 5))
    lo = percentile_reference(vol.data, 1.0)
    hi = percentile_reference(vol.data, 99.0)
    out = normalize_percentile(vol)
    want = (np.clip(vol.data, lo, hi) - lo) / (hi - lo)
    np.testing.assert_allclose(out.data, want, rtol=1e-5, atol=1e-6)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_normalize_constant_volume_is_zeros():
    vol = Volume(np.full((4, 4, 2), 7.0, dtype=np.float32), (1, 1, 1))
    out = normalize_percentile(vol)
    np.testing.assert_array_equal(out.data, 0.0)


@given(st.integers(0, 2 ** 32 - 1))
def test_normalize_bounds_property(seed):
    r = np.random.default_rng(seed)
    vol = Volume(r.uniform(-100, 100, size=(6, 6, 3)).astype(np.float32), (1, 1, 1))
    out = normalize_percentile(vol, 5.0, 95.0).data
    assert out.min() >= 0.0 and out.max() <= 1.0 + 1e-6


# -- resizing ---------------------------------------------------------------------


def test_checkerboard_downsample_is_mid_gray():
    board = np.indices((8, 8)).sum(axis=0) % 2
    out = bilinear_resize(board.astype(np.float32), 4, 4)
    np.testing.assert_allclose(out, 0.5, atol=1e-6)


def test_bilinear_matches_reference(rng):
    img = rng.standard_normal((7, 9)).astype(np.float32)
    for oh, ow in [(14, 18), (5, 5), (7, 9), (3, 11)]:
        got = bilinear_resize(img, oh, ow)
        want = bilinear_resize_reference(img, oh, ow)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)


def test_identity_resize_returns_equal(rng):
    img = rng.standard_normal((6, 6)).astype(np.float32)
    np.testing.assert_array_equal(bilinear_resize(img, 6, 6), img)


def test_nearest_resize_preserves_values(rng):
    img = (rng.random((10, 10)) > 0.5).astype(np.uint8)
    out = nearest_resize(img, 25, 25)
    assert set(np.unique(out)) <= set(np.unique(img))
    back = nearest_resize(out, 10, 10)
    np.testing.assert_array_equal(back, img)


def test_extract_and_resize_bounds(rng):
    vol = make_vol(rng)
    out = extract_and_resize(vol, 1, 16)
    assert out.shape == (16, 16)
    with pytest.raises(IndexError, match="outside"):
        extract_and_resize(vol, 99, 16)
