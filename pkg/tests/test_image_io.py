import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from swiftreg.image_io import (Image, PyramidSpec, build_pyramid, convert_depth, downscale,
                               load_image, normalize_contrast, read_pgm, read_swr, save_image,
                               write_pgm, write_swr)


# ---------------------------------------------------------------- Image

def test_image_rejects_non_finite():
    with pytest.raises(ValueError):
        Image(np.array([[0.0, np.nan]]))


def test_image_rejects_empty():
    with pytest.raises(ValueError):
        Image(np.zeros((0, 3)))


def test_image_pixels_read_only():
    img = Image(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        img.pixels[0, 0] = 1.0


def test_pyramid_spec_validation():
    with pytest.raises(ValueError):
        PyramidSpec(())
    with pytest.raises(ValueError):
        PyramidSpec((4,))
    assert PyramidSpec((2, 3)).scales() == [1, 2, 6]


def test_pyramid_spec_min_dim():
    with pytest.raises(ValueError):
        PyramidSpec((2, 2)).check_dims(40, 40)
    PyramidSpec((2, 2)).check_dims(64, 64)


# --------------------------------------------------------- convert_depth

def test_convert_depth_constant_is_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        convert_depth(np.full((10, 10), 1234, dtype=np.uint16), 0.5, 99.5)


def test_convert_depth_ramp_endpoints():
    raw = np.arange(65536, dtype=np.uint16).reshape(256, 256)
    out = convert_depth(raw, 0, 100).pixels.ravel()
    assert out[0] == 0.0
    assert out[65535] == 1.0
    assert out[32768] == pytest.approx(0.50001, abs=1e-4)


def test_convert_depth_bad_clips():
    raw = np.arange(100).reshape(10, 10)
    for lo, hi in [(5, 5), (10, 5), (-1, 50), (0, 101)]:
        with pytest.raises(ValueError):
            convert_depth(raw, lo, hi)
    with pytest.raises(ValueError):
        convert_depth(np.zeros((0, 0)), 0, 100)


def _percentile_oracle(values, p_lo, p_hi):
    s = sorted(values.tolist())
    n = len(s)
    k_lo = math.ceil(p_lo / 100 * n)          # ranks saturated at the bottom
    k_hi = math.ceil((100 - p_hi) / 100 * n)  # ranks saturated at the top
    lo = s[max(k_lo - 1, 0)]
    hi = s[n - k_hi] if k_hi > 0 else s[-1]
    return lo, hi


def test_convert_depth_matches_sorted_oracle():
    rng = np.random.default_rng(7)
    raw = rng.choice(65536, size=1000, replace=False).reshape(25, 40).astype(np.uint16)
    out = convert_depth(raw, 2, 98).pixels
    lo, hi = _percentile_oracle(raw.ravel(), 2, 98)
    expect = np.array([min(max((v - lo) / (hi - lo), 0.0), 1.0) for v in raw.ravel().astype(float)])
    np.testing.assert_allclose(out.ravel(), expect, rtol=0, atol=1e-12)
    # distinct values: exactly ceil(2% of 1000) = 20 saturated at each end
    assert (out == 0).sum() == 20 and (out == 1).sum() == 20


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint16, st.tuples(st.integers(2, 20), st.integers(2, 20))),
       st.floats(0, 49), st.floats(51, 100))
def test_convert_depth_monotone(raw, lo, hi):
    try:
        out = convert_depth(raw, lo, hi).pixels.ravel()
    except ValueError:
        return
    order = np.argsort(raw.ravel(), kind="stable")
    assert np.all(np.diff(out[order]) >= 0)
    assert out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------- normalize_contrast

def test_normalize_identity():
    rng = np.random.default_rng(1)
    p = rng.standard_normal((32, 32))
    p = (p - p.mean()) / p.std() * 0.1 + 0.5
    out = normalize_contrast(Image(p), 0.5, 0.1)
    np.testing.assert_allclose(out.pixels, np.clip(p, 0, 1), atol=1e-12)


def test_normalize_closed_form():
    rng = np.random.default_rng(2)
    p = rng.standard_normal((32, 32))
    p = (p - p.mean()) / p.std() * 0.05 + 0.2
    out = normalize_contrast(Image(p), 0.5, 0.1)
    np.testing.assert_allclose(out.pixels, np.clip((p - 0.2) * 2 + 0.5, 0, 1), atol=1e-9)


def test_normalize_statistics():
    rng = np.random.default_rng(3)
    p = rng.uniform(0.3, 0.6, (64, 64))
    out = normalize_contrast(Image(p), 0.5, 0.15).pixels
    # nothing clamps for this input, so the pre-clamp statistics are visible
    assert out.min() > 0 and out.max() < 1
    assert abs(out.mean() - 0.5) < 1e-6 and abs(out.std() - 0.15) < 1e-6


def test_normalize_rejects_flat():
    with pytest.raises(ValueError):
        normalize_contrast(Image(np.full((4, 4), 0.3)), 0.5, 0.1)
    with pytest.raises(ValueError):
        normalize_contrast(Image(np.eye(4)), 0.5, 0.0)


# -------------------------------------------------------------- downscale

def test_downscale_constant_2x2():
    out = downscale(Image(np.full((2, 2), 0.7)), 2)
    assert out.shape == (1, 1) and out.pixels[0, 0] == 0.7


def test_downscale_checkerboard():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    np.testing.assert_array_equal(downscale(Image(board), 2).pixels, np.full((2, 2), 0.5))


def test_downscale_block_mean_oracle():
    rng = np.random.default_rng(4)
    p = rng.random((9, 9))
    out = downscale(Image(p), 3).pixels
    expect = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            expect[i, j] = sum(p[3 * i + a, 3 * j + b] for a in range(3) for b in range(3)) / 9
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_downscale_drops_remainder_and_meta():
    img = Image(np.arange(7 * 11, dtype=float).reshape(7, 11), section_index=4)
    out = downscale(img, 2)
    assert out.shape == (3, 5)
    assert (out.scale, out.level, out.section_index) == (2, 1, 4)
    with pytest.raises(ValueError):
        downscale(Image(np.zeros((1, 5))), 2)
    with pytest.raises(ValueError):
        downscale(img, 4)


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.integers(1, 6), st.integers(1, 6), st.sampled_from([2, 3, 5]))
def test_downscale_constant_exact(value, h, w, f):
    out = downscale(Image(np.full((h * f, w * f), value)), f)
    assert np.all(out.pixels == value)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(0, 1)), st.sampled_from([2, 3, 5]))
def test_downscale_preserves_mean(cells, f):
    p = np.kron(cells, np.ones((f, f))) + 0.01 * np.arange(cells.size * f * f).reshape(cells.shape[0] * f, -1) / cells.size
    out = downscale(Image(p), f)
    assert out.pixels.mean() == pytest.approx(p.mean(), abs=1e-12)


def test_downscale_coverage_all():
    cov = np.ones((4, 4), bool)
    cov[0, 0] = False
    out = downscale(Image(np.zeros((4, 4)), coverage=cov), 2)
    np.testing.assert_array_equal(out.coverage, [[False, True], [True, True]])


# ---------------------------------------------------------- build_pyramid

def test_pyramid_dims_64():
    levels = build_pyramid(Image(np.zeros((64, 64))), PyramidSpec((2, 2)))
    assert [lv.shape for lv in levels] == [(64, 64), (32, 32), (16, 16)]
    assert [lv.scale for lv in levels] == [1, 2, 4]


def test_pyramid_empty_spec():
    with pytest.raises(ValueError):
        build_pyramid(Image(np.zeros((8, 8))), ())


def test_pyramid_chain_60():
    rng = np.random.default_rng(5)
    img = Image(rng.random((60, 60)))
    levels = build_pyramid(img, PyramidSpec((2, 3, 5)))
    assert [lv.shape for lv in levels] == [(60, 60), (30, 30), (10, 10), (2, 2)]
    ref = img
    for lv, f in zip(levels[1:], (2, 3, 5)):
        ref = downscale(ref, f)
        np.testing.assert_array_equal(lv.pixels, ref.pixels)
    assert levels[0].pixels is img.pixels or np.array_equal(levels[0].pixels, img.pixels)


def test_pyramid_min_dim_enforced():
    with pytest.raises(ValueError):
        build_pyramid(Image(np.zeros((60, 60))), PyramidSpec((2, 3, 5)), min_dim=16)


def test_pyramid_deterministic():
    rng = np.random.default_rng(6)
    img = Image(rng.random((48, 48)))
    a = build_pyramid(img, PyramidSpec((2, 3)))
    b = build_pyramid(img, PyramidSpec((2, 3)))
    for x, y in zip(a, b):
        assert x.pixels.tobytes() == y.pixels.tobytes()


# ------------------------------------------------------------------ files

def test_pgm_roundtrip_8bit(tmp_path):
    p = np.array([[0.0, 0.5, 1.0], [0.25, 0.75, 2 / 255]])
    write_pgm(tmp_path / "a.pgm", p)
    raw, maxval = read_pgm(tmp_path / "a.pgm")
    assert maxval == 255
    # round half up: 0.5*255 = 127.5 -> 128
    np.testing.assert_array_equal(raw, [[0, 128, 255], [64, 191, 2]])


def test_pgm_16bit_big_endian(tmp_path):
    vals = np.array([[0, 1, 256], [65535, 4660, 2]], dtype=">u2")
    (tmp_path / "b.pgm").write_bytes(b"P5\n# comment\n3 2\n65535\n" + vals.tobytes())
    raw, maxval = read_pgm(tmp_path / "b.pgm")
    assert maxval == 65535
    np.testing.assert_array_equal(raw, vals.astype(np.uint16))
    img = load_image(tmp_path / "b.pgm")
    assert img.pixels[1, 0] == 1.0


def test_pgm_bad_magic(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(tmp_path / "c.pgm")


def test_swr_roundtrip(tmp_path):
    rng = np.random.default_rng(8)
    p = rng.random((5, 7)).astype(np.float32).astype(np.float64)
    write_swr(tmp_path / "a.swr", p)
    buf = (tmp_path / "a.swr").read_bytes()
    assert buf[:4] == b"SWR1" and buf[12:16] == b"\0\0\0\0" and len(buf) == 16 + 4 * 35
    assert int.from_bytes(buf[4:8], "little") == 7 and int.from_bytes(buf[8:12], "little") == 5
    np.testing.assert_array_equal(read_swr(tmp_path / "a.swr"), p)
    save_image(tmp_path / "b.swr", p)
    np.testing.assert_array_equal(load_image(tmp_path / "b.swr").pixels, p)
