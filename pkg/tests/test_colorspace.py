import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semcolor.colorspace import (
    ImageLab,
    extract_gray,
    gray_from_lightness,
    lab_to_rgb,
    luminance_lock,
    read_png,
    rgb_to_lab,
    write_png,
)


def _reference_lab(r, g, b):
    """Textbook sRGB -> XYZ -> Lab for one pixel (D65, Xn=0.95047, Zn=1.08883)."""

    def lin(c):
        c = c / 255.0
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    rl, gl, bl = lin(r), lin(g), lin(b)
    x = 0.4124564 * rl + 0.3575761 * gl + 0.1804375 * bl
    y = 0.2126729 * rl + 0.7151522 * gl + 0.0721750 * bl
    z = 0.0193339 * rl + 0.1191920 * gl + 0.9503041 * bl

    def f(t):
        return t ** (1 / 3) if t > 216 / 24389 else (24389 / 27 * t + 16) / 116

    fx, fy, fz = f(x / 0.95047), f(y / 1.0), f(z / 1.08883)
    return 116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)


def uniform(rgb, size=4):
    return np.full((size, size, 3), rgb, dtype=np.uint8)


def test_white_and_black():
    white = rgb_to_lab(uniform((255, 255, 255)))
    np.testing.assert_allclose(white.L, 100, atol=1e-3)
    np.testing.assert_allclose(white.a, 0, atol=1e-3)
    np.testing.assert_allclose(white.b, 0, atol=1e-3)
    black = rgb_to_lab(uniform((0, 0, 0)))
    for ch in (black.L, black.a, black.b):
        np.testing.assert_allclose(ch, 0, atol=1e-3)


def test_mid_gray_against_reference():
    lab = rgb_to_lab(uniform((128, 128, 128)))
    L_ref, _, _ = _reference_lab(128, 128, 128)
    np.testing.assert_allclose(lab.a, 0, atol=0.01)
    np.testing.assert_allclose(lab.b, 0, atol=0.01)
    np.testing.assert_allclose(lab.L, L_ref, atol=0.5)


@pytest.mark.parametrize("rgb", [(255, 0, 0), (0, 255, 0), (0, 0, 255), (12, 200, 90), (250, 250, 3)])
def test_colors_against_reference(rgb):
    lab = rgb_to_lab(uniform(rgb, 1))
    ref = _reference_lab(*rgb)
    np.testing.assert_allclose([lab.L[0, 0], lab.a[0, 0], lab.b[0, 0]], ref, atol=0.05)


def test_roundtrip_on_17_cube_grid():
    levels = np.linspace(0, 255, 17).round().astype(np.uint8)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), axis=-1).reshape(17 * 17, 17, 3)
    back = lab_to_rgb(rgb_to_lab(grid))
    assert np.abs(back.astype(int) - grid.astype(int)).max() <= 2


def test_lab_white_and_out_of_gamut():
    one = np.ones((2, 2))
    assert (lab_to_rgb(ImageLab(100 * one, 0 * one, 0 * one)) == 255).all()
    out = lab_to_rgb(ImageLab(50 * one, 200 * one, 200 * one))
    assert out.dtype == np.uint8 and out.min() >= 0 and out.max() <= 255


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (5, 6, 3)))
def test_roundtrip_property(img):
    assert np.abs(lab_to_rgb(rgb_to_lab(img)).astype(int) - img.astype(int)).max() <= 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 255))
def test_neutral_axis(v):
    lab = rgb_to_lab(uniform((v, v, v), 1))
    assert abs(lab.a[0, 0]) <= 1.0 and abs(lab.b[0, 0]) <= 1.0


def test_extract_gray(rng):
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    g = extract_gray(img)
    rep = g.rgb_replicated
    assert (rep[..., 0] == rep[..., 1]).all() and (rep[..., 1] == rep[..., 2]).all()
    np.testing.assert_allclose(g.L, rgb_to_lab(img).L)
    lab = rgb_to_lab(rep)
    assert np.abs(lab.a).max() <= 1.0 and np.abs(lab.b).max() <= 1.0
    assert (extract_gray(uniform((255, 255, 255))).rgb_replicated == 255).all()


def test_luminance_lock_identity_roundtrip(rng):
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    out = luminance_lock(img, extract_gray(img))
    assert np.abs(out.astype(int) - img.astype(int)).max() <= 3


def test_luminance_lock_black_source(rng):
    img = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    out = luminance_lock(img, extract_gray(uniform((0, 0, 0), 8)))
    assert rgb_to_lab(out).L.max() <= 1.0


def test_luminance_lock_matches_source_lightness(rng):
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    src = gray_from_lightness(rng.uniform(0, 100, (16, 16)))
    out = luminance_lock(img, src)
    assert np.abs(rgb_to_lab(out).L - src.L).max() <= 1.5


def test_luminance_lock_keeps_hue_when_fitting_gamut(rng):
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    src = gray_from_lightness(rng.uniform(20, 80, (16, 16)))
    before, after = rgb_to_lab(img), rgb_to_lab(luminance_lock(img, src))
    strong = np.hypot(after.a, after.b) > 10
    assert strong.sum() > 20
    cos = (before.a * after.a + before.b * after.b) / (np.hypot(before.a, before.b) * np.hypot(after.a, after.b))
    assert cos[strong].min() >= np.cos(np.radians(10))
    assert (np.hypot(after.a, after.b) <= np.hypot(before.a, before.b) + 2.0).all()


def test_luminance_lock_preserves_chroma_in_gamut(rng):
    img = rng.integers(60, 200, (16, 16, 3), dtype=np.uint8)
    src = extract_gray(np.clip(img.astype(int) + 10, 0, 255).astype(np.uint8))
    out = luminance_lock(img, src)
    a0, b0 = rgb_to_lab(img).a, rgb_to_lab(img).b
    lab = rgb_to_lab(out)
    assert np.abs(lab.a - a0).max() <= 2.5 and np.abs(lab.b - b0).max() <= 2.5


def test_luminance_lock_shape_mismatch():
    with pytest.raises(ValueError):
        luminance_lock(uniform((1, 2, 3), 4), extract_gray(uniform((1, 2, 3), 5)))


def test_png_roundtrip(tmp_path, rng):
    img = rng.integers(0, 256, (7, 9, 3), dtype=np.uint8)
    write_png(tmp_path / "x.png", img)
    assert (read_png(tmp_path / "x.png") == img).all()


def test_reference_oracle_self_consistency():
    L, a, b = _reference_lab(255, 255, 255)
    assert math.isclose(L, 100, abs_tol=1e-3) and abs(a) < 0.01 and abs(b) < 0.01
