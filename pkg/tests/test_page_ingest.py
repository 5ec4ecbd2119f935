from fractions import Fraction
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from writer_retrieval.errors import BadMagic, ImageTooSmall, MaxvalUnsupported, NoContour, Truncated
from writer_retrieval.numerics import make_rng
from writer_retrieval.page_ingest import (
    GrayImage, contour_pixels, extract_patches, load_pgm, otsu_threshold, read_ptch, write_pgm, write_ptch,
)


def blank(w, h, value=255):
    return GrayImage(w, h, np.full((h, w), value, dtype=np.uint8))


def line_drawing(w=120, h=90):
    """Strokes kept at least 16 px away from every border."""
    img = blank(w, h)
    px = img.pixels
    px[40, 20:100] = 0
    px[20:70, 60] = 0
    for t in range(30):
        px[25 + t, 25 + t] = 0
    px[50:55, 80:90] = 30
    return img


def brute_otsu(img):
    """Exhaustive search of between-class variance with exact fractions."""
    px = img.pixels.ravel().tolist()
    total = len(px)
    best_t, best = 0, Fraction(-1)
    for t in range(256):
        lo = [v for v in px if v < t]
        hi = [v for v in px if v >= t]
        if not lo or not hi:
            var = Fraction(0)
        else:
            w0, w1 = Fraction(len(lo), total), Fraction(len(hi), total)
            mu0, mu1 = Fraction(sum(lo), len(lo)), Fraction(sum(hi), len(hi))
            var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best:
            best_t, best = t, var
    return best_t


def brute_contour(img, t):
    h, w = img.height, img.width
    out = []
    for y in range(h):
        for x in range(w):
            if img.pixels[y, x] >= t:
                continue
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dx == dy == 0:
                        continue
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w) or img.pixels[yy, xx] >= t:
                        out.append((x, y))
                        break
                else:
                    continue
                break
    return out


def test_minimal_ascii_pgm():
    img = load_pgm(b"P2 2 1 255 0 255")
    assert (img.width, img.height) == (2, 1)
    assert img.pixels.tolist() == [[0, 255]]


def test_comment_invariance():
    raster = bytes(range(12))
    plain = load_pgm(b"P5\n4 3\n255\n" + raster)
    commented = load_pgm(b"P5\n# scanned page\n4 3\n# another\n255\n" + raster)
    assert np.array_equal(plain.pixels, commented.pixels)


def test_pgm_round_trip():
    px = make_rng(0).integers(0, 256, (17, 23), dtype=np.uint8)
    img = GrayImage(23, 17, px)
    again = load_pgm(write_pgm(img))
    assert np.array_equal(again.pixels, px)
    assert write_pgm(again) == write_pgm(img)


def test_pgm_errors():
    with pytest.raises(BadMagic):
        load_pgm(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(Truncated):
        load_pgm(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(Truncated):
        load_pgm(b"P5\n4")
    with pytest.raises(MaxvalUnsupported):
        load_pgm(b"P5\n1 1\n65535\n\x00\x00")


def test_otsu_uniform():
    assert otsu_threshold(blank(8, 8, 128)) == 0


def test_otsu_bimodal():
    px = np.full((4, 8), 10, dtype=np.uint8)
    px[:, 4:] = 200
    t = otsu_threshold(GrayImage(8, 4, px))
    assert 10 < t <= 200
    # every threshold separating the modes has equal variance; lowest wins
    assert t == 11


@pytest.mark.parametrize("seed", range(12))
def test_otsu_matches_brute_force(seed):
    rng = make_rng(seed)
    dark = rng.normal(60, 20, 80)
    light = rng.normal(190, 25, 120)
    px = np.clip(np.concatenate([dark, light]), 0, 255).astype(np.uint8).reshape(10, 20)
    img = GrayImage(20, 10, px)
    assert otsu_threshold(img) == brute_otsu(img)


def test_contour_blank(backend):
    assert contour_pixels(blank(20, 20), 128) == []


def test_contour_single_pixel(backend):
    img = blank(12, 12)
    img.pixels[5, 5] = 0
    assert contour_pixels(img, 128) == [(5, 5)]


def test_contour_square_perimeter(backend):
    img = blank(30, 30)
    img.pixels[10:20, 10:20] = 0
    pts = contour_pixels(img, 128)
    assert len(pts) == 36
    assert all(x in (10, 19) or y in (10, 19) for x, y in pts)


def test_contour_image_border_counts_as_background(backend):
    img = blank(5, 5, 0)
    pts = contour_pixels(img, 128)
    assert len(pts) == 16 and (2, 2) not in pts


@pytest.mark.parametrize("seed", range(8))
def test_contour_matches_predicate(backend, seed):
    rng = make_rng(seed)
    px = np.where(rng.random((19, 26)) < 0.4, 0, 255).astype(np.uint8)
    img = GrayImage(26, 19, px)
    assert contour_pixels(img, 128) == brute_contour(img, 128)


def test_extract_blank_page():
    with pytest.raises(NoContour):
        extract_patches(blank(64, 64))


def test_extract_too_small():
    with pytest.raises(ImageTooSmall):
        extract_patches(blank(31, 64))


def test_extract_single_pixel():
    img = blank(200, 200)
    img.pixels[100, 100] = 0
    ps = extract_patches(img, stride=1, threshold=128)
    assert ps.centers == [(100, 100)]
    assert ps.patches.shape == (1, 32, 32)
    assert ps.patches[0, 16, 16] == 0.0
    assert np.sum(ps.patches[0] == 0.0) == 1


def test_extract_window_bounds():
    img = blank(32, 32)
    img.pixels[16, 16] = 0
    img.pixels[15, 15] = 0
    ps = extract_patches(img, stride=1, threshold=128)
    # (15,15) needs column -1; (16,16) spans exactly 0..31
    assert ps.centers == [(16, 16)]


def test_stride_subset():
    img = line_drawing()
    t = otsu_threshold(img)
    full = extract_patches(img, stride=1, threshold=t)
    thin = extract_patches(img, stride=3, threshold=t)
    assert len(thin.centers) == math.ceil(len(full.centers) / 3)
    assert set(thin.centers) <= set(full.centers)
    assert thin.centers == full.centers[::3]


def test_centers_are_contour_and_patches_match():
    img = line_drawing()
    ps = extract_patches(img, stride=2)
    t = otsu_threshold(img)
    contour = set(brute_contour(img, t))
    scaled = img.pixels / 255.0
    for (x, y), patch in zip(ps.centers, ps.patches):
        assert (x, y) in contour
        assert np.array_equal(patch, scaled[y - 16:y + 16, x - 16:x + 16])
    assert ps.patches.min() >= 0 and ps.patches.max() <= 1


def test_out_of_bounds_centers_dropped():
    img = blank(40, 40)
    img.pixels[2, 2:38] = 0
    img.pixels[20, 5:35] = 0
    ps = extract_patches(img, stride=1, threshold=128)
    assert ps.centers == [(x, 20) for x in range(16, 25)]


def test_subsampling_deterministic():
    img = line_drawing()
    a = extract_patches(img, stride=1, max_patches=10, rng=make_rng(3))
    b = extract_patches(img, stride=1, max_patches=10, rng=make_rng(3))
    full = extract_patches(img, stride=1)
    assert a.centers == b.centers and len(a.centers) == 10
    assert np.array_equal(a.patches, b.patches)
    assert set(a.centers) <= set(full.centers)
    assert a.centers == sorted(a.centers, key=lambda c: (c[1], c[0]))


def test_invert_detects_light_ink():
    img = line_drawing()
    dark = GrayImage(img.width, img.height, 255 - img.pixels)
    a = extract_patches(img, stride=2)
    b = extract_patches(dark, stride=2, invert=True)
    assert a.centers == b.centers
    np.testing.assert_allclose(b.patches, 1.0 - a.patches, atol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_patch_shape_and_range(seed):
    rng = make_rng(seed)
    px = np.where(rng.random((40, 45)) < 0.1, 0, 255).astype(np.uint8)
    img = GrayImage(45, 40, px)
    try:
        ps = extract_patches(img, stride=1, threshold=128)
    except NoContour:
        return
    assert ps.patches.shape[1:] == (32, 32)
    assert len(ps.patches) == len(ps.centers)


def test_ptch_round_trip(tmp_path):
    patches = make_rng(1).random((5, 32, 32))
    write_ptch(tmp_path / "a.ptch", patches)
    back = read_ptch(tmp_path / "a.ptch")
    np.testing.assert_array_equal(back, patches.astype(np.float32))
    raw = (tmp_path / "a.ptch").read_bytes()
    assert raw.startswith(b"PTCH1\n5 32 32\n")


def test_ptch_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE\n")
    with pytest.raises(BadMagic):
        read_ptch(tmp_path / "bad")
    (tmp_path / "short").write_bytes(b"PTCH1\n2 32 32\n" + b"\x00" * 100)
    with pytest.raises(Truncated):
        read_ptch(tmp_path / "short")
