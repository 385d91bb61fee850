import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedcaug import image_ops as io

import oracles


def square_scene(size=64, lo=0.2, hi=0.9, start=16, side=32):
    img = np.full((size, size), lo)
    img[start:start + side, start:start + side] = hi
    return img


# -- blur ---------------------------------------------------------------------

def test_blur_preserves_constant():
    img = np.full((12, 10, 3), 0.37)
    assert np.allclose(io.gaussian_blur(img, 1.5), img, atol=1e-12)


def test_blur_impulse_center_is_kernel_product():
    img = np.zeros((15, 15))
    img[7, 7] = 1.0
    out = io.gaussian_blur(img, 1.0)[:, :, 0]
    k = io.gaussian_kernel(1.0)
    assert out[7, 7] == pytest.approx(k[len(k) // 2] ** 2, abs=1e-15)
    assert np.allclose(out, out.T) and np.allclose(out, out[::-1, ::-1])


def test_blur_matches_2d_oracle(rng):
    img = rng.uniform(size=(16, 16))
    got = io.gaussian_blur(img, 1.2)[:, :, 0]
    assert np.abs(got - oracles.gaussian_blur2d(img, 1.2)).max() < 1e-6


def test_blur_semigroup(rng):
    img = np.zeros((48, 48))
    img[20:28, 14:34] = 1.0
    two = io.gaussian_blur(io.gaussian_blur(img, 1.0), 1.5)
    one = io.gaussian_blur(img, np.hypot(1.0, 1.5))
    assert np.abs(two - one).max() < 1e-3


def test_blur_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        io.gaussian_blur(np.zeros((4, 4)), 0.0)


# -- sobel --------------------------------------------------------------------

def test_sobel_constant_is_zero():
    gx, gy, mag, _ = io.sobel(np.full((6, 6), 0.4))
    assert not gx.any() and not gy.any() and not mag.any()


def test_sobel_vertical_step():
    img = np.zeros((8, 8))
    img[:, 4:] = 0.5
    gx, gy, _, _ = io.sobel(img)
    assert np.allclose(gx[:, 3], 4 * 0.5) and np.allclose(gx[:, 4], 4 * 0.5)
    assert not gx[:, :3].any() and not gx[:, 5:].any()
    assert not gy.any()


def test_sobel_matches_loop_oracle(rng):
    img = rng.uniform(size=(16, 16))
    gx, gy, mag, _ = io.sobel(img)
    ox, oy = oracles.sobel(img)
    assert np.abs(gx - ox).max() < 1e-6 and np.abs(gy - oy).max() < 1e-6
    assert np.allclose(mag, np.hypot(ox, oy))


def test_sobel_rotation_swaps_components(rng):
    img = rng.uniform(size=(10, 10))
    gx, gy, _, _ = io.sobel(img)
    rx, ry, _, _ = io.sobel(np.rot90(img))
    # counter-clockwise rotation: out[i, j] = in[j, W-1-i], so d/dj picks up the
    # old row derivative and d/di the negated old column derivative
    assert np.allclose(rx, np.rot90(gy))
    assert np.allclose(ry, np.rot90(-gx))


def test_sobel_direction_range(rng):
    _, _, _, d = io.sobel(rng.uniform(size=(9, 9)))
    assert (d > -np.pi).all() and (d <= np.pi).all()


def test_sobel_rejects_rgb():
    with pytest.raises(ValueError):
        io.sobel(np.zeros((4, 4, 3)))


# -- canny --------------------------------------------------------------------

def test_canny_constant_image_is_empty():
    assert not io.canny(np.full((20, 20, 3), 0.6)).any()


def test_canny_square_gives_thin_connected_ring():
    e = io.canny(square_scene())
    ys, xs = np.nonzero(e)
    inner_dist = np.minimum.reduce([np.abs(ys - 16), np.abs(ys - 47), np.abs(xs - 16), np.abs(xs - 47)])
    assert (inner_dist <= 1).all()
    from scipy import ndimage

    _, count = ndimage.label(e, structure=io.EIGHT)
    assert count == 1
    # one pixel thick along each straight side
    for r in range(20, 44):
        assert e[r].sum() == 2
        assert e[:, r].sum() == 2


def test_canny_invariant_to_brightness_shift():
    a = square_scene(lo=0.1, hi=0.6)
    assert np.array_equal(io.canny(a), io.canny(a + 0.3))


def test_canny_threshold_ordering():
    with pytest.raises(ValueError, match="low"):
        io.canny(np.zeros((8, 8)), low=0.5, high=0.3)
    with pytest.raises(ValueError):
        io.canny(np.zeros((8, 8)), low=0.0, high=0.3)


def test_hysteresis_keeps_weak_pixels_connected_to_strong():
    nms = np.zeros((5, 7))
    nms[2, 1] = 0.9  # strong
    nms[2, 2:4] = 0.2  # weak chain attached to it
    nms[3, 4] = 0.2  # diagonal neighbour: 8-connected
    nms[0, 6] = 0.2  # isolated weak
    out = io.hysteresis(nms, 0.1, 0.5)
    assert out[2, 1] and out[2, 2] and out[2, 3] and out[3, 4]
    assert not out[0, 6]


def test_nms_keeps_single_pixel_of_plateau():
    mag = np.zeros((3, 6))
    mag[:, 2:4] = 1.0
    out = io.non_max_suppression(mag, np.zeros_like(mag))
    assert out[1].tolist() == [0, 0, 1, 0, 0, 0]


# -- sharpen / mask / composite -----------------------------------------------

def test_sharpen_limits_and_arithmetic(rng):
    img = rng.uniform(size=(5, 5, 3))
    edges = (rng.uniform(size=(5, 5)) > 0.5).astype(np.uint8)
    assert np.array_equal(io.sharpen(img, edges, 0.0), img)
    assert np.array_equal(io.sharpen(img, edges, 1.0), np.repeat(edges[:, :, None], 3, axis=2).astype(float))
    one = io.sharpen(np.full((1, 1), 0.5), np.ones((1, 1)), 0.3)
    assert one[0, 0, 0] == pytest.approx(0.65)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_sharpen_is_affine_in_lambda(lam, seed):
    r = np.random.default_rng(seed)
    img = r.uniform(size=(4, 4, 3))
    edges = r.integers(0, 2, size=(4, 4))
    want = (1 - lam) * io.sharpen(img, edges, 0.0) + lam * io.sharpen(img, edges, 1.0)
    assert np.allclose(io.sharpen(img, edges, lam), want, atol=1e-12)


def test_mask_apply_cases():
    img = np.full((4, 4, 3), 0.8)
    assert np.array_equal(io.mask_apply(img, np.ones((4, 4))), img)
    assert not io.mask_apply(img, np.zeros((4, 4))).any()
    checker = np.indices((4, 4)).sum(axis=0) % 2
    out = io.mask_apply(img, checker)
    assert np.all(out[checker == 1] == 0.8) and np.all(out[checker == 0] == 0.0)
    with pytest.raises(ValueError, match="mask shape"):
        io.mask_apply(img, np.ones((3, 4)))


def test_composite_limits(rng):
    obj = rng.uniform(size=(6, 6, 3))
    bg = rng.uniform(size=(6, 6, 3))
    m = rng.integers(0, 2, size=(6, 6))
    one = io.composite(obj, m, bg, 1.0)
    assert np.array_equal(one[m == 1], obj[m == 1]) and np.array_equal(one[m == 0], bg[m == 0])
    assert np.array_equal(one[m == 1], io.mask_apply(obj, m)[m == 1])
    assert np.array_equal(io.composite(obj, m, bg, 0.0), bg)
    px = io.composite(np.ones((1, 1)), np.ones((1, 1)), np.zeros((1, 1)), 0.9)
    assert px[0, 0, 0] == pytest.approx(0.9)
    with pytest.raises(ValueError):
        io.composite(obj, m, bg[:5], 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 1))
def test_public_ops_stay_in_range(seed, a):
    r = np.random.default_rng(seed)
    img = r.uniform(size=(8, 8, 3))
    m = r.integers(0, 2, size=(8, 8))
    for out in (io.gaussian_blur(img, 1.0), io.sharpen(img, io.canny(img), a),
                io.composite(img, m, img[::-1], a), io.mask_apply(img, m)):
        assert out.min() >= 0.0 and out.max() <= 1.0


# -- PNM ----------------------------------------------------------------------

def test_pnm_round_trip(tmp_path, rng):
    rgb = io.quantize(rng.uniform(size=(5, 7, 3))) / 255.0
    gray = io.quantize(rng.uniform(size=(4, 3, 1))) / 255.0
    io.write_pnm(tmp_path / "a.ppm", rgb)
    io.write_pnm(tmp_path / "b.pgm", gray)
    assert np.array_equal(io.read_pnm(tmp_path / "a.ppm"), rgb)
    assert np.array_equal(io.read_pnm(tmp_path / "b.pgm"), gray)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6")
    assert (tmp_path / "b.pgm").read_bytes().startswith(b"P5")


def test_pnm_header_comments_and_errors():
    data = b"P5\n# made by hand\n2 1\n255\n\x00\xff"
    assert io.decode_pnm(data)[0, :, 0].tolist() == [0.0, 1.0]
    with pytest.raises(ValueError, match="truncated"):
        io.decode_pnm(b"P5\n2 2\n255\n\x00")
    with pytest.raises(ValueError, match="magic"):
        io.decode_pnm(b"P3\n1 1\n255\n0")
    with pytest.raises(ValueError, match="maxval"):
        io.decode_pnm(b"P5\n1 1\n65535\n\x00\x00")
