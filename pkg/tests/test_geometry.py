import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bikepose.geometry import (
    BBox2D,
    BehindCameraError,
    Camera,
    angular_diff,
    apply_crop,
    crop_from_box,
    project_point,
    rotation_from_euler,
    rotation_from_euler_batch,
    wrap_degrees,
)

angles = st.floats(-720, 720, allow_nan=False)


def _axis(axis, deg):
    # Built entry by entry, independent of the library helpers.
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    if axis == "x":
        return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    if axis == "y":
        return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def test_rotation_identity():
    assert np.array_equal(rotation_from_euler(0, 0, 0), np.eye(3))


def test_rotation_half_turn_about_y():
    v = rotation_from_euler(0, 180, 0) @ np.array([0.0, 0.0, 1.0])
    np.testing.assert_allclose(v, [0, 0, -1], atol=1e-12)


def test_rotation_matches_axis_product():
    expected = _axis("y", 37) @ _axis("x", 5) @ _axis("z", -3)
    np.testing.assert_allclose(rotation_from_euler(5, 37, -3), expected, atol=1e-12)


@given(angles, angles, angles)
def test_rotation_orthonormal(x, y, z):
    R = rotation_from_euler(x, y, z)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


def test_batch_rotation_matches_scalar():
    rng = np.random.default_rng(3)
    a = rng.uniform(-180, 180, (50, 3))
    batch = rotation_from_euler_batch(a[:, 0], a[:, 1], a[:, 2])
    for k in range(50):
        np.testing.assert_allclose(batch[k], rotation_from_euler(*a[k]), atol=1e-14)


def test_optical_axis_projects_to_principal_point():
    cam = Camera()
    for d in (0.5, 3.0, 40.0):
        u, v = project_point(cam, np.array(cam.position) + [0, 0, d])
        assert (u, v) == pytest.approx((cam.cx, cam.cy), abs=1e-12)


def test_projection_hand_value():
    u, v = project_point(Camera(), (0.5, -0.75, 0.0))
    assert u == pytest.approx(1000 * 0.5 / 12 + 256, abs=1e-12)
    assert u == pytest.approx(297.6666666666667, abs=1e-9)
    assert v == pytest.approx(256, abs=1e-12)


def test_projection_zero_depth_raises():
    with pytest.raises(BehindCameraError):
        project_point(Camera(), (1.0, 0.0, -12.0))


@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-10, 20))
def test_projection_scale_consistent(x, y, z):
    cam = Camera()
    cam2 = Camera(fx=2 * cam.fx)
    u1, _ = project_point(cam, (x, y, z))
    u2, _ = project_point(cam2, (x, y, z))
    assert u2 - cam.cx == pytest.approx(2 * (u1 - cam.cx), rel=1e-12, abs=1e-9)


def test_identity_crop():
    h = crop_from_box(BBox2D(0, 0, 512, 512), 512)
    assert (h.center_u, h.center_v, h.scale) == (256, 256, 1)
    assert apply_crop(h, 100.0, 37.5)[0] == 100.0


def test_crop_scale_and_corner():
    h = crop_from_box(BBox2D(128, 192, 384, 320), 512)
    assert (h.center_u, h.center_v, h.scale) == (256, 256, 2)
    assert tuple(map(float, apply_crop(h, 384, 320))) == (512.0, 384.0)
    assert tuple(map(float, apply_crop(h, 256, 256))) == (256.0, 256.0)


def test_zero_width_box_rejected():
    with pytest.raises(ValueError):
        crop_from_box(BBox2D(100, 100, 100, 228))


@given(
    st.floats(0, 400), st.floats(0, 400), st.floats(1, 300), st.floats(1, 300), st.sampled_from([64, 256, 512])
)
def test_crop_long_axis_maps_to_edges(u0, v0, w, hgt, out):
    b = BBox2D(u0, v0, u0 + w, v0 + hgt)
    h = crop_from_box(b, out)
    side = max(w, hgt)
    cu, cv = b.center
    if w >= hgt:
        lo, _ = apply_crop(h, cu - side / 2, cv, out)
        hi, _ = apply_crop(h, cu + side / 2, cv, out)
    else:
        _, lo = apply_crop(h, cu, cv - side / 2, out)
        _, hi = apply_crop(h, cu, cv + side / 2, out)
    assert float(lo) == pytest.approx(0.0, abs=1e-9)
    assert float(hi) == pytest.approx(out, abs=1e-9)


@pytest.mark.parametrize("a,b,expected", [(179, -179, 2), (10, 10, 0), (30, -90, 120)])
def test_angular_diff_examples(a, b, expected):
    assert angular_diff(a, b) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=300)
@given(angles, angles, st.integers(-3, 3))
def test_angular_diff_properties(a, b, k):
    d = angular_diff(a, b)
    oracle = min(abs(a - b + 360 * j) for j in range(-5, 6))
    assert d == pytest.approx(oracle, abs=1e-9)
    assert 0 <= d <= 180
    assert d == pytest.approx(angular_diff(b, a), abs=1e-9)
    assert d == pytest.approx(angular_diff(a + 360 * k, b), abs=1e-9)


@given(angles)
def test_wrap_range(a):
    w = wrap_degrees(a)
    assert -180 <= w < 180
    assert math.isclose(math.remainder(w - a, 360), 0, abs_tol=1e-9)
