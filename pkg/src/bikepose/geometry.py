"""Coordinate conventions, rotations, pinhole projection and crop mapping.

World frame: right-handed, +Z forward (bicycle canonical heading and camera
optical axis), +Y down (aligned with image v), +X to the rider's right.
The ground plane is Y = 0, so points above ground have negative Y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIN_DEPTH = 1e-6


class BehindCameraError(ValueError):
    """Raised when a point is not strictly in front of the camera."""

    def __init__(self, message, keypoint=None):
        super().__init__(message)
        self.keypoint = keypoint


def rot_x(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_from_euler(theta_x, theta_y, theta_z):
    """Body rotation R = R_Y(theta_y) @ R_X(theta_x) @ R_Z(theta_z).

    Angles are in degrees. Yaw is the outermost factor.
    """
    return rot_y(theta_y) @ rot_x(theta_x) @ rot_z(theta_z)


def rotation_from_euler_batch(theta_x, theta_y, theta_z):
    """Vectorised ``rotation_from_euler`` over 1-D angle arrays, shape (N, 3, 3)."""
    ax, ay, az = (np.deg2rad(np.asarray(a, dtype=float)) for a in (theta_x, theta_y, theta_z))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    R = np.empty(ax.shape + (3, 3))
    # Expanded R_Y @ R_X @ R_Z.
    R[..., 0, 0] = cy * cz + sy * sx * sz
    R[..., 0, 1] = -cy * sz + sy * sx * cz
    R[..., 0, 2] = sy * cx
    R[..., 1, 0] = cx * sz
    R[..., 1, 1] = cx * cz
    R[..., 1, 2] = -sx
    R[..., 2, 0] = -sy * cz + cy * sx * sz
    R[..., 2, 1] = sy * sz + cy * sx * cz
    R[..., 2, 2] = cy * cx
    return R


def axis_angle_matrix(axis, deg):
    """Rodrigues rotation about a unit ``axis`` by ``deg`` degrees (right-hand rule)."""
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    a = np.deg2rad(deg)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(a) * K + (1.0 - np.cos(a)) * (K @ K)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with identity orientation placed at ``position``.

    Defaults reproduce the synthetic setup: 512x512 image, camera 0.75 m above
    the ground and 12 m behind the world origin.
    """

    position: tuple = (0.0, -0.75, -12.0)
    fx: float = 1000.0
    fy: float = 1000.0
    cx: float = 256.0
    cy: float = 256.0
    width: int = 512
    height: int = 512

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def to_dict(self):
        return {
            "position": list(self.position),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            position=tuple(d["position"]),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


def project_points(camera, points):
    """Project an (N, 3) array of world points to (N, 2) pixel coordinates.

    Raises:
        BehindCameraError: if any point has depth <= 1e-6 m; ``keypoint`` holds
            the index of the first offending point.
    """
    p = np.asarray(points, dtype=float)
    rel = p - np.asarray(camera.position)
    depth = rel[..., 2]
    bad = np.flatnonzero(np.ravel(depth) <= MIN_DEPTH)
    if bad.size:
        raise BehindCameraError(
            f"point {int(bad[0])} is behind the camera (depth {np.ravel(depth)[bad[0]]:.6g} m)",
            keypoint=int(bad[0]),
        )
    u = camera.fx * rel[..., 0] / depth + camera.cx
    v = camera.fy * rel[..., 1] / depth + camera.cy
    return np.stack([u, v], axis=-1)


def project_point(camera, p):
    """Project a single 3-vector; returns ``(u, v)`` in pixels."""
    uv = project_points(camera, np.asarray(p, dtype=float)[None, :])[0]
    return float(uv[0]), float(uv[1])


@dataclass(frozen=True)
class BBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self):
        return self.x_max - self.x_min

    @property
    def height(self):
        return self.y_max - self.y_min

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_tuple(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class CropTransform:
    """Similarity map from image I to the square crop I_b."""

    center_u: float
    center_v: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("crop scale must be positive")


def crop_from_box(b, out_size=512):
    """Centered square crop around ``b`` upscaled to ``out_size`` pixels.

    The source window has side max(width, height); anything outside the
    image is zero padded, which only matters for pixel data.
    """
    if not isinstance(b, BBox2D):
        b = BBox2D(*b)
    side = max(b.width, b.height)
    cu, cv = b.center
    return CropTransform(cu, cv, out_size / side)


def apply_crop(h, u, v, out_size=512):
    """Map pixel coordinates on I onto the crop I_b. Works on scalars or arrays."""
    half = out_size / 2.0
    return (np.asarray(u) - h.center_u) * h.scale + half, (np.asarray(v) - h.center_v) * h.scale + half


def apply_crop_points(h, uv, out_size=512):
    uv = np.asarray(uv, dtype=float)
    out = np.empty_like(uv)
    out[..., 0], out[..., 1] = apply_crop(h, uv[..., 0], uv[..., 1], out_size)
    return out


def wrap_degrees(a):
    """Wrap angles into [-180, 180)."""
    return (np.asarray(a, dtype=float) + 180.0) % 360.0 - 180.0


def angular_diff(a, b):
    """Smallest absolute difference between two angles, in [0, 180] degrees."""
    d = np.abs(wrap_degrees(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
    if np.ndim(d) == 0:
        return float(d)
    return d
