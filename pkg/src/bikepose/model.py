"""Parametric articulated bicycle: 11 keypoints, 8D forward kinematics, boxes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .geometry import (
    BBox2D,
    project_points,
    rotation_from_euler,
    rotation_from_euler_batch,
)


class KeypointId(IntEnum):
    left_handle = 0
    right_handle = 1
    forward_wheel_centre = 2
    steering_axis_1 = 3
    steering_axis_2 = 4
    pedal_right = 5
    pedal_left = 6
    pedal_axle = 7
    seat = 8
    ground_root = 9
    rear_wheel_center = 10


KEYPOINT_NAMES = tuple(k.name for k in KeypointId)
NUM_KEYPOINTS = len(KEYPOINT_NAMES)

STEERING_GROUP = (KeypointId.left_handle, KeypointId.right_handle, KeypointId.forward_wheel_centre)
PEDAL_GROUP = (KeypointId.pedal_right, KeypointId.pedal_left)

POSE_FIELDS = ("theta_p", "theta_s", "theta_x", "theta_y", "theta_z", "tx", "ty", "tz")

DEFAULT_MEAN_KEYPOINTS = {
    "left_handle": (-0.21, -1.00, 0.33),
    "right_handle": (0.21, -1.00, 0.33),
    "forward_wheel_centre": (0.0, -0.34, 0.56),
    "steering_axis_1": (0.0, -0.70, 0.44),
    "steering_axis_2": (0.0, -0.98, 0.35),
    "pedal_right": (0.10, -0.29, 0.17),
    "pedal_left": (-0.10, -0.29, -0.17),
    "pedal_axle": (0.0, -0.29, 0.0),
    "seat": (0.0, -0.95, -0.20),
    "ground_root": (0.0, 0.0, 0.0),
    "rear_wheel_center": (0.0, -0.34, -0.46),
}


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class Pose8D:
    """Pedal, steering and body Euler angles (degrees) plus root translation (m)."""

    theta_p: float = 0.0
    theta_s: float = 0.0
    theta_x: float = 0.0
    theta_y: float = 0.0
    theta_z: float = 0.0
    t: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "t", tuple(float(c) for c in self.t))
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("pose parameters must be finite")

    def as_array(self):
        return np.array(
            [self.theta_p, self.theta_s, self.theta_x, self.theta_y, self.theta_z, *self.t], dtype=float
        )

    @classmethod
    def from_array(cls, a):
        a = [float(x) for x in a]
        return cls(a[0], a[1], a[2], a[3], a[4], (a[5], a[6], a[7]))

    def to_dict(self):
        return dict(zip(POSE_FIELDS, self.as_array().tolist()))

    @classmethod
    def from_dict(cls, d):
        return cls.from_array([d[k] for k in POSE_FIELDS])

    @property
    def rotation(self):
        return rotation_from_euler(self.theta_x, self.theta_y, self.theta_z)


@dataclass(frozen=True)
class CanonicalTemplate:
    """Mean canonical keypoints plus articulation and box constants (meters)."""

    mean_keypoints: np.ndarray = field(
        default_factory=lambda: np.array([DEFAULT_MEAN_KEYPOINTS[n] for n in KEYPOINT_NAMES])
    )
    wheel_radius: float = 0.34
    crank_length: float = 0.17
    pedal_lateral_offset: float = 0.10
    box_margin: float = 0.03

    def __post_init__(self):
        kp = np.array(self.mean_keypoints, dtype=float)
        kp.setflags(write=False)
        object.__setattr__(self, "mean_keypoints", kp)
        validate_template(self)

    def to_dict(self):
        return {
            "keypoints": {n: self.mean_keypoints[i].tolist() for i, n in enumerate(KEYPOINT_NAMES)},
            "wheel_radius": self.wheel_radius,
            "crank_length": self.crank_length,
            "pedal_lateral_offset": self.pedal_lateral_offset,
            "box_margin": self.box_margin,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            kps = d["keypoints"]
            missing = [n for n in KEYPOINT_NAMES if n not in kps]
            if missing:
                raise TemplateError(f"template missing keypoints: {', '.join(missing)}")
            extra = sorted(set(kps) - set(KEYPOINT_NAMES))
            if extra:
                raise TemplateError(f"template has unknown keypoints: {', '.join(extra)}")
            return cls(
                mean_keypoints=np.array([kps[n] for n in KEYPOINT_NAMES], dtype=float),
                wheel_radius=float(d["wheel_radius"]),
                crank_length=float(d["crank_length"]),
                pedal_lateral_offset=float(d["pedal_lateral_offset"]),
                box_margin=float(d["box_margin"]),
            )
        except KeyError as exc:
            raise TemplateError(f"template missing field {exc.args[0]!r}") from None


def validate_template(template, tol=1e-9):
    kp = template.mean_keypoints
    if kp.shape != (NUM_KEYPOINTS, 3) or not np.all(np.isfinite(kp)):
        raise TemplateError(f"template needs {NUM_KEYPOINTS} finite 3D keypoints, got shape {kp.shape}")
    for name in ("wheel_radius", "crank_length", "box_margin"):
        if not getattr(template, name) >= 0:
            raise TemplateError(f"{name} must be non-negative")
    if np.linalg.norm(kp[KeypointId.steering_axis_2] - kp[KeypointId.steering_axis_1]) < tol:
        raise TemplateError("steering_axis_1 and steering_axis_2 coincide")
    if np.linalg.norm(kp[KeypointId.ground_root]) > tol:
        raise TemplateError("ground_root must be at the canonical origin")
    if kp[:, 1].max() > kp[KeypointId.ground_root, 1] + tol:
        raise TemplateError("ground_root must be the lowest keypoint (maximum y)")
    axle = kp[KeypointId.pedal_axle]
    for pid in PEDAL_GROUP:
        d = kp[pid] - axle
        radius = np.hypot(d[1], d[2])
        if abs(radius - template.crank_length) > 1e-6:
            raise TemplateError(
                f"{pid.name} is {radius:.6g} m from the axle in its pedal plane, expected crank_length "
                f"{template.crank_length:.6g}"
            )
        if abs(abs(d[0]) - template.pedal_lateral_offset) > 1e-6:
            raise TemplateError(f"{pid.name} lateral offset does not match pedal_lateral_offset")


def load_template(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"template file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TemplateError(f"{path}: invalid JSON ({exc})") from None
    return CanonicalTemplate.from_dict(data)


def save_template(template, path):
    Path(path).write_text(json.dumps(template.to_dict(), indent=2) + "\n")


def canonical_keypoints(template, residuals, bound=0.25):
    """Instance keypoints in canonical pose: mean template plus per-keypoint residuals."""
    res = np.asarray(residuals, dtype=float)
    if res.shape != (NUM_KEYPOINTS, 3):
        raise ValueError(f"residuals must have shape (11, 3), got {res.shape}")
    norms = np.linalg.norm(res, axis=1)
    if bound is not None and np.any(norms > bound + 1e-12):
        worst = int(np.argmax(norms))
        raise ValueError(f"residual for {KEYPOINT_NAMES[worst]} has norm {norms[worst]:.4g} > bound {bound}")
    return template.mean_keypoints + res


def _rotate_about(v, k, cos, sin):
    """Rodrigues rotation of vectors ``v`` (N, M, 3) about unit axes ``k`` (N, 3)."""
    kb = k[:, None, :]
    kv = (v * kb).sum(axis=-1, keepdims=True)
    cross = np.empty_like(v)
    cross[..., 0] = kb[..., 1] * v[..., 2] - kb[..., 2] * v[..., 1]
    cross[..., 1] = kb[..., 2] * v[..., 0] - kb[..., 0] * v[..., 2]
    cross[..., 2] = kb[..., 0] * v[..., 1] - kb[..., 1] * v[..., 0]
    return v * cos[:, None, None] + cross * sin[:, None, None] + kb * kv * (1.0 - cos)[:, None, None]


def articulate_batch(kc, theta_p, theta_s):
    """Steering and pedal articulation in the canonical frame, shape (N, 11, 3).

    Keypoints outside each articulated group are copied untouched.
    """
    theta_p = np.atleast_1d(np.asarray(theta_p, dtype=float))
    theta_s = np.atleast_1d(np.asarray(theta_s, dtype=float))
    n = theta_p.shape[0]
    kc = np.broadcast_to(np.asarray(kc, dtype=float), (n, NUM_KEYPOINTS, 3))
    pts = kc.copy()

    s1 = kc[:, KeypointId.steering_axis_1]
    axis = kc[:, KeypointId.steering_axis_2] - s1
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    steer = list(STEERING_GROUP)
    a = np.deg2rad(theta_s)
    pts[:, steer] = _rotate_about(kc[:, steer] - s1[:, None], axis, np.cos(a), np.sin(a)) + s1[:, None]

    # Pedals turn about +X through the axle.
    axle = kc[:, KeypointId.pedal_axle]
    ped = list(PEDAL_GROUP)
    a = np.deg2rad(theta_p)
    c, s = np.cos(a)[:, None], np.sin(a)[:, None]
    v = kc[:, ped] - axle[:, None]
    pts[:, ped, 1] = axle[:, None, 1] + c * v[..., 1] - s * v[..., 2]
    pts[:, ped, 2] = axle[:, None, 2] + s * v[..., 1] + c * v[..., 2]
    return pts


def repose_batch(kc, params):
    """Pose canonical keypoints with an (N, 8) parameter array.

    ``kc`` is (11, 3) or a per-pose (N, 11, 3) stack; parameter order is
    ``POSE_FIELDS``. Returns (N, 11, 3). Steering and pedal articulation
    happen in the canonical frame, then the body rotation about ground_root,
    then translation of ground_root to t.
    """
    P = np.atleast_2d(np.asarray(params, dtype=float))
    kc = np.broadcast_to(np.asarray(kc, dtype=float), (P.shape[0], NUM_KEYPOINTS, 3))
    pts = articulate_batch(kc, P[:, 0], P[:, 1])
    root = kc[:, KeypointId.ground_root]
    R = rotation_from_euler_batch(P[:, 2], P[:, 3], P[:, 4])
    return np.matmul(pts - root[:, None], R.transpose(0, 2, 1)) + P[:, None, 5:8]


def repose(template, kc, pose):
    """Apply an 8D pose to canonical keypoints; returns an (11, 3) array.

    ``template`` is accepted for interface symmetry; the articulation axes are
    read from the (possibly deformed) keypoints themselves.
    """
    del template
    return repose_batch(kc, pose.as_array()[None, :])[0]


def project_keypoints(camera, k3d):
    """Project posed keypoints to image I, preserving keypoint order.

    Raises:
        BehindCameraError: naming the offending keypoint.
    """
    try:
        return project_points(camera, k3d)
    except Exception as exc:
        kid = getattr(exc, "keypoint", None)
        if kid is not None and kid < NUM_KEYPOINTS and np.shape(k3d)[0] == NUM_KEYPOINTS:
            exc.args = (f"{KEYPOINT_NAMES[kid]}: {exc.args[0]}",)
        raise


@dataclass(frozen=True)
class OrientedBox3D:
    center: np.ndarray
    rotation: np.ndarray
    half_extents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        he = np.asarray(self.half_extents, dtype=float).reshape(3)
        if not np.all(he > 0):
            raise ValueError("box half extents must be positive")
        object.__setattr__(self, "half_extents", he)

    @property
    def volume(self):
        return float(8.0 * np.prod(self.half_extents))

    def corners(self):
        """The eight corners, ordered by sign pattern of (x, y, z) in the box frame."""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return self.center + (signs * self.half_extents) @ self.rotation.T

    def contains(self, points, tol=0.0):
        local = (np.asarray(points, dtype=float) - self.center) @ self.rotation
        return np.all(np.abs(local) <= self.half_extents + tol, axis=-1)


def extent_points(template, k3d, rotation=None):
    """Keypoints plus wheel rims (each wheel center +-radius along body Y and Z)."""
    R = np.eye(3) if rotation is None else np.asarray(rotation)
    r = template.wheel_radius
    offsets = np.array([[0, r, 0], [0, -r, 0], [0, 0, r], [0, 0, -r]], dtype=float) @ R.T
    wheels = [k3d[KeypointId.forward_wheel_centre], k3d[KeypointId.rear_wheel_center]]
    rims = [w + offsets for w in wheels]
    return np.vstack([np.asarray(k3d, dtype=float)] + rims)


def bounding_box_3d(template, kc):
    """Axis-aligned canonical box enclosing keypoints and wheel extents.

    Coordinates are taken relative to the instance's ground_root so the box
    lives in the frame that ``repose_box`` rotates about. X is padded by
    ``box_margin`` on both sides.
    """
    kc = np.asarray(kc, dtype=float)
    pts = extent_points(template, kc - kc[KeypointId.ground_root])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    lo[0] -= template.box_margin
    hi[0] += template.box_margin
    return OrientedBox3D(center=0.5 * (lo + hi), rotation=np.eye(3), half_extents=0.5 * (hi - lo))


def repose_box(box, pose):
    """6D reposing of a canonical box; articulation angles are ignored."""
    R = pose.rotation
    return OrientedBox3D(
        center=R @ box.center + np.asarray(pose.t),
        rotation=R @ box.rotation,
        half_extents=box.half_extents,
    )


def derive_bbox2d(camera, template, k3d, rotation=None, pad=0.05):
    """Tight pixel box over projected keypoints and wheel rims, padded and clipped.

    ``rotation`` is the body rotation of the posed keypoints and orients the
    wheel-rim offsets; canonical axes are used when it is omitted.
    """
    pts = extent_points(template, np.asarray(k3d, dtype=float), rotation)
    uv = project_points(camera, pts)
    lo = uv.min(axis=0)
    hi = uv.max(axis=0)
    span = hi - lo
    lo = lo - pad * span
    hi = hi + pad * span
    lo = np.clip(lo, 0.0, [camera.width, camera.height])
    hi = np.clip(hi, 0.0, [camera.width, camera.height])
    if not (lo[0] < hi[0] and lo[1] < hi[1]):
        raise ValueError("2D box is degenerate after clipping to the image")
    return BBox2D(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))
