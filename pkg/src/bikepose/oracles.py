"""Embedded oracle suites used as a release gate by ``bikepose oracle-check``.

Each suite checks a production routine against an independent computation:
forward kinematics against explicit 4x4 homogeneous matrices, exact box IoU
against Monte-Carlo integration, and solver Jacobians against finite
differences of the scalar objective.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import Camera
from .metrics import iou3d
from .model import (
    NUM_KEYPOINTS,
    PEDAL_GROUP,
    STEERING_GROUP,
    CanonicalTemplate,
    KeypointId,
    OrientedBox3D,
    Pose8D,
    canonical_keypoints,
    derive_bbox2d,
    project_keypoints,
    repose,
)
from .solver import Observation, SolverConfig, numeric_jacobian, objective, residual_vector
from .synth import ParamDomain, sample_pose, sample_residuals


def _hom_rotation_about(axis_point, axis_dir, deg):
    """4x4 rotation about a line, built as T(p) @ R @ T(-p) with R from the axis-angle formula."""
    k = np.asarray(axis_dir, float) / math.sqrt(sum(c * c for c in axis_dir))
    a = math.radians(deg)
    c, s, C = math.cos(a), math.sin(a), 1.0 - math.cos(a)
    x, y, z = k
    R = np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )
    H = np.eye(4)
    H[:3, :3] = R
    T = np.eye(4)
    T[:3, 3] = axis_point
    Ti = np.eye(4)
    Ti[:3, 3] = -np.asarray(axis_point)
    return T @ H @ Ti


def _hom_axis(axis, deg):
    e = [0.0, 0.0, 0.0]
    e[axis] = 1.0
    return _hom_rotation_about([0.0, 0.0, 0.0], e, deg)


def homogeneous_repose(kc, pose):
    """Reference forward kinematics from per-stage homogeneous matrices."""
    kc = np.asarray(kc, float)
    s1, s2 = kc[KeypointId.steering_axis_1], kc[KeypointId.steering_axis_2]
    root = kc[KeypointId.ground_root]
    H_steer = _hom_rotation_about(s1, s2 - s1, pose.theta_s)
    H_pedal = _hom_rotation_about(kc[KeypointId.pedal_axle], [1.0, 0.0, 0.0], pose.theta_p)
    T_root = np.eye(4)
    T_root[:3, 3] = -root
    T_t = np.eye(4)
    T_t[:3, 3] = pose.t
    H_body = T_t @ _hom_axis(1, pose.theta_y) @ _hom_axis(0, pose.theta_x) @ _hom_axis(2, pose.theta_z) @ T_root
    out = np.empty_like(kc)
    for i, p in enumerate(kc):
        ph = np.append(p, 1.0)
        if i in STEERING_GROUP:
            ph = H_steer @ ph
        elif i in PEDAL_GROUP:
            ph = H_pedal @ ph
        out[i] = (H_body @ ph)[:3]
    return out


def _record(failures, case, limit=5):
    if len(failures) < limit:
        failures.append(case)


def kinematics_suite(rng, draws=1000, tol=1e-9, template=None):
    template = template or CanonicalTemplate()
    domain = ParamDomain()
    failures = []
    passed = 0
    for _ in range(draws):
        pose = sample_pose(domain, rng)
        res = sample_residuals(0.05, 0.25, rng)
        kc = canonical_keypoints(template, res)
        err = float(np.max(np.abs(repose(template, kc, pose) - homogeneous_repose(kc, pose))))
        if err <= tol:
            passed += 1
        else:
            _record(failures, {"pose": pose.to_dict(), "residuals": res.tolist(), "max_abs_err": err})
    return {"name": "kinematics", "passed": passed, "total": draws, "tolerance": tol, "failures": failures}


def random_overlapping_boxes(rng):
    """Two random oriented boxes whose centers are close enough to overlap."""
    from .geometry import rotation_from_euler

    he_a = rng.uniform(0.2, 1.0, 3)
    he_b = rng.uniform(0.2, 1.0, 3)
    a = OrientedBox3D(rng.uniform(-1, 1, 3), rotation_from_euler(*rng.uniform(-180, 180, 3)), he_a)
    offset = rng.normal(size=3)
    offset *= rng.uniform(0.0, 0.8) * min(he_a.min(), he_b.min()) / np.linalg.norm(offset)
    b = OrientedBox3D(a.center + offset, rotation_from_euler(*rng.uniform(-180, 180, 3)), he_b)
    return a, b


def iou_suite(rng, pairs=100, samples=200_000, tol=0.01):
    failures = []
    passed = 0
    for _ in range(pairs):
        a, b = random_overlapping_boxes(rng)
        exact = iou3d(a, b, "exact")
        mc = iou3d(a, b, "monte_carlo", samples, rng)
        if abs(exact - mc) <= tol:
            passed += 1
        else:
            _record(
                failures,
                {
                    "box_a": {"center": a.center.tolist(), "rotation": a.rotation.tolist(), "half_extents": a.half_extents.tolist()},
                    "box_b": {"center": b.center.tolist(), "rotation": b.rotation.tolist(), "half_extents": b.half_extents.tolist()},
                    "exact": exact,
                    "monte_carlo": mc,
                },
            )
    return {"name": "iou_exact_vs_mc", "passed": passed, "total": pairs, "tolerance": tol, "failures": failures}


def random_observation(rng, template=None, camera=None, domain=None, margin=0.5):
    """A noise-free observation from a random pose kept away from domain bounds."""
    template = template or CanonicalTemplate()
    camera = camera or Camera()
    domain = domain or ParamDomain()
    lo, hi = domain.lows, domain.highs
    shrink = np.where(domain.periodic_mask, 0.0, margin * 0.1 * (hi - lo))
    while True:
        x = rng.uniform(lo + shrink, hi - shrink)
        pose = Pose8D.from_array(x)
        k3d = repose(template, template.mean_keypoints, pose)
        try:
            bbox = derive_bbox2d(camera, template, k3d, pose.rotation)
        except ValueError:
            continue
        uv = project_keypoints(camera, k3d)
        return pose, Observation(uv, np.ones(NUM_KEYPOINTS, bool), bbox, camera)


def gradient_suite(rng, points=100, rel_tol=1e-4, h=1e-5, template=None):
    """Objective gradient by central differences vs the solver's 2 J^T r.

    The observation comes from one pose and the gradient is taken at a
    perturbed pose so the residual is not zero.
    """
    template = template or CanonicalTemplate()
    cfg = SolverConfig()
    failures = []
    passed = 0
    for _ in range(points):
        _, obs = random_observation(rng, template)
        while True:
            probe, _ = random_observation(rng, template)
            x = probe.as_array()
            x[5:] = np.clip(x[5:], -0.4, 0.4)
            probe = Pose8D.from_array(x)
            try:
                residual_vector(obs, probe, None, cfg, template)
                break
            except ValueError:
                continue
        J, _ = numeric_jacobian(obs, probe, None, cfg, template)
        r = residual_vector(obs, probe, None, cfg, template)
        g_solver = 2.0 * J.T @ r
        g_fd = np.empty(8)
        x = probe.as_array()
        for i in range(8):
            e = np.zeros(8)
            e[i] = h
            g_fd[i] = (
                objective(obs, Pose8D.from_array(x + e), None, cfg, template)
                - objective(obs, Pose8D.from_array(x - e), None, cfg, template)
            ) / (2 * h)
        rel = float(np.max(np.abs(g_fd - g_solver)) / max(np.max(np.abs(g_fd)), 1e-12))
        if rel <= rel_tol:
            passed += 1
        else:
            _record(failures, {"pose": probe.to_dict(), "grad_fd": g_fd.tolist(), "grad_solver": g_solver.tolist(), "rel_err": rel})
    return {"name": "gradient_fd_vs_solver", "passed": passed, "total": points, "tolerance": rel_tol, "failures": failures}


def run_all(seed=0, kin_draws=1000, iou_pairs=100, iou_samples=200_000, iou_tol=0.01, grad_points=100):
    rng = np.random.default_rng(seed)
    return [
        kinematics_suite(rng, kin_draws),
        iou_suite(rng, iou_pairs, iou_samples, iou_tol),
        gradient_suite(rng, grad_points),
    ]
