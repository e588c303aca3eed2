"""Analysis-by-synthesis 8D pose recovery from 2D keypoints.

The objective is the observable part of the training loss: the 2D keypoint
term on the crop image plus a ridge prior on shape residuals. It is minimised
with projected Levenberg-Marquardt from several yaw seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import (
    MIN_DEPTH,
    BBox2D,
    Camera,
    apply_crop_points,
    crop_from_box,
    rotation_from_euler_batch,
    wrap_degrees,
)
from .losses import LossWeights, normalize_pixels
from .model import (
    NUM_KEYPOINTS,
    PEDAL_GROUP,
    STEERING_GROUP,
    CanonicalTemplate,
    KeypointId,
    Pose8D,
    bounding_box_3d,
    extent_points,
    repose_batch,
)
from .synth import ParamDomain

BEHIND_CAMERA_PENALTY = 1e6
MIN_VISIBLE = 6
N_POSE = 8
N_SHAPE = NUM_KEYPOINTS * 3


class UnderConstrainedError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    """Observed 2D keypoints on image I; invisible entries may hold NaN."""

    keypoints: np.ndarray
    visibility: np.ndarray
    bbox: BBox2D
    camera: Camera = field(default_factory=Camera)
    noise_sigma_hint: Optional[float] = None
    out_size: int = 512

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=float).reshape(NUM_KEYPOINTS, 2)
        vis = np.asarray(self.visibility, dtype=bool).reshape(NUM_KEYPOINTS)
        vis = vis & np.all(np.isfinite(kp), axis=1)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "visibility", vis)

    @property
    def n_visible(self):
        return int(self.visibility.sum())

    @property
    def crop(self):
        return crop_from_box(self.bbox, self.out_size)


@dataclass(frozen=True)
class SolverConfig:
    yaw_starts: int = 8
    max_iterations: int = 200
    fd_step: float = 1e-4
    lm_lambda_init: float = 1e-3
    lm_lambda_factor: float = 10.0
    converge_tol: float = 1e-10
    fit_shape: bool = False
    shape_ridge: float = 10.0
    residual_bound: float = 0.25
    domain: ParamDomain = field(default_factory=ParamDomain)
    weights: LossWeights = field(default_factory=LossWeights)
    # Iterations each seed gets before only the most promising seeds continue.
    screen_iterations: int = 12
    refine_top: int = 2

    def __post_init__(self):
        if self.yaw_starts < 1 or self.max_iterations < 1:
            raise ValueError("yaw_starts and max_iterations must be positive")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if not (self.lm_lambda_init > 0 and self.lm_lambda_factor > 1):
            raise ValueError("lm_lambda_init must be > 0 and lm_lambda_factor > 1")


@dataclass(frozen=True)
class SolveResult:
    pose: Pose8D
    residuals: np.ndarray
    objective: float
    per_start_objectives: list
    iterations_used: int
    converged: bool


class _Problem:
    """Stacked normalised residual vector for one observation."""

    def __init__(self, obs, template, cfg):
        if obs.n_visible < MIN_VISIBLE:
            raise UnderConstrainedError(
                f"{obs.n_visible} visible keypoints; at least {MIN_VISIBLE} are needed for an 8-parameter fit"
            )
        self.obs = obs
        self.template = template
        self.cfg = cfg
        self.vis = obs.visibility
        self.crop = obs.crop
        self.target = normalize_pixels(apply_crop_points(self.crop, obs.keypoints[self.vis], obs.out_size), obs.out_size)
        self.kp_scale = np.sqrt(cfg.weights.beta5 / (2 * obs.n_visible))
        self.shape_scale = np.sqrt(cfg.weights.beta4 * cfg.shape_ridge / N_SHAPE) / cfg.residual_bound
        self.n_params = N_POSE + (N_SHAPE if cfg.fit_shape else 0)
        dom = cfg.domain
        self.lo = np.concatenate([dom.lows, np.full(self.n_params - N_POSE, -np.inf)])
        self.hi = np.concatenate([dom.highs, np.full(self.n_params - N_POSE, np.inf)])
        self.periodic = np.concatenate([dom.periodic_mask, np.zeros(self.n_params - N_POSE, bool)])
        self._rigid = None
        # Optional list collecting one [(objective, x), ...] run per LM call.
        self.trace = None

    def _rigid_setup(self, residuals):
        """Precompute pose-independent terms of the forward model for a fixed shape."""
        key = None if residuals is None else np.asarray(residuals, dtype=float).tobytes()
        if self._rigid is not None and self._rigid[0] == key:
            return self._rigid[1]
        kc = self.template.mean_keypoints + (0.0 if residuals is None else np.asarray(residuals, dtype=float))
        root = kc[KeypointId.ground_root]
        s1 = kc[KeypointId.steering_axis_1]
        k = kc[KeypointId.steering_axis_2] - s1
        k = k / np.linalg.norm(k)
        vis_idx = np.flatnonzero(self.vis)
        steer = np.array([i for i, j in enumerate(vis_idx) if j in STEERING_GROUP], dtype=int)
        pedal = np.array([i for i, j in enumerate(vis_idx) if j in PEDAL_GROUP], dtype=int)
        base = kc[vis_idx] - root
        v = kc[vis_idx[steer]] - s1
        along = np.outer(v @ k, k)
        st = (s1 - root + along, v - along, np.cross(k, v))
        w = kc[vis_idx[pedal]] - kc[KeypointId.pedal_axle]
        axle = kc[KeypointId.pedal_axle] - root
        pd = (axle, w[:, 1], w[:, 2])
        cam = self.obs.camera
        half = self.obs.out_size / 2.0
        g = self.crop.scale / half
        proj = (np.asarray(cam.position), cam.fx * g, cam.fy * g, (cam.cx - self.crop.center_u) * g, (cam.cy - self.crop.center_v) * g)
        setup = (base, steer, st, pedal, pd, proj)
        self._rigid = (key, setup)
        return setup

    def _rigid_residuals(self, X, residuals):
        base, steer, (s_off, s_perp, s_cross), pedal, (axle, wy, wz), (C, gx, gy, ox, oy) = self._rigid_setup(residuals)
        n = len(X)
        Q = np.repeat(base[None], n, axis=0)
        a = np.deg2rad(X[:, 1])[:, None, None]
        Q[:, steer] = s_off + s_perp * np.cos(a) + s_cross * np.sin(a)
        a = np.deg2rad(X[:, 0])[:, None]
        c, s = np.cos(a), np.sin(a)
        Q[:, pedal, 1] = axle[1] + c * wy - s * wz
        Q[:, pedal, 2] = axle[2] + s * wy + c * wz
        R = rotation_from_euler_batch(X[:, 2], X[:, 3], X[:, 4])
        rel = np.matmul(Q, R.transpose(0, 2, 1)) + (X[:, 5:8] - C)[:, None, :]
        depth = rel[..., 2]
        behind = np.any(depth <= MIN_DEPTH, axis=1)
        depth = np.where(depth <= MIN_DEPTH, 1.0, depth)
        un = gx * rel[..., 0] / depth + ox
        vn = gy * rel[..., 1] / depth + oy
        r = (np.stack([un, vn], axis=-1) - self.target).reshape(n, -1) * self.kp_scale
        return r, behind

    def pack(self, pose, residuals):
        x = pose.as_array()
        if self.cfg.fit_shape:
            x = np.concatenate([x, np.asarray(residuals, dtype=float).ravel()])
        return x

    def unpack(self, x, residuals=None):
        pose = Pose8D.from_array(x[:N_POSE])
        if self.cfg.fit_shape:
            return pose, x[N_POSE:].reshape(NUM_KEYPOINTS, 3).copy()
        return pose, np.zeros((NUM_KEYPOINTS, 3)) if residuals is None else np.asarray(residuals, dtype=float)

    def project(self, x):
        """Wrap periodic angles, clamp bounded ones, cap shape residual norms."""
        x = np.array(x, dtype=float)
        x[self.periodic] = wrap_degrees(x[self.periodic])
        x[:N_POSE] = np.clip(x[:N_POSE], self.lo[:N_POSE], self.hi[:N_POSE])
        if self.cfg.fit_shape:
            res = x[N_POSE:].reshape(NUM_KEYPOINTS, 3)
            norms = np.linalg.norm(res, axis=1, keepdims=True)
            res *= np.minimum(1.0, self.cfg.residual_bound / np.maximum(norms, 1e-300))
        return x

    def residuals_batch(self, X, fixed_residuals=None):
        """Residual vectors for an (N, n_params) batch; returns (N, m) and a behind-camera mask."""
        X = np.atleast_2d(X)
        if not self.cfg.fit_shape:
            return self._rigid_residuals(X, fixed_residuals)
        kc = self.template.mean_keypoints + X[:, N_POSE:].reshape(-1, NUM_KEYPOINTS, 3)
        k3d = repose_batch(kc, X[:, :N_POSE])[:, self.vis]
        cam = self.obs.camera
        rel = k3d - np.asarray(cam.position)
        depth = rel[..., 2]
        behind = np.any(depth <= MIN_DEPTH, axis=1)
        depth = np.where(depth <= MIN_DEPTH, 1.0, depth)
        uv = np.stack([cam.fx * rel[..., 0] / depth + cam.cx, cam.fy * rel[..., 1] / depth + cam.cy], axis=-1)
        uv_b = apply_crop_points(self.crop, uv, self.obs.out_size)
        r = (normalize_pixels(uv_b, self.obs.out_size) - self.target).reshape(len(X), -1) * self.kp_scale
        return np.concatenate([r, X[:, N_POSE:] * self.shape_scale], axis=1), behind

    def objective(self, x, fixed_residuals=None):
        r, behind = self.residuals_batch(x[None, :], fixed_residuals)
        if behind[0]:
            return BEHIND_CAMERA_PENALTY
        return float(r[0] @ r[0])

    def objective_batch(self, X, fixed_residuals=None):
        r, behind = self.residuals_batch(X, fixed_residuals)
        return np.where(behind, BEHIND_CAMERA_PENALTY, np.einsum("ij,ij->i", r, r))

    def residuals_and_jacobian(self, x, fixed_residuals=None):
        """Residual vector at ``x`` and its central-difference Jacobian, one batched pass."""
        h = self.cfg.fd_step
        n = self.n_params
        up, dn, denom, _ = self._fd_points(x, h)
        r, _ = self.residuals_batch(np.vstack([x[None, :], up, dn]), fixed_residuals)
        return r[0], ((r[1 : n + 1] - r[n + 1 :]) / denom[:, None]).T

    def _fd_points(self, x, h):
        n = self.n_params
        up = x + h * np.eye(n)
        dn = x - h * np.eye(n)
        bounded = ~self.periodic
        at_hi = bounded & (x + h > self.hi)
        at_lo = bounded & (x - h < self.lo)
        up[at_hi, at_hi] = x[at_hi]
        dn[at_lo, at_lo] = x[at_lo]
        denom = np.where(at_hi | at_lo, h, 2.0 * h)
        return up, dn, denom, at_hi | at_lo

    def jacobian(self, x, fixed_residuals=None, step=None):
        """Central differences (one-sided at bounds). Returns (J, one_sided_flags)."""
        h = self.cfg.fd_step if step is None else step
        n = self.n_params
        up, dn, denom, one_sided = self._fd_points(x, h)
        r, _ = self.residuals_batch(np.vstack([up, dn]), fixed_residuals)
        return ((r[:n] - r[n:]) / denom[:, None]).T, one_sided


def _initial_translation(obs, template, yaw, domain):
    """Root position from the box: depth from box height, lateral from box center."""
    cam = obs.camera
    ext = extent_points(template, template.mean_keypoints)
    height_m = ext[:, 1].max() - ext[:, 1].min()
    # derive_bbox2d pads 5% per side.
    depth = 1.1 * cam.fy * height_m / obs.bbox.height
    uc, vc = obs.bbox.center
    center = np.array(
        [
            (uc - cam.cx) * depth / cam.fx + cam.position[0],
            (vc - cam.cy) * depth / cam.fy + cam.position[1],
            cam.position[2] + depth,
        ]
    )
    box_c = bounding_box_3d(template, template.mean_keypoints).center
    c, s = np.cos(np.deg2rad(yaw)), np.sin(np.deg2rad(yaw))
    offset = np.array([c * box_c[0] + s * box_c[2], box_c[1], -s * box_c[0] + c * box_c[2]])
    t = center - offset
    return np.clip(t, domain.lows[5:], domain.highs[5:])


def initial_poses(obs, template, cfg):
    yaws = -180.0 + 360.0 * np.arange(cfg.yaw_starts) / cfg.yaw_starts
    return [Pose8D(0.0, 0.0, 0.0, float(y), 0.0, tuple(_initial_translation(obs, template, y, cfg.domain))) for y in yaws]


# Articulation angles are multimodal in the image (the pedal circle seen
# edge-on confuses theta_p with 180 - theta_p); re-seed them from a grid.
# Yaw re-seeds also reset the articulation angles, which otherwise compensate
# for a front/back mirrored body.
_RESEED_GRIDS = (
    (0, np.arange(-180.0, 180.0, 15.0), ()),
    (1, np.linspace(-90.0, 90.0, 13), ()),
    (3, np.arange(-180.0, 180.0, 15.0), (0, 1)),
)


def _grid_jump(problem, x, f, fixed_residuals):
    """Move theta_p / theta_s to their best grid value when that lowers the objective."""
    for idx, grid, _ in _RESEED_GRIDS[:2]:
        X = np.repeat(x[None, :], len(grid), axis=0)
        X[:, idx] = grid
        fs = problem.objective_batch(X, fixed_residuals)
        j = int(np.argmin(fs))
        if fs[j] < f:
            x, f = X[j], float(fs[j])
    return x, f


def _lm(problem, x, lam, max_iter, fixed_residuals=None, grid_every=0):
    """Projected Levenberg-Marquardt. Returns (x, objective, lam, iterations, converged).

    With ``grid_every`` > 0 the articulation angles may jump to a better grid
    value every that many iterations; accepted iterates never increase the
    objective either way.
    """
    cfg = problem.cfg
    f = problem.objective(x, fixed_residuals)
    it = 0
    converged = False
    seq = None
    if problem.trace is not None:
        seq = [(f, x.copy())]
        problem.trace.append(seq)
    while it < max_iter:
        it += 1
        if f < 1e-24:
            converged = True
            break
        if grid_every and it % grid_every == 0:
            x_j, f_j = _grid_jump(problem, x, f, fixed_residuals)
            if f_j < f:
                x, f = x_j, f_j
                lam = cfg.lm_lambda_init
                if seq is not None:
                    seq.append((f, x.copy()))
        r, J = problem.residuals_and_jacobian(x, fixed_residuals)
        g = J.T @ r
        A = J.T @ J
        diag = np.diag(A).copy() + 1e-12
        accepted = False
        while lam < 1e12:
            delta = np.linalg.solve(A + lam * np.diag(diag), -g)
            x_new = problem.project(x + delta)
            f_new = problem.objective(x_new, fixed_residuals)
            if f_new < f:
                accepted = True
                break
            lam *= cfg.lm_lambda_factor
        if not accepted:
            # No descent direction at working precision: a local minimum.
            converged = True
            break
        decrease = f - f_new
        step = np.linalg.norm(x_new - x)
        x, f = x_new, f_new
        if seq is not None:
            seq.append((f, x.copy()))
        lam = max(lam / cfg.lm_lambda_factor, 1e-12)
        if decrease <= cfg.converge_tol * max(f, 1e-12) or decrease < 1e-30 or step <= 1e-9 * (1.0 + np.linalg.norm(x)):
            converged = True
            break
    return x, f, lam, it, converged


def _reseed(problem, x, f, lam, budget, fixed_residuals, candidates=2, rounds=3):
    """Try the best grid values of each articulation angle; keep improvements."""
    used = 0
    for _ in range(rounds):
        improved = False
        for idx, grid, reset in _RESEED_GRIDS:
            X = np.repeat(x[None, :], len(grid), axis=0)
            X[:, idx] = grid
            X[:, list(reset)] = 0.0
            fs = problem.objective_batch(X, fixed_residuals)
            far = np.abs(wrap_degrees(grid - x[idx])) > 10.0
            for j in [j for j in np.argsort(fs, kind="stable") if far[j]][:candidates]:
                if used >= budget:
                    return x, f, lam, used
                x0 = problem.project(X[j])
                xc, fc, lc, it, _ = _lm(problem, x0, problem.cfg.lm_lambda_init, min(30, budget - used), fixed_residuals)
                used += it
                if fc < f * (1.0 - 1e-9) and fc < f - 1e-18:
                    x, f, lam = xc, fc, lc
                    improved = True
        if not improved:
            break
    return x, f, lam, used


def objective(obs, pose, residuals=None, cfg=None, template=None):
    """Observable loss of ``pose`` (and shape ``residuals``) against ``obs``.

    Equals beta5 * L_2DK on the visible keypoints plus
    shape_ridge * beta4 * L_3D with zero ground-truth residuals. A keypoint
    behind the camera yields a finite penalty of 1e6.
    """
    cfg = cfg or SolverConfig()
    template = template or CanonicalTemplate()
    residuals = np.zeros((NUM_KEYPOINTS, 3)) if residuals is None else np.asarray(residuals, dtype=float)
    p = _Problem(obs, template, SolverConfig(**{**cfg.__dict__, "fit_shape": True}))
    return p.objective(p.pack(pose, residuals))


def numeric_jacobian(obs, pose, residuals=None, cfg=None, template=None, step=None):
    """Central-difference Jacobian of the stacked residual vector.

    Columns are the 8 pose parameters, followed by the 33 shape residual
    components when ``cfg.fit_shape``. Returns ``(J, one_sided)`` where the
    boolean flags mark parameters on a domain bound (one-sided difference).
    """
    cfg = cfg or SolverConfig()
    template = template or CanonicalTemplate()
    residuals = np.zeros((NUM_KEYPOINTS, 3)) if residuals is None else np.asarray(residuals, dtype=float)
    p = _Problem(obs, template, cfg)
    fixed = None if cfg.fit_shape else residuals
    return p.jacobian(p.pack(pose, residuals), fixed, step)


def residual_vector(obs, pose, residuals=None, cfg=None, template=None):
    cfg = cfg or SolverConfig()
    template = template or CanonicalTemplate()
    residuals = np.zeros((NUM_KEYPOINTS, 3)) if residuals is None else np.asarray(residuals, dtype=float)
    p = _Problem(obs, template, cfg)
    fixed = None if cfg.fit_shape else residuals
    return p.residuals_batch(p.pack(pose, residuals)[None, :], fixed)[0][0]


def fit_pose(obs, template=None, cfg=None, trace=None):
    """Recover the 8D pose (and optionally shape residuals) from an observation.

    Every yaw seed is screened with a short LM run; the ``refine_top`` best
    continue to convergence. The best final objective wins, ties going to the
    lowest seed index. With ``fit_shape`` a rigid fit warm-starts a joint
    pose-and-shape refinement.

    ``trace``, when a list, receives every LM run as a list of accepted
    ``(objective, x)`` iterates.

    Raises:
        UnderConstrainedError: fewer than 6 visible keypoints.
    """
    template = template or CanonicalTemplate()
    cfg = cfg or SolverConfig()
    rigid_cfg = SolverConfig(**{**cfg.__dict__, "fit_shape": False})
    problem = _Problem(obs, template, rigid_cfg)
    problem.trace = trace
    zeros = np.zeros((NUM_KEYPOINTS, 3))

    screen_iter = min(cfg.screen_iterations, cfg.max_iterations)
    runs = []
    for pose in initial_poses(obs, template, cfg):
        x0 = problem.project(problem.pack(pose, zeros))
        runs.append(list(_lm(problem, x0, cfg.lm_lambda_init, screen_iter, zeros, grid_every=4)))

    order = sorted(range(len(runs)), key=lambda i: (runs[i][1], i))
    for i in order[: cfg.refine_top]:
        x, f, lam, it, conv = runs[i]
        if not conv:
            x, f, lam, it2, conv = _lm(problem, x, lam, cfg.max_iterations - it, zeros)
            it += it2
        x, f_re, lam, it2 = _reseed(problem, x, f, lam, cfg.max_iterations, zeros)
        it += it2
        if f_re < f:
            f = f_re
            x, f, lam, it2, conv = _lm(problem, x, lam, cfg.max_iterations, zeros)
            it += it2
        runs[i] = [x, f, lam, it, conv]

    per_start = [float(r[1]) for r in runs]
    best = min(range(len(runs)), key=lambda i: (runs[i][1], i))
    x, f, lam, iters, conv = runs[best]
    total_iters = sum(r[3] for r in runs)
    pose, residuals = problem.unpack(x, zeros)

    if cfg.fit_shape:
        shape_problem = _Problem(obs, template, cfg)
        shape_problem.trace = trace
        xs = shape_problem.project(shape_problem.pack(pose, zeros))
        xs, f, _, it, conv = _lm(shape_problem, xs, cfg.lm_lambda_init, cfg.max_iterations)
        total_iters += it
        pose, residuals = shape_problem.unpack(xs)

    return SolveResult(
        pose=pose,
        residuals=residuals,
        objective=float(f),
        per_start_objectives=per_start,
        iterations_used=int(total_iters),
        converged=bool(conv),
    )


def observation_from_record(rec, noise_px=0.0, rng=None):
    """Observation of a synthetic record, optionally with Gaussian pixel noise."""
    kp = np.array(rec.keypoints_2d_I, dtype=float)
    if noise_px > 0:
        kp = kp + (rng or np.random.default_rng()).normal(0.0, noise_px, size=kp.shape)
    kp[~np.asarray(rec.visibility, bool)] = np.nan
    return Observation(kp, rec.visibility, rec.bbox, rec.camera, noise_sigma_hint=noise_px or None)
