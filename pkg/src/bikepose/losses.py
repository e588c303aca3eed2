"""Seven-term pose loss over domain-normalised quantities."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .geometry import apply_crop_points, wrap_degrees
from .model import NUM_KEYPOINTS, canonical_keypoints, project_keypoints, repose
from .synth import ParamDomain

TERM_NAMES = ("l_r", "l_t", "l_ps", "l_3d", "l_2dk", "l_2dcon", "l_aux")


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 2.0
    beta4: float = 0.5
    beta5: float = 1.0
    beta6: float = 1.0
    beta7: float = 0.2

    def __post_init__(self):
        if any(getattr(self, f.name) < 0 for f in fields(self)):
            raise ValueError("loss weights must be non-negative")

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term losses; a 2D term is ``None`` when no keypoint is visible."""

    l_r: float
    l_t: float
    l_ps: float
    l_3d: float
    l_2dk: Optional[float]
    l_2dcon: Optional[float]
    l_aux: Optional[float]
    total: float

    def terms(self):
        return {name: getattr(self, name) for name in TERM_NAMES}


@dataclass(frozen=True)
class LossInputs:
    """One side (prediction or ground truth) of a loss evaluation.

    ``kp2d_ib`` lives on the crop image I_b. ``visibility`` is read from the
    ground-truth side; ``box_center`` (pixels on I) feeds the auxiliary term.
    """

    pose: object
    residuals: np.ndarray
    kp2d_ib: np.ndarray
    visibility: Optional[np.ndarray] = None
    box_center: Optional[tuple] = None


def normalize_param(value, domain_min, domain_max, periodic=False, reference=None):
    """Map a parameter to [-1, 1] with respect to its domain range.

    Non-periodic values map linearly and are clamped. Periodic values return
    the wrapped signed difference to ``reference`` divided by half the domain
    width (the domain midpoint is the reference when none is given).
    """
    width = domain_max - domain_min
    if periodic:
        ref = 0.5 * (domain_min + domain_max) if reference is None else reference
        out = wrap_degrees(np.asarray(value, dtype=float) - ref) / (0.5 * width)
    else:
        out = np.clip(2.0 * (np.asarray(value, dtype=float) - domain_min) / width - 1.0, -1.0, 1.0)
    return float(out) if out.ndim == 0 else out


def normalized_param_diff(pred, gt, domain):
    """Per-parameter normalised differences pred - gt, shape (..., 8)."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    lo, hi, per = domain.lows, domain.highs, domain.periodic_mask
    linear = (
        np.clip(2.0 * (pred - lo) / (hi - lo) - 1.0, -1.0, 1.0)
        - np.clip(2.0 * (gt - lo) / (hi - lo) - 1.0, -1.0, 1.0)
    )
    wrapped = wrap_degrees(pred - gt) / (0.5 * (hi - lo))
    return np.where(per, wrapped, linear)


def normalize_pixels(uv, out_size=512):
    """Crop-image pixels to [-1, 1] about the crop center."""
    half = out_size / 2.0
    return (np.asarray(uv, dtype=float) - half) / half


def _mean_sq(x):
    return float(np.mean(np.square(x)))


def loss_terms(pred, gt, camera, crop, template, weights=None, domain=None, residual_bound=0.25, out_size=512):
    """Evaluate every loss term and the weighted total.

    Args:
        pred, gt: ``LossInputs`` for the prediction and the ground truth.
        camera: projects the predicted 3D keypoints for the consistency term.
        crop: ``CropTransform`` taking image I to I_b.
        template: mean keypoints that predicted residuals are added to.

    Returns:
        LossBreakdown. 2D terms are ``None`` (and left out of the total) when
        no ground-truth keypoint is visible; ``l_aux`` is ``None`` unless both
        sides carry a box center.
    """
    weights = weights or LossWeights()
    domain = domain or ParamDomain()
    d = normalized_param_diff(pred.pose.as_array(), gt.pose.as_array(), domain)
    l_ps = _mean_sq(d[0:2])
    l_r = _mean_sq(d[2:5])
    l_t = _mean_sq(d[5:8])
    l_3d = _mean_sq((np.asarray(pred.residuals) - np.asarray(gt.residuals)) / residual_bound)

    vis = np.ones(NUM_KEYPOINTS, bool) if gt.visibility is None else np.asarray(gt.visibility, bool)
    if vis.any():
        pred_2d = normalize_pixels(pred.kp2d_ib, out_size)[vis]
        l_2dk = _mean_sq(pred_2d - normalize_pixels(gt.kp2d_ib, out_size)[vis])
        k3d = repose(template, canonical_keypoints(template, pred.residuals, None), pred.pose)
        reproj = apply_crop_points(crop, project_keypoints(camera, k3d), out_size)
        l_2dcon = _mean_sq(pred_2d - normalize_pixels(reproj, out_size)[vis])
    else:
        l_2dk = l_2dcon = None

    if pred.box_center is not None and gt.box_center is not None:
        half = np.array([camera.width, camera.height], dtype=float) / 2.0
        l_aux = _mean_sq((np.asarray(pred.box_center) - np.asarray(gt.box_center)) / half)
    else:
        l_aux = None

    values = (l_r, l_t, l_ps, l_3d, l_2dk, l_2dcon, l_aux)
    total = sum(w * v for w, v in zip(weights.as_tuple(), values) if v is not None)
    return LossBreakdown(*values, total=float(total))
