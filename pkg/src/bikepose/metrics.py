"""Pose evaluation: per-parameter MAE, 3D box IoU recall, pose criteria, ADD, 2D AR."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import angular_diff, apply_crop_points, crop_from_box
from .model import (
    POSE_FIELDS,
    OrientedBox3D,
    bounding_box_3d,
    canonical_keypoints,
    project_keypoints,
    repose,
    repose_box,
)

IOU_THRESHOLDS = (0.10, 0.25, 0.50)
POSE_CRITERIA = ((5.0, 0.05), (10.0, 0.10), (40.0, 0.20), (60.0, 0.30))
PIXEL_THRESHOLDS = (5.0, 10.0, 20.0, 30.0)
ANGLE_FIELDS = POSE_FIELDS[:5]


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PoseErrors:
    rot_err: float
    trans_err: float


def mae_per_parameter(preds, gts):
    """Mean absolute error per pose parameter, angles by smallest angular difference.

    Returns a dict keyed by ``POSE_FIELDS``.
    """
    if len(preds) != len(gts):
        raise EvaluationError(f"length mismatch: {len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise EvaluationError("no samples")
    P = np.array([p.as_array() for p in preds])
    G = np.array([g.as_array() for g in gts])
    err = np.abs(P - G)
    err[:, :5] = angular_diff(P[:, :5], G[:, :5])
    return dict(zip(POSE_FIELDS, err.mean(axis=0).tolist()))


def pose_errors(R_pred, t_pred, R_gt, t_gt):
    """Geodesic rotation error (degrees) and Euclidean translation error (meters)."""
    cos = (np.trace(np.asarray(R_pred) @ np.asarray(R_gt).T) - 1.0) / 2.0
    rot = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    trans = float(np.linalg.norm(np.asarray(t_pred, dtype=float) - np.asarray(t_gt, dtype=float)))
    return PoseErrors(rot, trans)


# Box faces as corner indices (corner k has sign bits x=k>>2, y=k>>1&1, z=k&1).
_BOX_FACES = ((0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3))


def _box_faces(box):
    c = box.corners()
    return [c[list(f)] for f in _BOX_FACES]


def _clip_polytope(faces, normal, offset, eps):
    """Keep the part of a convex polytope with normal . x <= offset."""
    out = []
    section = []
    for poly in faces:
        d = poly @ normal - offset
        if np.all(np.abs(d) <= eps):
            # Face lies in the clip plane; the cap below rebuilds it.
            section.extend(poly)
            continue
        kept = []
        n = len(poly)
        for i in range(n):
            p, q = poly[i], poly[(i + 1) % n]
            dp, dq = d[i], d[(i + 1) % n]
            if dp <= eps:
                kept.append(p)
                if abs(dp) <= eps:
                    section.append(p)
            if (dp < -eps and dq > eps) or (dp > eps and dq < -eps):
                x = p + (dp / (dp - dq)) * (q - p)
                kept.append(x)
                section.append(x)
        if len(kept) >= 3:
            out.append(np.array(kept))
    if len(section) >= 3:
        cap = _order_planar(np.array(section), normal, eps)
        if cap is not None:
            out.append(cap)
    return out


def _order_planar(points, normal, eps):
    """Deduplicate coplanar points and order them by angle about their centroid."""
    uniq = []
    for p in points:
        if not any(np.max(np.abs(p - u)) <= eps for u in uniq):
            uniq.append(p)
    if len(uniq) < 3:
        return None
    pts = np.array(uniq)
    a = np.cross(normal, [1.0, 0.0, 0.0])
    if np.linalg.norm(a) < 0.5:
        a = np.cross(normal, [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(normal, a)
    rel = pts - pts.mean(axis=0)
    return pts[np.argsort(np.arctan2(rel @ b, rel @ a), kind="stable")]


def _polytope_volume(faces):
    if not faces:
        return 0.0
    apex = faces[0][0]
    vol = 0.0
    for poly in faces:
        for i in range(1, len(poly) - 1):
            vol += abs(np.linalg.det(np.array([poly[0] - apex, poly[i] - apex, poly[i + 1] - apex])))
    return vol / 6.0


def _to_local(box, frame):
    """Express ``box`` in the frame of ``frame`` (which becomes axis-aligned at the origin)."""
    R = frame.rotation
    return OrientedBox3D(R.T @ (box.center - frame.center), R.T @ box.rotation, box.half_extents)


def intersection_volume_exact(a, b):
    """Volume of a & b by clipping b against the six half-spaces of a."""
    b_local = _to_local(b, a)
    faces = _box_faces(b_local)
    scale = max(np.max(a.half_extents), np.max(b.half_extents), np.max(np.abs(b_local.center)))
    eps = 1e-12 * scale
    for axis in range(3):
        for sign in (1.0, -1.0):
            normal = np.zeros(3)
            normal[axis] = sign
            faces = _clip_polytope(faces, normal, a.half_extents[axis], eps)
            if not faces:
                return 0.0
    return _polytope_volume(faces)


def intersection_volume_mc(a, b, n, rng):
    """Monte-Carlo intersection: containment fractions of uniform samples in each box."""

    def sample(box):
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * box.half_extents
        return box.center + local @ box.rotation.T

    frac_a = np.mean(b.contains(sample(a)))
    frac_b = np.mean(a.contains(sample(b)))
    return 0.5 * (frac_a * a.volume + frac_b * b.volume)


def iou3d(a, b, mode="exact", n=200_000, rng=None):
    """3D IoU of two oriented boxes.

    ``mode`` is ``"exact"`` (convex clipping) or ``"monte_carlo"``/``"mc"``
    with ``n`` samples per box.
    """
    if mode == "exact":
        if (
            np.array_equal(a.center, b.center)
            and np.array_equal(a.rotation, b.rotation)
            and np.array_equal(a.half_extents, b.half_extents)
        ):
            return 1.0
        inter = intersection_volume_exact(a, b)
    elif mode in ("monte_carlo", "mc"):
        inter = intersection_volume_mc(a, b, n, rng if rng is not None else np.random.default_rng(0))
    else:
        raise ValueError(f"unknown IoU mode {mode!r}")
    va, vb = a.volume, b.volume
    inter = min(inter, va, vb)
    union = va + vb - inter
    return float(inter / union) if union > 0 else 0.0


def iou_at_least(tau):
    return lambda iou: iou >= tau


def pose_within(alpha_deg, delta_m):
    return lambda e: e.rot_err <= alpha_deg and e.trans_err <= delta_m


def distance_within(px):
    return lambda d: d <= px


def average_recall(samples, criterion):
    """Percentage of samples for which ``criterion(sample)`` holds."""
    samples = list(samples)
    if not samples:
        raise EvaluationError("average recall of an empty sample list")
    return 100.0 * sum(bool(criterion(s)) for s in samples) / len(samples)


def add_metric(pred_pose, gt_pose, model_points, template=None):
    """Average distance of model points under the two full 8D poses (meters)."""
    kc = np.asarray(model_points, dtype=float)
    return mean_point_distance(repose(template, kc, pred_pose), repose(template, kc, gt_pose))


def mean_point_distance(a, b):
    return float(np.mean(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=-1)))


def keypoint2d_ar(pred_2d, gt_2d, visibility, thresholds=PIXEL_THRESHOLDS, per_keypoint=False):
    """2D keypoint average recall per pixel threshold.

    By default a sample passes when the mean distance over its visible
    keypoints is within the threshold; ``per_keypoint`` instead counts
    every visible keypoint on its own.
    """
    pred = np.asarray(pred_2d, dtype=float)
    gt = np.asarray(gt_2d, dtype=float)
    vis = np.asarray(visibility, dtype=bool)
    if pred.shape != gt.shape or pred.shape[:2] != vis.shape:
        raise EvaluationError("prediction, ground truth and visibility shapes differ")
    if len(pred) == 0:
        raise EvaluationError("no samples")
    empty = np.flatnonzero(~vis.any(axis=1))
    if empty.size:
        raise EvaluationError(f"sample {int(empty[0])} has no visible keypoints")
    dist = np.linalg.norm(pred - gt, axis=-1)
    if per_keypoint:
        values = dist[vis]
    else:
        values = np.sum(dist * vis, axis=1) / vis.sum(axis=1)
    return {float(t): average_recall(values, distance_within(t)) for t in thresholds}


def _key(x):
    return f"{x:g}"


@dataclass
class MetricsReport:
    mae: dict
    ar_3d: dict
    pose_criteria: dict
    add: float
    ar_2d_I: dict
    ar_2d_Ib: dict
    sample_count: int
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "sample_count": self.sample_count,
            "mae": self.mae,
            "ar_3d": {_key(k): v for k, v in self.ar_3d.items()},
            "pose_criteria": {f"{_key(a)}deg_{_key(d * 100)}cm": v for (a, d), v in self.pose_criteria.items()},
            "add": self.add,
            "ar_2d_I": {_key(k): v for k, v in self.ar_2d_I.items()},
            "ar_2d_Ib": {_key(k): v for k, v in self.ar_2d_Ib.items()},
            **self.extras,
        }

    def to_json_lines(self):
        """One JSON object per metric: ``{"table", "metric", "value"}``."""
        lines = []
        for name in POSE_FIELDS:
            lines.append({"table": "mae", "metric": name, "value": self.mae[name]})
        for t, v in self.ar_3d.items():
            lines.append({"table": "ar_3d", "metric": f"3D_{int(round(t * 100))}", "value": v})
        for (a, d), v in self.pose_criteria.items():
            lines.append({"table": "ar_3d", "metric": f"{_key(a)}deg,{_key(d * 100)}cm", "value": v})
        lines.append({"table": "ar_3d", "metric": "ADD", "value": self.add})
        for frame, ar in (("I", self.ar_2d_I), ("I_b", self.ar_2d_Ib)):
            for t, v in ar.items():
                lines.append({"table": f"ar_2d_{frame}", "metric": f"2D_{_key(t)}pxl", "value": v})
        return "\n".join(json.dumps(line) for line in lines) + "\n"

    def format_table(self):
        def row(cells, widths):
            return " | ".join(str(c).rjust(w) for c, w in zip(cells, widths))

        out = [f"samples: {self.sample_count}", "", "Per-parameter MAE (degrees / meters)"]
        heads = ["theta_X", "theta_Y", "theta_Z", "t_X", "t_Y", "t_Z", "theta_p", "theta_s"]
        keys = ["theta_x", "theta_y", "theta_z", "tx", "ty", "tz", "theta_p", "theta_s"]
        w = [9] * len(heads)
        out += [row(heads, w), row([f"{self.mae[k]:.4f}" for k in keys], w), ""]
        out.append("3D average recall (%) and ADD (m)")
        heads = [f"3D_{int(round(t * 100))}" for t in self.ar_3d]
        heads += [f"{_key(a)}deg,{_key(d * 100)}cm" for a, d in self.pose_criteria] + ["ADD"]
        vals = [f"{v:.2f}" for v in self.ar_3d.values()]
        vals += [f"{v:.2f}" for v in self.pose_criteria.values()] + [f"{self.add:.4f}"]
        w = [max(9, len(h)) for h in heads]
        out += [row(heads, w), row(vals, w), ""]
        out.append("2D keypoint average recall (%)")
        heads = ["frame"] + [f"2D_{_key(t)}pxl" for t in self.ar_2d_I]
        w = [max(9, len(h)) for h in heads]
        out.append(row(heads, w))
        out.append(row(["I"] + [f"{v:.2f}" for v in self.ar_2d_I.values()], w))
        out.append(row(["I_b"] + [f"{v:.2f}" for v in self.ar_2d_Ib.values()], w))
        return "\n".join(out) + "\n"


def build_report(records, predictions, templates, iou_mode="exact", mc_samples=200_000, per_keypoint_2d=False, seed=0):
    """Evaluate predictions against annotation records.

    ``templates`` maps template ids to ``CanonicalTemplate``. Predicted 3D
    keypoints are the template plus the predicted residuals (zero when absent)
    under the predicted 8D pose; their projections give the 2D predictions on
    I and, through the ground-truth box crop, on I_b. Failed predictions count
    as misses in every recall and are excluded from MAE and ADD.

    Raises:
        EvaluationError: empty prediction set, or ids that do not match.
    """
    if not predictions:
        raise EvaluationError("empty prediction set")
    by_id = {p.sample_id: p for p in predictions}
    rec_ids = [r.sample_id for r in records]
    missing = [i for i in rec_ids if i not in by_id]
    unknown = sorted(set(by_id) - set(rec_ids))
    if missing or unknown:
        parts = []
        if missing:
            parts.append(f"no prediction for: {', '.join(missing[:20])}" + (" ..." if len(missing) > 20 else ""))
        if unknown:
            parts.append(f"no ground truth for: {', '.join(unknown[:20])}" + (" ..." if len(unknown) > 20 else ""))
        raise EvaluationError("; ".join(parts))

    rng = np.random.default_rng(seed)
    n = len(records)
    ious = np.zeros(n)
    perrs = [PoseErrors(180.0, np.inf)] * n
    adds = []
    pred_i, pred_ib, gt_i, gt_ib, vis = [], [], [], [], []
    ok_pred, ok_gt = [], []
    for k, rec in enumerate(records):
        pred = by_id[rec.sample_id]
        template = templates[rec.template_id]
        gt_i.append(rec.keypoints_2d_I)
        gt_ib.append(rec.keypoints_2d_Ib)
        vis.append(rec.visibility)
        if pred.failed:
            pred_i.append(np.full((len(rec.visibility), 2), np.inf))
            pred_ib.append(np.full((len(rec.visibility), 2), np.inf))
            continue
        res = np.zeros_like(rec.residuals) if pred.residuals is None else pred.residuals
        kc_pred = canonical_keypoints(template, res, None)
        kc_gt = canonical_keypoints(template, rec.residuals, None)
        k3d_pred = repose(template, kc_pred, pred.pose)
        box_gt = repose_box(bounding_box_3d(template, kc_gt), rec.pose)
        box_pred = repose_box(bounding_box_3d(template, kc_pred), pred.pose)
        ious[k] = iou3d(box_pred, box_gt, iou_mode, mc_samples, rng)
        perrs[k] = pose_errors(pred.pose.rotation, pred.pose.t, rec.pose.rotation, rec.pose.t)
        adds.append(mean_point_distance(k3d_pred, rec.keypoints_3d))
        uv = project_keypoints(rec.camera, k3d_pred)
        pred_i.append(uv)
        pred_ib.append(apply_crop_points(crop_from_box(rec.bbox), uv))
        ok_pred.append(pred.pose)
        ok_gt.append(rec.pose)

    failed = n - len(ok_pred)
    mae = mae_per_parameter(ok_pred, ok_gt) if ok_pred else {k: float("nan") for k in POSE_FIELDS}
    ar_3d = {t: average_recall(ious, iou_at_least(t)) for t in IOU_THRESHOLDS}
    crit = {(a, d): average_recall(perrs, pose_within(a, d)) for a, d in POSE_CRITERIA}
    ar_i = keypoint2d_ar(pred_i, gt_i, vis, per_keypoint=per_keypoint_2d)
    ar_ib = keypoint2d_ar(pred_ib, gt_ib, vis, per_keypoint=per_keypoint_2d)
    extras = {"failed": failed}
    conv = [by_id[i].converged for i in rec_ids if by_id[i].converged is not None]
    if conv:
        extras["converged_fraction"] = float(np.mean(conv))
    return MetricsReport(
        mae=mae,
        ar_3d=ar_3d,
        pose_criteria=crit,
        add=float(np.mean(adds)) if adds else float("nan"),
        ar_2d_I=ar_i,
        ar_2d_Ib=ar_ib,
        sample_count=n,
        extras=extras,
    )
