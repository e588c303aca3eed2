"""Synthetic ground truth: uniform pose sampling, shape jitter, annotation files."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import BBox2D, Camera, apply_crop_points, crop_from_box
from .model import (
    NUM_KEYPOINTS,
    POSE_FIELDS,
    CanonicalTemplate,
    KeypointId,
    Pose8D,
    canonical_keypoints,
    derive_bbox2d,
    project_keypoints,
    repose,
)

SCHEMA_NAME = "bikepose/annotations"
SCHEMA_VERSION = 1
OUT_SIZE = 512


@dataclass(frozen=True)
class ParamDomain:
    """Closed/half-open sampling ranges per pose parameter (degrees, meters)."""

    theta_p: tuple = (-180.0, 180.0)
    theta_s: tuple = (-90.0, 90.0)
    theta_x: tuple = (-5.0, 5.0)
    theta_y: tuple = (-180.0, 180.0)
    theta_z: tuple = (-5.0, 5.0)
    tx: tuple = (-1.0, 1.0)
    ty: tuple = (-0.5, 0.5)
    tz: tuple = (-5.0, 2.0)

    PERIODIC = ("theta_p", "theta_y")

    def __post_init__(self):
        for name in POSE_FIELDS:
            lo, hi = (float(x) for x in getattr(self, name))
            if not lo < hi:
                raise ValueError(f"domain for {name} must have min < max, got ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))

    @property
    def lows(self):
        return np.array([getattr(self, n)[0] for n in POSE_FIELDS])

    @property
    def highs(self):
        return np.array([getattr(self, n)[1] for n in POSE_FIELDS])

    @property
    def periodic_mask(self):
        return np.array([n in self.PERIODIC for n in POSE_FIELDS])

    def contains(self, pose, tol=1e-9):
        a = pose.as_array() if isinstance(pose, Pose8D) else np.asarray(pose)
        return bool(np.all(a >= self.lows - tol) and np.all(a <= self.highs + tol))

    def to_dict(self):
        return {n: list(getattr(self, n)) for n in POSE_FIELDS}

    @classmethod
    def from_dict(cls, d):
        unknown = sorted(set(d) - set(POSE_FIELDS))
        if unknown:
            raise ValueError(f"unknown domain parameters: {', '.join(unknown)}")
        return cls(**{k: tuple(v) for k, v in d.items()})


@dataclass(frozen=True)
class DatasetConfig:
    n_templates: int = 23
    samples_per_template: int = 2500
    train_fraction: float = 0.75
    seed: int = 0
    domain: ParamDomain = field(default_factory=ParamDomain)
    residual_sigma: float = 0.02
    residual_bound: float = 0.25
    occlusion_dropout: float = 0.0
    max_retries: int = 100

    def __post_init__(self):
        if self.n_templates < 1 or self.samples_per_template < 1:
            raise ValueError("n_templates and samples_per_template must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.residual_sigma < 0:
            raise ValueError("residual_sigma must be >= 0")
        if not 0.0 <= self.occlusion_dropout <= 1.0:
            raise ValueError("occlusion_dropout must be a probability")

    @property
    def n_records(self):
        return self.n_templates * self.samples_per_template

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["domain"] = self.domain.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config fields: {', '.join(unknown)}")
        d = dict(d)
        if "domain" in d:
            d["domain"] = ParamDomain.from_dict(d["domain"])
        return cls(**d)


@dataclass(frozen=True)
class AnnotationRecord:
    sample_id: str
    template_id: str
    split: str
    pose: Pose8D
    residuals: np.ndarray
    keypoints_3d: np.ndarray
    keypoints_2d_I: np.ndarray
    keypoints_2d_Ib: np.ndarray
    visibility: np.ndarray
    bbox: BBox2D
    camera: Camera

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "template_id": self.template_id,
            "split": self.split,
            "pose": self.pose.to_dict(),
            "residuals": np.asarray(self.residuals).tolist(),
            "kp3d": np.asarray(self.keypoints_3d).tolist(),
            "kp2d_i": np.asarray(self.keypoints_2d_I).tolist(),
            "kp2d_ib": np.asarray(self.keypoints_2d_Ib).tolist(),
            "vis": [bool(v) for v in self.visibility],
            "bbox": list(self.bbox.as_tuple()),
            "camera": self.camera.to_dict(),
        }

    def __eq__(self, other):
        if not isinstance(other, AnnotationRecord):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


def sample_pose(domain, rng):
    """Draw each pose parameter independently and uniformly from its range."""
    lo, hi = domain.lows, domain.highs
    # Generator.uniform samples [lo, hi); the closed ranges differ only on a null set.
    return Pose8D.from_array(rng.uniform(lo, hi))


def sample_residuals(sigma, bound, rng):
    """Gaussian per-keypoint residuals, each vector clamped to norm <= bound.

    The ground_root row is always zero: the root is the pose anchor and stays
    at the template origin.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    res = rng.normal(0.0, 1.0, size=(NUM_KEYPOINTS, 3)) * sigma
    res[KeypointId.ground_root] = 0.0
    norms = np.linalg.norm(res, axis=1, keepdims=True)
    scale = np.minimum(1.0, bound / np.maximum(norms, 1e-300))
    return res * scale


def round_half_up(x):
    return int(math.floor(x + 0.5))


def split_assignment(n, train_fraction, seed):
    """Seeded shuffle; the first round_half_up(train_fraction * n) indices train."""
    n_train = round_half_up(train_fraction * n)
    order = np.random.default_rng([seed, 1]).permutation(n)
    splits = np.empty(n, dtype=object)
    splits[order[:n_train]] = "train"
    splits[order[n_train:]] = "val"
    return splits.tolist()


def default_template_set(n_templates, template=None):
    template = template or CanonicalTemplate()
    return {f"bike_{i:02d}": template for i in range(n_templates)}


def make_record(sample_id, template_id, split, template, camera, pose, residuals, visibility, bound=0.25):
    kc = canonical_keypoints(template, residuals, bound)
    k3d = repose(template, kc, pose)
    kp_i = project_keypoints(camera, k3d)
    bbox = derive_bbox2d(camera, template, k3d, pose.rotation)
    kp_ib = apply_crop_points(crop_from_box(bbox, OUT_SIZE), kp_i, OUT_SIZE)
    return AnnotationRecord(
        sample_id=sample_id,
        template_id=template_id,
        split=split,
        pose=pose,
        residuals=np.asarray(residuals, dtype=float),
        keypoints_3d=k3d,
        keypoints_2d_I=kp_i,
        keypoints_2d_Ib=kp_ib,
        visibility=np.asarray(visibility, dtype=bool),
        bbox=bbox,
        camera=camera,
    )


def _sample_record(index, sample_id, template_id, split, template, camera, cfg):
    rng = np.random.default_rng([cfg.seed, 2, index])
    for _ in range(cfg.max_retries):
        pose = sample_pose(cfg.domain, rng)
        residuals = sample_residuals(cfg.residual_sigma, cfg.residual_bound, rng)
        vis = rng.random(NUM_KEYPOINTS) >= cfg.occlusion_dropout
        try:
            rec = make_record(
                sample_id, template_id, split, template, camera, pose, residuals, vis, cfg.residual_bound
            )
        except ValueError:
            continue
        u, v = rec.keypoints_2d_I[KeypointId.ground_root]
        if 0.0 <= u <= camera.width and 0.0 <= v <= camera.height:
            return rec
    raise RuntimeError(f"retry budget exhausted for sample {sample_id} after {cfg.max_retries} draws")


def generate_dataset(cfg, templates=None, camera=None):
    """Yield ``cfg.n_records`` annotation records in deterministic order.

    ``templates`` maps template id to ``CanonicalTemplate``; it must hold
    exactly ``cfg.n_templates`` entries (default: copies of the mean template).
    """
    camera = camera or Camera()
    templates = templates if templates is not None else default_template_set(cfg.n_templates)
    if len(templates) != cfg.n_templates:
        raise ValueError(f"config asks for {cfg.n_templates} templates but {len(templates)} were given")
    splits = split_assignment(cfg.n_records, cfg.train_fraction, cfg.seed)
    index = 0
    for template_id, template in templates.items():
        for j in range(cfg.samples_per_template):
            yield _sample_record(
                index, f"{template_id}_{j:05d}", template_id, splits[index], template, camera, cfg
            )
            index += 1


def audit_record(rec, tol=1e-6):
    """Return a list of invariant violations for one record (empty when valid)."""
    problems = []
    kp_i = project_keypoints(rec.camera, rec.keypoints_3d)
    if not np.allclose(kp_i, rec.keypoints_2d_I, atol=tol, rtol=0):
        problems.append("kp2d_i does not match projection of kp3d")
    kp_ib = apply_crop_points(crop_from_box(rec.bbox, OUT_SIZE), rec.keypoints_2d_I, OUT_SIZE)
    if not np.allclose(kp_ib, rec.keypoints_2d_Ib, atol=tol, rtol=0):
        problems.append("kp2d_ib does not match crop of kp2d_i")
    if rec.split not in ("train", "val"):
        problems.append(f"bad split {rec.split!r}")
    return problems


class AnnotationFormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def write_records(path, records, templates=None, camera=None):
    """Write a header line followed by one JSON record per line.

    Returns the number of records written.
    """
    camera = camera or Camera()
    header = {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "camera": camera.to_dict(),
        "template_ids": list(templates or {}),
        "templates": {k: t.to_dict() for k, t in (templates or {}).items()},
    }
    n = 0
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")
            n += 1
    return n


_ARRAY_FIELDS = {"residuals": 3, "kp3d": 3, "kp2d_i": 2, "kp2d_ib": 2}
_REQUIRED = ("sample_id", "template_id", "split", "pose", "residuals", "kp3d", "kp2d_i", "kp2d_ib", "vis", "bbox", "camera")


def record_from_dict(d, line=None):
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise AnnotationFormatError(f"missing field(s): {', '.join(missing)}", line)
    missing_pose = [k for k in POSE_FIELDS if k not in d["pose"]]
    if missing_pose:
        raise AnnotationFormatError(f"missing field(s): pose.{', pose.'.join(missing_pose)}", line)
    arrays = {}
    for name, width in _ARRAY_FIELDS.items():
        a = np.asarray(d[name], dtype=float)
        if a.shape != (NUM_KEYPOINTS, width):
            got = a.shape[0] if a.ndim >= 1 else 0
            raise AnnotationFormatError(
                f"field {name}: expected {NUM_KEYPOINTS} entries of width {width}, got shape {a.shape}"
                + (f" (missing {NUM_KEYPOINTS - got} keypoint(s))" if got < NUM_KEYPOINTS else ""),
                line,
            )
        arrays[name] = a
    if len(d["vis"]) != NUM_KEYPOINTS:
        raise AnnotationFormatError(f"field vis: expected {NUM_KEYPOINTS} entries, got {len(d['vis'])}", line)
    if len(d["bbox"]) != 4:
        raise AnnotationFormatError("field bbox: expected 4 numbers", line)
    try:
        return AnnotationRecord(
            sample_id=str(d["sample_id"]),
            template_id=str(d["template_id"]),
            split=str(d["split"]),
            pose=Pose8D.from_dict(d["pose"]),
            residuals=arrays["residuals"],
            keypoints_3d=arrays["kp3d"],
            keypoints_2d_I=arrays["kp2d_i"],
            keypoints_2d_Ib=arrays["kp2d_ib"],
            visibility=np.asarray(d["vis"], dtype=bool),
            bbox=BBox2D(*(float(x) for x in d["bbox"])),
            camera=Camera.from_dict(d["camera"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationFormatError(f"invalid record: {exc}", line) from None


def read_header(path):
    with open(path) as fh:
        first = fh.readline()
    return _parse_header(first)


def _parse_header(line_text):
    try:
        header = json.loads(line_text)
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"malformed header ({exc.msg})", 1) from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA_NAME:
        raise AnnotationFormatError(f"not an annotation file (schema {header.get('schema')!r})", 1)
    if header.get("version") != SCHEMA_VERSION:
        raise AnnotationFormatError(f"unknown schema version {header.get('version')!r}", 1)
    return header


def read_records(path):
    """Read an annotation file. Returns ``(header, records)``.

    Raises:
        AnnotationFormatError: on malformed lines (with the 1-based line number),
            missing fields or an unknown schema version.
    """
    records = []
    with open(path) as fh:
        header = _parse_header(fh.readline())
        for lineno, text in enumerate(fh, start=2):
            if not text.strip():
                continue
            try:
                d = json.loads(text)
            except json.JSONDecodeError as exc:
                raise AnnotationFormatError(f"malformed record ({exc.msg})", lineno) from None
            records.append(record_from_dict(d, lineno))
    return header, records


def templates_from_header(header):
    return {k: CanonicalTemplate.from_dict(v) for k, v in header.get("templates", {}).items()}
