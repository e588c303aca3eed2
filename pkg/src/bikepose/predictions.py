"""Prediction files: one fitted pose per line, keyed by sample id."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import NUM_KEYPOINTS, Pose8D
from .synth import SCHEMA_NAME as ANNOTATION_SCHEMA
from .synth import AnnotationFormatError, read_records

SCHEMA_NAME = "bikepose/predictions"
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Prediction:
    sample_id: str
    pose: Optional[Pose8D]
    residuals: Optional[np.ndarray] = None
    objective: Optional[float] = None
    converged: Optional[bool] = None
    iterations: Optional[int] = None
    error: Optional[str] = None

    @property
    def failed(self):
        return self.error is not None or self.pose is None

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "pose": None if self.pose is None else self.pose.to_dict(),
            "residuals": None if self.residuals is None else np.asarray(self.residuals).tolist(),
            "objective": self.objective,
            "converged": self.converged,
            "iterations": self.iterations,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d, line=None):
        try:
            res = d.get("residuals")
            if res is not None:
                res = np.asarray(res, dtype=float)
                if res.shape != (NUM_KEYPOINTS, 3):
                    raise ValueError(f"residuals must be 11x3, got {res.shape}")
            pose = d.get("pose")
            return cls(
                sample_id=str(d["sample_id"]),
                pose=None if pose is None else Pose8D.from_dict(pose),
                residuals=res,
                objective=d.get("objective"),
                converged=d.get("converged"),
                iterations=d.get("iterations"),
                error=d.get("error"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationFormatError(f"invalid prediction: {exc}", line) from None


def write_predictions(path, predictions, meta=None):
    header = {"schema": SCHEMA_NAME, "version": SCHEMA_VERSION, **(meta or {})}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for p in predictions:
            fh.write(json.dumps(p.to_dict()) + "\n")


def read_predictions(path):
    """Read a predictions file; an annotation file is accepted as perfect predictions."""
    with open(path) as fh:
        first = fh.readline()
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise AnnotationFormatError(f"malformed header ({exc.msg})", 1) from None
    if header.get("schema") == ANNOTATION_SCHEMA:
        _, records = read_records(path)
        return [Prediction(r.sample_id, r.pose, r.residuals) for r in records]
    if header.get("schema") != SCHEMA_NAME:
        raise AnnotationFormatError(f"not a predictions file (schema {header.get('schema')!r})", 1)
    if header.get("version") != SCHEMA_VERSION:
        raise AnnotationFormatError(f"unknown schema version {header.get('version')!r}", 1)
    out = []
    with open(path) as fh:
        fh.readline()
        for lineno, text in enumerate(fh, start=2):
            if not text.strip():
                continue
            try:
                d = json.loads(text)
            except json.JSONDecodeError as exc:
                raise AnnotationFormatError(f"malformed prediction ({exc.msg})", lineno) from None
            out.append(Prediction.from_dict(d, lineno))
    return out
