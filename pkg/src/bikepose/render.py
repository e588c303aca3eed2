"""Static skeleton renders: image overlay and front/top/side orthographic views."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

from .model import KeypointId as K

SKELETON_EDGES = (
    (K.ground_root, K.pedal_axle),
    (K.pedal_axle, K.seat),
    (K.pedal_axle, K.rear_wheel_center),
    (K.pedal_axle, K.steering_axis_1),
    (K.steering_axis_1, K.steering_axis_2),
    (K.steering_axis_2, K.left_handle),
    (K.steering_axis_2, K.right_handle),
    (K.steering_axis_1, K.forward_wheel_centre),
    (K.pedal_axle, K.pedal_left),
    (K.pedal_axle, K.pedal_right),
)

EDGE_COLOR = (40, 160, 40)
POINT_COLOR = (220, 30, 30)
HIDDEN_COLOR = (120, 120, 120)
POINT_RADIUS = 3


def _draw_skeleton(draw, uv, visibility=None):
    vis = np.ones(len(uv), bool) if visibility is None else np.asarray(visibility, bool)
    for a, b in SKELETON_EDGES:
        draw.line([tuple(uv[a]), tuple(uv[b])], fill=EDGE_COLOR, width=2)
    for i, (u, v) in enumerate(uv):
        color = POINT_COLOR if vis[i] else HIDDEN_COLOR
        r = POINT_RADIUS
        draw.ellipse([u - r, v - r, u + r, v + r], fill=color)


def render_overlay(kp2d, visibility=None, size=(512, 512), background=None):
    """Projected skeleton over a blank (white) or supplied background image."""
    if background is not None:
        img = Image.open(background).convert("RGB").resize(size)
    else:
        img = Image.new("RGB", size, (255, 255, 255))
    # Quantise so identical keypoints always rasterise identically.
    uv = np.round(np.asarray(kp2d, dtype=float), 3)
    _draw_skeleton(ImageDraw.Draw(img), uv, visibility)
    return img


def orthographic_views(k3d, panel=256, extent=1.6):
    """Front (X-Y), top (X-Z) and side (Z-Y) views centred on ground_root.

    ``extent`` is the half-width in meters shown by each panel.
    """
    rel = np.asarray(k3d, dtype=float) - np.asarray(k3d)[K.ground_root]
    s = panel / (2.0 * extent)
    img = Image.new("RGB", (3 * panel, panel), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    # (horizontal axis, vertical axis); Y points down so it maps straight to rows.
    views = ((0, 1), (0, 2), (2, 1))
    for k, (h, v) in enumerate(views):
        uv = np.stack([rel[:, h] * s + panel / 2 + k * panel, rel[:, v] * s + panel * 0.75], axis=1)
        if v == 2:
            uv[:, 1] = panel / 2 - rel[:, 2] * s
        _draw_skeleton(draw, np.round(uv, 3))
        draw.rectangle([k * panel, 0, (k + 1) * panel - 1, panel - 1], outline=(0, 0, 0))
        draw.text((k * panel + 4, 4), ("front", "top", "side")[k], fill=(0, 0, 0))
    return img
