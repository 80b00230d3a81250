"""Oriented 3D boxes and exact rotated-rectangle BEV geometry.

IoU between rotated boxes is computed by clipping one rectangle against
the other (Sutherland-Hodgman) and taking the shoelace area of the
resulting convex polygon.  NMS is plain greedy suppression on that IoU.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

CLASS_NAMES = ("car", "pedestrian", "cyclist")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}


def normalize_yaw(yaw: float) -> float:
    """Wrap into (-pi, pi]."""
    y = math.fmod(yaw + math.pi, 2.0 * math.pi)
    if y <= 0.0:
        y += 2.0 * math.pi
    return y - math.pi


@dataclass
class Box3D:
    """Oriented box: center (cx, cy, cz), size (l, w, h), yaw about +z."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float
    class_id: int = 0
    velocity: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.l <= 0 or self.w <= 0 or self.h <= 0:
            raise ContractError("box sizes must be positive")
        self.yaw = normalize_yaw(self.yaw)

    def bev_corners(self) -> np.ndarray:
        """(4, 2) corner coordinates of the rotated BEV rectangle, CCW."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        half = np.array([[self.l / 2, self.w / 2], [-self.l / 2, self.w / 2],
                         [-self.l / 2, -self.w / 2], [self.l / 2, -self.w / 2]])
        rot = np.array([[c, -s], [s, c]])
        return half @ rot.T + np.array([self.cx, self.cy])

    def bev_area(self) -> float:
        return self.l * self.w


@dataclass
class Detection:
    box: Box3D
    score: float
    frame_id: str = ""


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a CCW polygon, 0 for < 3 vertices."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip `subject` against convex CCW `clipper`."""
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            return np.zeros((0, 2))
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = (b[0] - a[0], b[1] - a[1])
        inputs, output = output, []
        prev = inputs[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
        for cur in inputs:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            if cur_in != prev_in:
                # segment crosses the edge; add the intersection point
                dx, dy = cur[0] - prev[0], cur[1] - prev[1]
                denom = edge[0] * dy - edge[1] * dx
                t = (edge[1] * (prev[0] - a[0]) - edge[0] * (prev[1] - a[1])) / denom
                output.append((prev[0] + t * dx, prev[1] + t * dy))
            if cur_in:
                output.append((cur[0], cur[1]))
            prev, prev_in = cur, cur_in
    return np.asarray(output) if output else np.zeros((0, 2))


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    """Exact BEV IoU of two rotated boxes, in [0, 1]."""
    ca, cb = a.bev_corners(), b.bev_corners()
    # cheap reject: axis-aligned bounds do not overlap
    if (ca[:, 0].max() <= cb[:, 0].min() or cb[:, 0].max() <= ca[:, 0].min()
            or ca[:, 1].max() <= cb[:, 1].min() or cb[:, 1].max() <= ca[:, 1].min()):
        return 0.0
    inter = polygon_area(clip_polygon(ca, cb))
    union = a.bev_area() + b.bev_area() - inter
    if union <= 0.0:
        return 0.0
    return float(min(1.0, max(0.0, inter / union)))


def nms_rotated(detections: list[Detection], iou_threshold: float,
                max_keep: int | None = None) -> list[Detection]:
    """Greedy rotated-BEV suppression; returns survivors sorted by score."""
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, i))
    keep: list[int] = []
    for i in order:
        if max_keep is not None and len(keep) >= max_keep:
            break
        di = detections[i]
        if all(rotated_iou_bev(di.box, detections[j].box) < iou_threshold for j in keep):
            keep.append(i)
    return [detections[i] for i in keep]


def point_in_rotated_box(px: np.ndarray, py: np.ndarray, box: Box3D) -> np.ndarray:
    """Vectorized membership test of BEV points in a rotated rectangle."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx, dy = np.asarray(px) - box.cx, np.asarray(py) - box.cy
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (np.abs(u) <= box.l / 2) & (np.abs(v) <= box.w / 2)
