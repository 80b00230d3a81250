"""Deterministic synthetic paired radar/LiDAR scene generator.

Scenes hold non-overlapping boxes of three road-user classes with
class-conditional kinematics and radar reflectivity: cars span 0-15 m/s
with a large stationary fraction and the strongest returns, pedestrians
stay under 2 m/s with the weakest returns, cyclists sit in between.
LiDAR samples box surfaces (denser up close) plus ground clutter; radar
returns are sparse with doppler measured along the line of sight, both
raw (relative) and ego-motion compensated (absolute).

One frame is one JSON document; a dataset is a directory of
``NNNNNN.json`` frames plus ``manifest.json``.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import Box3D, CLASS_IDS, CLASS_NAMES, rotated_iou_bev
from .errors import DataError, FrameParseError

CLASS_SIZE_PRIORS = {
    "car": (4.2, 1.8, 1.6),
    "pedestrian": (0.6, 0.6, 1.7),
    "cyclist": (1.8, 0.6, 1.7),
}
CLASS_SPEED_RANGES = {"car": (0.0, 15.0), "pedestrian": (0.0, 2.0), "cyclist": (1.0, 8.0)}
CAR_STATIONARY_FRACTION = 0.5
CLASS_RCS_MEANS = {"car": 15.0, "cyclist": 5.0, "pedestrian": -5.0}


@dataclass(frozen=True)
class SceneSpec:
    """Generator configuration; (seed, frame_id) fully determine a frame."""

    seed: int
    car_count: tuple[int, int] = (1, 3)
    pedestrian_count: tuple[int, int] = (0, 2)
    cyclist_count: tuple[int, int] = (0, 2)
    ego_speed: tuple[float, float] = (0.0, 8.0)
    x_range: tuple[float, float] = (0.0, 25.6)
    y_range: tuple[float, float] = (-12.8, 12.8)
    clutter_rate: float = 20.0
    lidar_points_per_box: float = 600.0     # scaled by 1/range
    ground_points: int = 400
    position_noise: float = 0.02
    velocity_noise: float = 0.1
    rcs_noise: float = 2.0
    placement_margin: float = 1.5
    max_placement_retries: int = 50

    def __post_init__(self):
        for counts in (self.car_count, self.pedestrian_count, self.cyclist_count):
            if counts[0] < 0 or counts[1] < counts[0]:
                raise DataError("object count ranges must be non-negative and ordered")


@dataclass
class Frame:
    """One paired radar+LiDAR sample with ground truth."""

    frame_id: str
    radar: np.ndarray           # (n, 6): x, y, z, v_r, v_a, rcs
    lidar: np.ndarray           # (m, 4): x, y, z, intensity
    labels: list[Box3D]
    ego_velocity: np.ndarray    # (2,)


def _place_boxes(rng, spec: SceneSpec) -> list[Box3D]:
    wanted = []
    for name, counts in (("car", spec.car_count), ("pedestrian", spec.pedestrian_count),
                         ("cyclist", spec.cyclist_count)):
        n = int(rng.integers(counts[0], counts[1] + 1))
        wanted.extend([name] * n)
    boxes: list[Box3D] = []
    for name in wanted:
        l0, w0, h0 = CLASS_SIZE_PRIORS[name]
        placed = False
        for _ in range(spec.max_placement_retries):
            l = l0 * rng.uniform(0.9, 1.1)
            w = w0 * rng.uniform(0.9, 1.1)
            h = h0 * rng.uniform(0.95, 1.05)
            m = spec.placement_margin
            cx = rng.uniform(spec.x_range[0] + m, spec.x_range[1] - m)
            cy = rng.uniform(spec.y_range[0] + m, spec.y_range[1] - m)
            yaw = rng.uniform(-math.pi, math.pi)
            lo, hi = CLASS_SPEED_RANGES[name]
            if name == "car" and rng.uniform() < CAR_STATIONARY_FRACTION:
                speed = 0.0
            else:
                speed = rng.uniform(lo, hi)
            box = Box3D(cx, cy, h / 2.0, l, w, h, yaw, class_id=CLASS_IDS[name],
                        velocity=(speed * math.cos(yaw), speed * math.sin(yaw)))
            if all(rotated_iou_bev(box, other) == 0.0 for other in boxes):
                boxes.append(box)
                placed = True
                break
        if not placed:
            warnings.warn(f"could not place a {name} without overlap; dropping it")
    return boxes


def _sample_box_surface(rng, box: Box3D, n: int) -> np.ndarray:
    """Uniform points on the four side faces and the top, in world frame."""
    faces = [  # (axis fixed, sign, area)
        ("x", 1, box.w * box.h), ("x", -1, box.w * box.h),
        ("y", 1, box.l * box.h), ("y", -1, box.l * box.h),
        ("z", 1, box.l * box.w),
    ]
    areas = np.array([f[2] for f in faces])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = []
    for (axis, sign, _), k in zip(faces, counts):
        if k == 0:
            continue
        u = rng.uniform(-0.5, 0.5, size=(k, 2))
        local = np.zeros((k, 3))
        if axis == "x":
            local[:, 0] = sign * box.l / 2
            local[:, 1] = u[:, 0] * box.w
            local[:, 2] = (u[:, 1] + 0.5) * box.h - box.h / 2
        elif axis == "y":
            local[:, 1] = sign * box.w / 2
            local[:, 0] = u[:, 0] * box.l
            local[:, 2] = (u[:, 1] + 0.5) * box.h - box.h / 2
        else:
            local[:, 0] = u[:, 0] * box.l
            local[:, 1] = u[:, 1] * box.w
            local[:, 2] = box.h / 2
        pts.append(local)
    local = np.concatenate(pts) if pts else np.zeros((0, 3))
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = box.cx + local[:, 0] * c - local[:, 1] * s
    world[:, 1] = box.cy + local[:, 0] * s + local[:, 1] * c
    world[:, 2] = box.cz + local[:, 2]
    return world


def _line_of_sight(xy: np.ndarray) -> np.ndarray:
    rng_m = np.linalg.norm(xy, axis=1, keepdims=True)
    return xy / np.maximum(rng_m, 1e-9)


def generate_frame(spec: SceneSpec, frame_id: int) -> Frame:
    """Build one deterministic frame from (spec.seed, frame_id)."""
    rng = np.random.default_rng([spec.seed, int(frame_id)])
    ego_speed = rng.uniform(*spec.ego_speed)
    ego_velocity = np.array([ego_speed, 0.0])
    boxes = _place_boxes(rng, spec)

    lidar_rows = []
    for box in boxes:
        rng_m = max(2.0, math.hypot(box.cx, box.cy))
        n = max(5, int(round(spec.lidar_points_per_box / rng_m)))
        pts = _sample_box_surface(rng, box, n)
        pts += rng.normal(0.0, spec.position_noise, size=pts.shape)
        intensity = rng.uniform(0.3, 0.9, size=(pts.shape[0], 1))
        lidar_rows.append(np.concatenate([pts, intensity], axis=1))
    if spec.ground_points:
        gx = rng.uniform(spec.x_range[0], spec.x_range[1], spec.ground_points)
        gy = rng.uniform(spec.y_range[0], spec.y_range[1], spec.ground_points)
        gz = rng.normal(0.0, 0.02, spec.ground_points)
        gi = rng.uniform(0.05, 0.2, spec.ground_points)
        lidar_rows.append(np.stack([gx, gy, gz, gi], axis=1))
    lidar = np.concatenate(lidar_rows) if lidar_rows else np.zeros((0, 4))

    radar_rows = []
    for box in boxes:
        mean = 0.8 * box.bev_area()
        k = int(rng.poisson(mean))
        if k == 0:
            continue
        u = rng.uniform(-0.5, 0.5, size=(k, 2))
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        px = box.cx + u[:, 0] * box.l * c - u[:, 1] * box.w * s
        py = box.cy + u[:, 0] * box.l * s + u[:, 1] * box.w * c
        pz = rng.uniform(0.1, box.h, size=k)
        xy = np.stack([px, py], axis=1) + rng.normal(0, spec.position_noise, (k, 2))
        los = _line_of_sight(xy)
        v_obj = np.asarray(box.velocity)
        va_clean = los @ v_obj
        vr_clean = va_clean - los @ ego_velocity
        v_a = va_clean + rng.normal(0, spec.velocity_noise, k)
        v_r = vr_clean + rng.normal(0, spec.velocity_noise, k)
        rcs = CLASS_RCS_MEANS[CLASS_NAMES[box.class_id]] + rng.normal(0, spec.rcs_noise, k)
        radar_rows.append(np.stack([xy[:, 0], xy[:, 1], pz, v_r, v_a, rcs], axis=1))
    n_clutter = int(rng.poisson(spec.clutter_rate))
    if n_clutter:
        cx = rng.uniform(spec.x_range[0], spec.x_range[1], n_clutter)
        cy = rng.uniform(spec.y_range[0], spec.y_range[1], n_clutter)
        cz = rng.uniform(-0.2, 2.0, n_clutter)
        xy = np.stack([cx, cy], axis=1)
        los = _line_of_sight(xy)
        v_a = rng.normal(0, spec.velocity_noise, n_clutter)
        v_r = v_a - los @ ego_velocity + rng.normal(0, spec.velocity_noise, n_clutter)
        rcs = rng.normal(0.0, 6.0, n_clutter)
        radar_rows.append(np.stack([cx, cy, cz, v_r, v_a, rcs], axis=1))
    radar = np.concatenate(radar_rows) if radar_rows else np.zeros((0, 6))

    return Frame(frame_id=f"{int(frame_id):06d}",
                 radar=radar.astype(np.float32),
                 lidar=lidar.astype(np.float32),
                 labels=boxes,
                 ego_velocity=ego_velocity.astype(np.float32))


# -- frame file format ------------------------------------------------------

def _f32list(arr) -> list:
    return [float(v) for v in np.asarray(arr, dtype=np.float32).ravel()]


def frame_to_dict(frame: Frame) -> dict:
    return {
        "frame_id": frame.frame_id,
        "ego_velocity": _f32list(frame.ego_velocity),
        "radar": [_f32list(row) for row in frame.radar],
        "lidar": [_f32list(row) for row in frame.lidar],
        "labels": [{
            "class": CLASS_NAMES[b.class_id],
            "center": _f32list([b.cx, b.cy, b.cz]),
            "size": _f32list([b.l, b.w, b.h]),
            "yaw": float(np.float32(b.yaw)),
            "velocity": _f32list(b.velocity),
        } for b in frame.labels],
    }


def write_frame(path: str, frame: Frame) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(frame_to_dict(frame), f, sort_keys=True, separators=(",", ":"))
        f.write("\n")


def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise FrameParseError(f"{where}: missing required key {key!r}")
    return mapping[key]


def frame_from_dict(doc: dict, where: str = "frame") -> Frame:
    frame_id = _require(doc, "frame_id", where)
    ego = np.asarray(_require(doc, "ego_velocity", where), dtype=np.float32)
    radar_rows = _require(doc, "radar", where)
    lidar_rows = _require(doc, "lidar", where)
    radar = np.asarray(radar_rows, dtype=np.float32).reshape(-1, 6) \
        if radar_rows else np.zeros((0, 6), dtype=np.float32)
    lidar = np.asarray(lidar_rows, dtype=np.float32).reshape(-1, 4) \
        if lidar_rows else np.zeros((0, 4), dtype=np.float32)
    labels = []
    for i, lab in enumerate(_require(doc, "labels", where)):
        ctx = f"{where}.labels[{i}]"
        name = _require(lab, "class", ctx)
        if name not in CLASS_IDS:
            raise FrameParseError(f"{ctx}: unknown class {name!r}")
        center = _require(lab, "center", ctx)
        size = _require(lab, "size", ctx)
        yaw = _require(lab, "yaw", ctx)
        velocity = _require(lab, "velocity", ctx)
        labels.append(Box3D(*(float(v) for v in center), *(float(v) for v in size),
                            float(yaw), class_id=CLASS_IDS[name],
                            velocity=tuple(float(v) for v in velocity)))
    return Frame(frame_id=str(frame_id), radar=radar, lidar=lidar,
                 labels=labels, ego_velocity=ego)


def read_frame(path: str) -> Frame:
    try:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise FrameParseError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict):
        raise FrameParseError(f"{path}: top-level document must be an object")
    return frame_from_dict(doc, where=os.path.basename(path))


# -- dataset directory ------------------------------------------------------

MANIFEST_NAME = "manifest.json"


def write_dataset(out_dir: str, spec: SceneSpec, n_frames: int,
                  train_fraction: float = 0.8) -> dict:
    """Generate frames under out_dir and write the manifest; returns it."""
    os.makedirs(out_dir, exist_ok=True)
    ids = []
    for i in range(n_frames):
        frame = generate_frame(spec, i)
        write_frame(os.path.join(out_dir, f"{frame.frame_id}.json"), frame)
        ids.append(frame.frame_id)
    n_train = int(round(len(ids) * train_fraction))
    manifest = {
        "frames": ids,
        "splits": {"train": ids[:n_train], "val": ids[n_train:]},
        "seed": spec.seed,
        "spec": asdict(spec),
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    return manifest


def read_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise DataError(f"no dataset manifest at {path}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def load_frames(data_dir: str, ids: list[str]) -> list[Frame]:
    return [read_frame(os.path.join(data_dir, f"{fid}.json")) for fid in ids]
