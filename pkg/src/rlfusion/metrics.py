"""Detection metrics: class-wise 41-point interpolated AP and mAP.

Matching is greedy in descending score against the unmatched ground-truth
box of the same class with the highest rotated-BEV IoU at or above the
class threshold, within each frame.  Two evaluation regions are reported:
the full grid and a forward corridor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box3D, CLASS_NAMES, Detection, rotated_iou_bev


@dataclass
class EvalConfig:
    iou_thresholds: dict[str, float] = field(
        default_factory=lambda: {"car": 0.5, "pedestrian": 0.25, "cyclist": 0.25})
    corridor_x: tuple[float, float] = (0.0, 25.6)
    corridor_y: tuple[float, float] = (-4.0, 4.0)
    recall_points: int = 41

    def __post_init__(self):
        for name, thr in self.iou_thresholds.items():
            if not 0.0 < thr <= 1.0:
                raise ValueError(f"IoU threshold for {name} must be in (0, 1]")


def center_in_region(box: Box3D, x_bounds, y_bounds) -> bool:
    return (x_bounds[0] <= box.cx <= x_bounds[1]
            and y_bounds[0] <= box.cy <= y_bounds[1])


def match_frame(dets: list[Detection], gts: list[Box3D], iou_thr: float):
    """Greedy per-frame matching; returns tp flags aligned with score-sorted dets."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    flags = []
    for i in order:
        best, best_iou = -1, iou_thr
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou_bev(dets[i].box, gt)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            flags.append((dets[i].score, True))
        else:
            flags.append((dets[i].score, False))
    return flags


def average_precision(dets_by_frame: dict[str, list[Detection]],
                      gts_by_frame: dict[str, list[Box3D]],
                      class_id: int, cfg: EvalConfig) -> float | None:
    """41-point interpolated AP for one class; None when the class has no GT."""
    name = CLASS_NAMES[class_id]
    thr = cfg.iou_thresholds[name]
    scored = []
    total_gt = 0
    frames = set(dets_by_frame) | set(gts_by_frame)
    for fid in frames:
        dets = [d for d in dets_by_frame.get(fid, []) if d.box.class_id == class_id]
        gts = [g for g in gts_by_frame.get(fid, []) if g.class_id == class_id]
        total_gt += len(gts)
        scored.extend(match_frame(dets, gts, thr))
    if total_gt == 0:
        warnings.warn(f"no ground truth of class {name}; AP undefined")
        return None
    scored.sort(key=lambda t: -t[0])
    tp = np.cumsum([1.0 if hit else 0.0 for _, hit in scored])
    fp = np.cumsum([0.0 if hit else 1.0 for _, hit in scored])
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, cfg.recall_points):
        mask = recall >= r - 1e-12
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / cfg.recall_points


def _filter_region(dets_by_frame, gts_by_frame, xb, yb):
    dets = {f: [d for d in ds if center_in_region(d.box, xb, yb)]
            for f, ds in dets_by_frame.items()}
    gts = {f: [g for g in gs if center_in_region(g, xb, yb)]
           for f, gs in gts_by_frame.items()}
    return dets, gts


def map_over_classes(dets_by_frame: dict[str, list[Detection]],
                     gts_by_frame: dict[str, list[Box3D]],
                     cfg: EvalConfig, region: str = "all",
                     x_bounds=None, y_bounds=None) -> dict:
    """Per-class AP plus mAP for one region ('all' or 'corridor')."""
    if region == "corridor":
        xb, yb = cfg.corridor_x, cfg.corridor_y
    elif region == "all":
        xb = x_bounds if x_bounds is not None else (-np.inf, np.inf)
        yb = y_bounds if y_bounds is not None else (-np.inf, np.inf)
    else:
        raise ValueError(f"unknown region {region!r}")
    dets, gts = _filter_region(dets_by_frame, gts_by_frame, xb, yb)
    if not any(gts.values()):
        warnings.warn(f"region {region!r} contains no ground truth")
    report = {}
    defined = []
    for cid, name in enumerate(CLASS_NAMES):
        ap = average_precision(dets, gts, cid, cfg)
        if ap is not None:
            report[name] = ap
            defined.append(ap)
    report["mAP"] = float(np.mean(defined)) if defined else 0.0
    return report


def two_region_report(dets_by_frame, gts_by_frame, cfg: EvalConfig) -> dict:
    """{'all': {...}, 'corridor': {...}} mirroring the standard table layout."""
    return {"all": map_over_classes(dets_by_frame, gts_by_frame, cfg, "all"),
            "corridor": map_over_classes(dets_by_frame, gts_by_frame, cfg, "corridor")}


def format_report(report: dict) -> str:
    """Aligned plain-text table from a two-region report."""
    cols = list(CLASS_NAMES) + ["mAP"]
    lines = [f"{'region':<10}" + "".join(f"{c:>12}" for c in cols)]
    for region, row in report.items():
        cells = "".join(f"{row.get(c, float('nan')):>12.4f}" for c in cols)
        lines.append(f"{region:<10}" + cells)
    return "\n".join(lines)
