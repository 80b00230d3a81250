"""Anchor-based detection head over the fused BEV map.

Per BEV cell there are two yaw hypotheses (0, pi/2) per class.  1x1 convs
predict one objectness logit, seven box deltas (sin-difference yaw
encoding) and a two-way direction logit per anchor.  Training combines a
focal classification loss, Smooth-L1 box regression and a direction
cross-entropy; decoding inverts the deltas and applies greedy rotated NMS.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bev import BEVFeatureMap
from .boxes import Box3D, Detection, nms_rotated, normalize_yaw, rotated_iou_bev
from .errors import ShapeError
from .nn import Conv
from .pillars import GridConfig

ANCHOR_YAWS = (0.0, math.pi / 2)
NUM_DELTAS = 7


@dataclass(frozen=True)
class ClassAnchor:
    """Anchor template for one class: size plus match/unmatch IoU bounds."""

    length: float
    width: float
    height: float
    match_iou: float
    unmatch_iou: float

    def __post_init__(self):
        if self.match_iou <= self.unmatch_iou:
            raise ShapeError("match threshold must exceed unmatch threshold")

    @property
    def center_z(self) -> float:
        return self.height / 2.0


DEFAULT_ANCHORS = {
    "car": ClassAnchor(4.2, 1.8, 1.6, 0.6, 0.45),
    "pedestrian": ClassAnchor(0.6, 0.6, 1.7, 0.5, 0.35),
    "cyclist": ClassAnchor(1.8, 0.6, 1.7, 0.5, 0.35),
}


@dataclass
class Anchors:
    """Flat anchor arrays; index order is (class, yaw, row, col) C-order."""

    cx: np.ndarray
    cy: np.ndarray
    cz: np.ndarray
    length: np.ndarray
    width: np.ndarray
    height: np.ndarray
    yaw: np.ndarray
    class_id: np.ndarray
    match_iou: np.ndarray
    unmatch_iou: np.ndarray

    def __len__(self):
        return self.cx.shape[0]

    def box(self, i: int) -> Box3D:
        return Box3D(float(self.cx[i]), float(self.cy[i]), float(self.cz[i]),
                     float(self.length[i]), float(self.width[i]), float(self.height[i]),
                     float(self.yaw[i]), class_id=int(self.class_id[i]))


def make_anchors(grid: GridConfig, templates: dict[str, ClassAnchor],
                 class_names) -> Anchors:
    """One anchor per (class, yaw, cell); centers at cell centers."""
    h, w = grid.height, grid.width
    rows, cols = np.mgrid[0:h, 0:w]
    cell_x, cell_y = grid.cell_center(rows, cols)
    fields = {k: [] for k in ("cx", "cy", "cz", "length", "width", "height",
                              "yaw", "class_id", "match_iou", "unmatch_iou")}
    for cid, name in enumerate(class_names):
        t = templates[name]
        for yaw in ANCHOR_YAWS:
            n = h * w
            fields["cx"].append(cell_x.ravel())
            fields["cy"].append(cell_y.ravel())
            fields["cz"].append(np.full(n, t.center_z))
            fields["length"].append(np.full(n, t.length))
            fields["width"].append(np.full(n, t.width))
            fields["height"].append(np.full(n, t.height))
            fields["yaw"].append(np.full(n, yaw))
            fields["class_id"].append(np.full(n, cid, dtype=np.int64))
            fields["match_iou"].append(np.full(n, t.match_iou))
            fields["unmatch_iou"].append(np.full(n, t.unmatch_iou))
    return Anchors(**{k: np.concatenate(v) for k, v in fields.items()})


@dataclass
class HeadParams:
    cls_conv: Conv
    box_conv: Conv
    dir_conv: Conv
    n_classes: int

    @classmethod
    def create(cls, rng, in_channels: int, n_classes: int, dtype=np.float64) -> "HeadParams":
        a = n_classes * len(ANCHOR_YAWS)
        head = cls(cls_conv=Conv(rng, in_channels, a, k=1, stride=1, pad=0, dtype=dtype),
                   box_conv=Conv(rng, in_channels, a * NUM_DELTAS, k=1, stride=1, pad=0, dtype=dtype),
                   dir_conv=Conv(rng, in_channels, a * 2, k=1, stride=1, pad=0, dtype=dtype),
                   n_classes=n_classes)
        head.cls_conv.b.data[...] = -4.0   # rare-foreground prior keeps early focal loss sane
        return head

    def params(self, prefix: str = "head") -> dict[str, Tensor]:
        out = self.cls_conv.params(f"{prefix}.cls")
        out.update(self.box_conv.params(f"{prefix}.box"))
        out.update(self.dir_conv.params(f"{prefix}.dir"))
        return out


@dataclass
class HeadOutputs:
    """Flat per-anchor predictions aligned with `make_anchors` ordering."""

    cls_logits: Tensor      # (A,)
    box_deltas: Tensor      # (A, 7)
    dir_logits: Tensor      # (A, 2)


def head_forward(fused: BEVFeatureMap, params: HeadParams) -> HeadOutputs:
    _, h, w = fused.features.shape
    a_per_cell = params.n_classes * len(ANCHOR_YAWS)
    total = a_per_cell * h * w
    cls_map = params.cls_conv(fused.features)                   # (a, H, W)
    box_map = params.box_conv(fused.features)                   # (a*7, H, W)
    dir_map = params.dir_conv(fused.features)                   # (a*2, H, W)
    cls_flat = ad.reshape(cls_map, (total,))
    box_flat = ad.reshape(
        ad.permute(ad.reshape(box_map, (a_per_cell, NUM_DELTAS, h * w)), (0, 2, 1)),
        (total, NUM_DELTAS))
    dir_flat = ad.reshape(
        ad.permute(ad.reshape(dir_map, (a_per_cell, 2, h * w)), (0, 2, 1)),
        (total, 2))
    return HeadOutputs(cls_flat, box_flat, dir_flat)


def encode_box(gt: Box3D, anchor: Box3D) -> np.ndarray:
    """PointPillars delta encoding with sin yaw difference."""
    da = math.hypot(anchor.l, anchor.w)
    return np.array([
        (gt.cx - anchor.cx) / da,
        (gt.cy - anchor.cy) / da,
        (gt.cz - anchor.cz) / anchor.h,
        math.log(gt.l / anchor.l),
        math.log(gt.w / anchor.w),
        math.log(gt.h / anchor.h),
        math.sin(gt.yaw - anchor.yaw),
    ])


def direction_bit(gt_yaw: float, anchor_yaw: float) -> int:
    """0 when the gt heading is within +-pi/2 of the anchor, else 1."""
    return 0 if math.cos(gt_yaw - anchor_yaw) > 0 else 1


def decode_box(delta: np.ndarray, anchor: Box3D, dir_bit: int, class_id: int) -> Box3D:
    da = math.hypot(anchor.l, anchor.w)
    delta_yaw = math.asin(float(np.clip(delta[6], -1.0, 1.0)))
    yaw = anchor.yaw + delta_yaw if dir_bit == 0 else anchor.yaw + math.pi - delta_yaw
    return Box3D(
        cx=float(delta[0]) * da + anchor.cx,
        cy=float(delta[1]) * da + anchor.cy,
        cz=float(delta[2]) * anchor.h + anchor.cz,
        l=math.exp(float(delta[3])) * anchor.l,
        w=math.exp(float(delta[4])) * anchor.w,
        h=math.exp(float(delta[5])) * anchor.h,
        yaw=normalize_yaw(yaw),
        class_id=class_id,
    )


@dataclass
class AnchorTargets:
    """Per-anchor labels: 1 positive, 0 negative, -1 ignored."""

    labels: np.ndarray          # (A,)
    reg_targets: np.ndarray     # (A, 7)
    dir_targets: np.ndarray     # (A,)
    matched_gt: np.ndarray      # (A,) gt index or -1

    @property
    def num_positive(self) -> int:
        return int((self.labels == 1).sum())


def _anchor_aabb(anchors: Anchors) -> np.ndarray:
    """(A, 4) exact axis-aligned bounds (xmin, xmax, ymin, ymax)."""
    cos, sin = np.abs(np.cos(anchors.yaw)), np.abs(np.sin(anchors.yaw))
    half_x = 0.5 * (anchors.length * cos + anchors.width * sin)
    half_y = 0.5 * (anchors.length * sin + anchors.width * cos)
    return np.stack([anchors.cx - half_x, anchors.cx + half_x,
                     anchors.cy - half_y, anchors.cy + half_y], axis=1)


def assign_targets(anchors: Anchors, gts: list[Box3D]) -> AnchorTargets:
    """IoU-based anchor labeling against same-class ground truth.

    Positive when rotated-BEV IoU >= the class match threshold or when the
    anchor is the best one for a gt box; negative below the unmatch
    threshold; in-between anchors are ignored.  Empty gt -> all negative.
    """
    a = len(anchors)
    labels = np.zeros(a, dtype=np.int64)
    reg = np.zeros((a, NUM_DELTAS))
    dirs = np.zeros(a, dtype=np.int64)
    matched = np.full(a, -1, dtype=np.int64)
    if not gts:
        return AnchorTargets(labels, reg, dirs, matched)

    aabb = _anchor_aabb(anchors)
    best_iou = np.zeros(a)
    best_gt = np.full(a, -1, dtype=np.int64)
    force = {}
    for j, gt in enumerate(gts):
        corners = gt.bev_corners()
        gxmin, gymin = corners.min(axis=0)
        gxmax, gymax = corners.max(axis=0)
        cand = np.flatnonzero(
            (anchors.class_id == gt.class_id)
            & (aabb[:, 1] > gxmin) & (aabb[:, 0] < gxmax)
            & (aabb[:, 3] > gymin) & (aabb[:, 2] < gymax))
        gt_best, gt_best_iou = -1, 1e-6
        for i in cand:
            iou = rotated_iou_bev(anchors.box(int(i)), gt)
            if iou > best_iou[i]:
                best_iou[i] = iou
                best_gt[i] = j
            if iou > gt_best_iou:
                gt_best, gt_best_iou = int(i), iou
        if gt_best >= 0:
            force[gt_best] = j

    pos = best_iou >= anchors.match_iou
    ignore = (~pos) & (best_iou >= anchors.unmatch_iou)
    labels[ignore] = -1
    labels[pos] = 1
    for i, j in force.items():
        labels[i] = 1
        best_gt[i] = j
    for i in np.flatnonzero(labels == 1):
        gt = gts[int(best_gt[i])]
        anc = anchors.box(int(i))
        reg[i] = encode_box(gt, anc)
        dirs[i] = direction_bit(gt.yaw, anc.yaw)
        matched[i] = best_gt[i]
    return AnchorTargets(labels, reg, dirs, matched)


@dataclass
class RpnLossWeights:
    cls: float = 1.0
    box: float = 2.0
    direction: float = 0.2
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    huber_beta: float = 1.0 / 9.0


@dataclass
class RpnLossCache:
    """Constant tensors derived from one frame's anchor targets."""

    pos: Tensor
    neg: Tensor
    pos_rows: Tensor
    reg_targets: Tensor
    onehot: Tensor
    norm: float

    @classmethod
    def create(cls, targets: AnchorTargets, dtype) -> "RpnLossCache":
        labels = targets.labels
        pos = (labels == 1).astype(dtype)
        onehot = np.zeros((len(labels), 2), dtype=dtype)
        onehot[np.arange(len(labels)), targets.dir_targets] = 1.0
        onehot *= pos[:, None]
        return cls(
            pos=ad.tensor(pos, dtype=dtype),
            neg=ad.tensor((labels == 0).astype(dtype), dtype=dtype),
            pos_rows=ad.tensor(np.repeat(pos[:, None], NUM_DELTAS, axis=1), dtype=dtype),
            reg_targets=ad.tensor(targets.reg_targets, dtype=dtype),
            onehot=ad.tensor(onehot, dtype=dtype),
            norm=1.0 / max(1, targets.num_positive),
        )


def rpn_loss(preds: HeadOutputs, targets: AnchorTargets,
             weights: RpnLossWeights | None = None,
             cache: RpnLossCache | None = None) -> tuple[Tensor, dict]:
    """w_cls * focal + w_box * smooth-L1 + w_dir * cross-entropy.

    All terms are normalized by the positive count (min 1); with zero
    positives only the classification term remains.
    """
    wts = weights or RpnLossWeights()
    if cache is None:
        cache = RpnLossCache.create(targets, preds.cls_logits.data.dtype)
    norm = cache.norm

    p = ad.clamp(ad.sigmoid(preds.cls_logits), 1e-6, 1.0 - 1e-6)
    one_minus_p = ad.add_const(ad.neg(p), 1.0)
    pos_term = ad.mul(cache.pos, ad.mul(ad.power(one_minus_p, wts.focal_gamma), ad.log(p)))
    neg_term = ad.mul(cache.neg, ad.mul(ad.power(p, wts.focal_gamma), ad.log(one_minus_p)))
    cls_loss = ad.scale(
        ad.add(ad.scale(ad.reduce_sum(pos_term), wts.focal_alpha),
               ad.scale(ad.reduce_sum(neg_term), 1.0 - wts.focal_alpha)),
        -norm)

    diff = ad.sub(preds.box_deltas, cache.reg_targets)
    box_loss = ad.scale(ad.reduce_sum(ad.mul(cache.pos_rows, ad.huber(diff, wts.huber_beta))),
                        norm)

    lse = ad.logsumexp_rows(preds.dir_logits)
    picked = ad.reduce_sum(ad.mul(preds.dir_logits, cache.onehot), axis=1)
    dir_loss = ad.scale(ad.reduce_sum(ad.mul(cache.pos, ad.sub(lse, picked))), norm)

    total = ad.add(ad.add(ad.scale(cls_loss, wts.cls), ad.scale(box_loss, wts.box)),
                   ad.scale(dir_loss, wts.direction))
    parts = {"cls": cls_loss.item(), "box": box_loss.item(), "dir": dir_loss.item()}
    return total, parts


def final_loss(rpn: Tensor, shape: Tensor | None, alpha: float) -> Tensor:
    """Composite objective: detection loss plus alpha-weighted shape loss."""
    if alpha < 0:
        raise ShapeError("alpha must be >= 0")
    if shape is None or alpha == 0.0:
        return rpn
    return ad.add(rpn, ad.scale(shape, alpha))


def decode_and_nms(preds: HeadOutputs, anchors: Anchors, score_thr: float,
                   nms_iou: float, max_dets: int, frame_id: str = "",
                   pre_nms_top_k: int = 1024) -> list[Detection]:
    """Invert deltas on confident anchors, then greedy rotated NMS."""
    if not 0.0 < score_thr < 1.0 or not 0.0 < nms_iou < 1.0:
        raise ShapeError("thresholds must lie in (0, 1)")
    logits = preds.cls_logits.data
    scores = 1.0 / (1.0 + np.exp(-logits))
    keep = np.flatnonzero(scores >= score_thr)
    if keep.size > pre_nms_top_k:
        keep = keep[np.argsort(-scores[keep], kind="stable")[:pre_nms_top_k]]
    dets = []
    dir_bits = np.argmax(preds.dir_logits.data, axis=1)
    for i in keep:
        i = int(i)
        box = decode_box(preds.box_deltas.data[i], anchors.box(i),
                         int(dir_bits[i]), int(anchors.class_id[i]))
        dets.append(Detection(box, float(scores[i]), frame_id))
    return nms_rotated(dets, nms_iou, max_keep=max_dets)
