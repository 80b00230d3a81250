"""BEV shape-awareness fusion driven by LiDAR features.

A three-conv network predicts per-class shape heatmaps from the LiDAR BEV
map.  Supervision has two parts: a penalty-reduced focal loss against
rasterized box-footprint targets (centers forced to 1), and a multi-class
contrastive loss over pre-sigmoid embeddings gathered at instance centers
that pulls same-class instances together and pushes classes apart.  The
heatmaps then enrich the radar BEV map via concat + conv.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bev import BEVFeatureMap
from .boxes import Box3D, point_in_rotated_box
from .errors import ContractError, ShapeError
from .nn import Conv
from .pillars import GridConfig

_NEG_DIAG = 1e9   # finite stand-in for -inf on the excluded diagonal


@dataclass
class ShapeHeatmaps:
    """Per-class shape scores: logits (pre-sigmoid) and probabilities."""

    logits: Tensor        # (N_cls, H, W)
    probs: Tensor         # sigmoid(logits), same shape
    tau: float

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ContractError("tau must lie in (0, 1)")


@dataclass
class ShapeTargets:
    """Rasterized footprint targets in [0, 1] with per-class center cells."""

    values: np.ndarray                       # (N_cls, H, W)
    centers: list[list[tuple[int, int]]]     # per class: (row, col) of each instance


@dataclass
class InstanceMatrix:
    """Center embeddings arranged classes x instances, plus a column-rotated twin."""

    s: Tensor            # (n_valid, M, C)
    s_prime: Tensor      # (n_valid, M, C)
    class_ids: list[int]
    max_centers: int


@dataclass
class ShapeFusionParams:
    conv1: Conv
    conv2: Conv
    conv3: Conv
    fuse: Conv
    n_classes: int
    tau: float = 0.1

    @classmethod
    def create(cls, rng, bev_channels: int, n_classes: int, hidden: int = 16,
               tau: float = 0.1, dtype=np.float64) -> "ShapeFusionParams":
        params = cls(
            conv1=Conv(rng, bev_channels, hidden, k=3, stride=1, pad=1, dtype=dtype),
            conv2=Conv(rng, hidden, hidden, k=3, stride=1, pad=1, dtype=dtype),
            conv3=Conv(rng, hidden, n_classes, k=3, stride=1, pad=1, dtype=dtype),
            fuse=Conv(rng, bev_channels + n_classes, bev_channels, k=3, stride=1,
                      pad=1, dtype=dtype),
            n_classes=n_classes,
            tau=tau,
        )
        params.conv3.b.data[...] = -4.0   # mostly-background prior
        return params

    def heatmap_params(self) -> dict[str, Tensor]:
        out = self.conv1.params("shape.conv1")
        out.update(self.conv2.params("shape.conv2"))
        out.update(self.conv3.params("shape.conv3"))
        return out

    def params(self) -> dict[str, Tensor]:
        out = self.heatmap_params()
        out.update(self.fuse.params("shape.fuse"))
        return out


def shape_network(lidar_bev: BEVFeatureMap, params: ShapeFusionParams) -> ShapeHeatmaps:
    """conv-ReLU-conv-ReLU-conv-sigmoid at input resolution."""
    h = ad.relu(params.conv1(lidar_bev.features))
    h = ad.relu(params.conv2(h))
    logits = params.conv3(h)
    return ShapeHeatmaps(logits=logits, probs=ad.sigmoid(logits), tau=params.tau)


def make_shape_targets(labels: list[Box3D], grid: GridConfig, n_classes: int) -> ShapeTargets:
    """Rasterize rotated footprints per class with a Gaussian-over-floor profile.

    Cells whose centers fall inside a box get max(0.5, exp(-r^2 / (2 sigma^2)))
    with r the distance (in cells) to the box center and sigma = diagonal / 6;
    the cell nearest the center is forced to exactly 1.  Overlaps take the
    per-cell max.  Boxes are clipped to the grid; zero-extent boxes are skipped.
    """
    h, w = grid.height, grid.width
    values = np.zeros((n_classes, h, w))
    centers: list[list[tuple[int, int]]] = [[] for _ in range(n_classes)]
    rows, cols = np.mgrid[0:h, 0:w]
    cell_x, cell_y = grid.cell_center(rows, cols)
    ps = grid.pillar_size
    for box in labels:
        if box.l * box.w < 1e-12:
            warnings.warn(f"skipping degenerate box at ({box.cx:.2f}, {box.cy:.2f})")
            continue
        n = box.class_id
        if not 0 <= n < n_classes:
            raise ContractError(f"class_id {n} outside [0, {n_classes})")
        inside = point_in_rotated_box(cell_x, cell_y, box)
        col_f = (box.cx - grid.x_range[0]) / ps - 0.5
        row_f = (box.cy - grid.y_range[0]) / ps - 0.5
        sigma = np.hypot(box.l / ps, box.w / ps) / 6.0
        r2 = (rows - row_f) ** 2 + (cols - col_f) ** 2
        gauss = np.maximum(0.5, np.exp(-r2 / (2.0 * sigma * sigma)))
        values[n] = np.where(inside, np.maximum(values[n], gauss), values[n])
        cr = int(np.clip(round(row_f), 0, h - 1))
        cc = int(np.clip(round(col_f), 0, w - 1))
        values[n, cr, cc] = 1.0
        centers[n].append((cr, cc))
    return ShapeTargets(values=values, centers=centers)


def threshold_filter(heat: ShapeHeatmaps) -> np.ndarray:
    """Boolean foreground mask (probs >= tau); diagnostic only."""
    return heat.probs.data >= heat.tau


def focal_shape_loss(heat: ShapeHeatmaps, targets: ShapeTargets,
                     gamma: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced focal loss, normalized by total instance count (min 1)."""
    t = targets.values
    if heat.probs.shape != t.shape:
        raise ShapeError("focal_shape_loss: heatmap/target shapes disagree")
    g = ad.clamp(heat.probs, 1e-6, 1.0 - 1e-6)
    pos_mask = ad.constant((t == 1.0).astype(float), like=heat.probs)
    neg_weight = ad.constant(((1.0 - t) ** beta) * (t != 1.0), like=heat.probs)
    pos_term = ad.mul(pos_mask, ad.mul(ad.power(ad.add_const(ad.neg(g), 1.0), gamma),
                                       ad.log(g)))
    neg_term = ad.mul(neg_weight, ad.mul(ad.power(g, gamma),
                                         ad.log(ad.add_const(ad.neg(g), 1.0))))
    n_inst = max(1, sum(len(c) for c in targets.centers))
    return ad.scale(ad.add(ad.reduce_sum(pos_term), ad.reduce_sum(neg_term)), -1.0 / n_inst)


def gather_instance_indicators(logits: Tensor, targets: ShapeTargets,
                               seed: int = 0) -> InstanceMatrix | None:
    """Collect the full pre-sigmoid channel vector at every center cell.

    Rows are classes with at least one instance; columns are instances padded
    to the max center count by seeded repetition of that class's own centers.
    The twin matrix is the same gather with columns rotated by one.
    Returns None when no class has a center.
    """
    n_cls, h, w = logits.shape
    valid = [n for n in range(n_cls) if targets.centers[n]]
    if not valid:
        return None
    m = max(len(targets.centers[n]) for n in valid)
    rng = np.random.default_rng([seed, 0x5EED])
    idx = np.zeros((len(valid), m), dtype=np.int64)
    for row, n in enumerate(valid):
        flat = [r * w + c for r, c in targets.centers[n]]
        if len(flat) < m:
            flat = flat + list(rng.choice(flat, size=m - len(flat), replace=True))
        idx[row] = flat
    idx_prime = np.roll(idx, -1, axis=1)
    emb = ad.transpose(ad.reshape(logits, (n_cls, h * w)))   # (H*W, N_cls)
    s = ad.reshape(ad.gather_rows(emb, idx.ravel()), (len(valid), m, n_cls))
    s_prime = ad.reshape(ad.gather_rows(emb, idx_prime.ravel()), (len(valid), m, n_cls))
    return InstanceMatrix(s=s, s_prime=s_prime, class_ids=valid, max_centers=m)


def multiclass_contrastive_loss(matrix: InstanceMatrix | None) -> Tensor:
    """Push-pull loss over instance rows.

    Pairwise row distance is the flat inner product of the (M, C) blocks
    scaled by 1/M^2; each valid row contrasts its own rotated twin against
    every other row's twin.  Fewer than two valid rows contribute 0.
    """
    if matrix is None or len(matrix.class_ids) < 2:
        return ad.tensor(np.zeros(()))
    nv, m, c = matrix.s.shape
    flat_s = ad.reshape(matrix.s, (nv, m * c))
    flat_p = ad.reshape(matrix.s_prime, (nv, m * c))
    d = ad.scale(ad.matmul(flat_s, ad.transpose(flat_p)), 1.0 / (m * m))  # (nv, nv)
    eye = np.eye(nv)
    pos = ad.reduce_sum(ad.mul(d, ad.constant(eye, like=d)), axis=1)
    off_diag = ad.add(d, ad.constant(-_NEG_DIAG * eye, like=d))
    denom = ad.logsumexp_rows(off_diag)
    return ad.neg(ad.mean(ad.sub(pos, denom)))


def shape_loss(heat: ShapeHeatmaps, targets: ShapeTargets, seed: int = 0,
               gamma: float = 2.0, beta: float = 4.0) -> tuple[Tensor, Tensor, Tensor]:
    """(total, focal_term, contrastive_term); total = focal + contrastive."""
    focal = focal_shape_loss(heat, targets, gamma=gamma, beta=beta)
    contrast = multiclass_contrastive_loss(
        gather_instance_indicators(heat.logits, targets, seed=seed))
    return ad.add(focal, contrast), focal, contrast


def fuse_radar_bev(radar_bev: BEVFeatureMap, heat: ShapeHeatmaps,
                   params: ShapeFusionParams) -> BEVFeatureMap:
    """Concat heatmaps onto the radar BEV map, mix with one 3x3 conv + ReLU."""
    if radar_bev.features.shape[1:] != heat.probs.shape[1:]:
        raise ShapeError("fuse_radar_bev: spatial sizes disagree")
    stacked = ad.concat([radar_bev.features, heat.probs], axis=0)
    out = ad.relu(params.fuse(stacked))
    return BEVFeatureMap(out, radar_bev.grid, radar_bev.modality)
