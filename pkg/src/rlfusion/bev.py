"""BEV pseudo-image construction and the 2D convolutional backbone.

Pillar embeddings are scattered onto the detection grid (adjoint of a
gather, so the op is exactly differentiable), then passed through a small
two-level feature pyramid: two stride-2 conv blocks whose outputs are
nearest-neighbor upsampled back to full resolution and concatenated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .nn import Conv
from .pillars import GridConfig


@dataclass
class BEVFeatureMap:
    """C x H x W feature image on the detection grid."""

    features: Tensor
    grid: GridConfig
    modality: str

    @property
    def shape(self):
        return self.features.shape


def scatter_to_bev(pillar_embeddings: Tensor, coords: np.ndarray, grid: GridConfig,
                   modality: str = "") -> BEVFeatureMap:
    """Write each pillar vector at its (row, col) cell; other cells stay zero.

    coords must be unique (pillarization guarantees it); duplicates raise.
    """
    h, w = grid.height, grid.width
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    n, d = pillar_embeddings.shape
    if coords.shape[0] != n:
        raise ShapeError("scatter_to_bev: one coordinate pair per pillar")
    if n:
        if coords[:, 0].min() < 0 or coords[:, 0].max() >= h \
                or coords[:, 1].min() < 0 or coords[:, 1].max() >= w:
            raise IndexError("scatter_to_bev: coordinate outside grid")
        flat = coords[:, 0] * w + coords[:, 1]
        if np.unique(flat).size != n:
            raise ContractError("scatter_to_bev: duplicate pillar coordinates")
        canvas = ad.scatter_add_rows(pillar_embeddings, flat, h * w)   # (H*W, d)
    else:
        canvas = ad.constant(np.zeros((h * w, d)), like=pillar_embeddings)
    chw = ad.reshape(ad.transpose(canvas), (d, h, w))
    return BEVFeatureMap(chw, grid, modality)


def gather_from_bev(bev: BEVFeatureMap, coords: np.ndarray) -> Tensor:
    """Read pillar vectors back out of a BEV map (adjoint of the scatter)."""
    d, h, w = bev.features.shape
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    flat = coords[:, 0] * w + coords[:, 1]
    rows = ad.transpose(ad.reshape(bev.features, (d, h * w)))
    return ad.gather_rows(rows, flat)


@dataclass
class BackboneParams:
    """Two stride-2 blocks; each branch upsamples back to input resolution."""

    down1: Conv
    down2: Conv
    out_channels: int

    @classmethod
    def create(cls, rng, in_channels: int, block_channels: tuple[int, int] = (32, 32),
               dtype=np.float64) -> "BackboneParams":
        c1, c2 = block_channels
        return cls(down1=Conv(rng, in_channels, c1, k=3, stride=2, pad=1, dtype=dtype),
                   down2=Conv(rng, c1, c2, k=3, stride=2, pad=1, dtype=dtype),
                   out_channels=c1 + c2)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.down1.params(f"{prefix}.down1")
        out.update(self.down2.params(f"{prefix}.down2"))
        return out


def backbone_forward(bev: BEVFeatureMap, params: BackboneParams) -> BEVFeatureMap:
    """Downsample twice, upsample both levels to H x W, concat channels."""
    _, h, w = bev.features.shape
    if h % 4 or w % 4:
        raise ShapeError("backbone_forward: H and W must be divisible by 4")
    b1 = ad.relu(params.down1(bev.features))      # (c1, H/2, W/2)
    b2 = ad.relu(params.down2(b1))                # (c2, H/4, W/4)
    up1 = ad.upsample_nearest(b1, 2)
    up2 = ad.upsample_nearest(b2, 4)
    out = ad.concat([up1, up2], axis=0)
    return BEVFeatureMap(out, bev.grid, bev.modality)
