"""Point-level bidirectional fusion between radar and LiDAR pillars.

Two branches operate before the BEV stage:

  * radar self-gating: a weight vector is produced from the doppler /
    reflectivity triple concatenated with the radar geometric embedding,
    then gates that embedding through a sigmoid and elementwise product;
  * radar-to-LiDAR cross-attention: pooled LiDAR pillar vectors attend
    over pooled radar weight vectors (keys = values), residual form, so
    zero radar weights leave the LiDAR features bit-identical.

Attention runs at pillar granularity: both streams are max-pooled over
their valid points first, which keeps the cost at O(M_l * N_r).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import Mlp

_MASK_OFFSET = 1e9  # finite stand-in for -inf when masking padded rows


@dataclass
class PointFusionParams:
    """Parameter bundle for both fusion branches.

    radar_net embeds radar spatial channels, lidar_net embeds LiDAR
    channels (queries and residual base), gate_net maps the concatenated
    indicative triple + radar embedding to the gate logits.
    """

    radar_net: Mlp
    lidar_net: Mlp
    gate_net: Mlp
    embed_dim: int
    attention_softmax: bool = True
    d_k: int = field(default=0)

    def __post_init__(self):
        if self.d_k == 0:
            self.d_k = self.embed_dim

    @classmethod
    def create(cls, rng, radar_in: int, lidar_in: int, embed_dim: int,
               attention_softmax: bool = True, dtype=np.float64) -> "PointFusionParams":
        return cls(
            radar_net=Mlp(rng, radar_in, embed_dim, embed_dim, dtype),
            lidar_net=Mlp(rng, lidar_in, embed_dim, embed_dim, dtype),
            gate_net=Mlp(rng, 3 + embed_dim, embed_dim, embed_dim, dtype),
            embed_dim=embed_dim,
            attention_softmax=attention_softmax,
        )

    def params(self) -> dict[str, Tensor]:
        out = self.radar_net.params("fusion.radar_net")
        out.update(self.lidar_net.params("fusion.lidar_net"))
        out.update(self.gate_net.params("fusion.gate_net"))
        return out


@dataclass
class PoolCache:
    """Precomputed masks for pooling a fixed (n, P, d) pillar block."""

    mask: Tensor
    offset: Tensor
    nonempty: Tensor
    shape: tuple

    @classmethod
    def create(cls, num_points: np.ndarray, p: int, d: int, dtype) -> "PoolCache":
        counts = np.asarray(num_points)
        n = counts.shape[0]
        valid = (np.arange(p)[None, :] < counts[:, None]).astype(dtype)
        mask = np.broadcast_to(valid[:, :, None], (n, p, d)).copy()
        offset = (mask - 1.0) * _MASK_OFFSET
        nonempty = np.broadcast_to((counts > 0).astype(dtype)[:, None], (n, d)).copy()
        return cls(mask=ad.tensor(mask, dtype=dtype), offset=ad.tensor(offset, dtype=dtype),
                   nonempty=ad.tensor(nonempty, dtype=dtype), shape=(n, p, d))


def pool_pillars(point_features: Tensor, num_points: np.ndarray,
                 cache: PoolCache | None = None) -> Tensor:
    """Per-pillar max over valid points; empty pillars pool to zeros.

    point_features: (n, P, d); num_points: (n,) valid-row counts.  Pass a
    PoolCache when pooling the same pillar layout repeatedly.
    """
    n, p, d = point_features.shape
    counts = np.asarray(num_points)
    if counts.shape != (n,):
        raise ShapeError("pool_pillars: one count per pillar required")
    if cache is None or cache.shape != (n, p, d):
        cache = PoolCache.create(counts, p, d, point_features.data.dtype)
    masked = ad.add(ad.mul(point_features, cache.mask), cache.offset)
    pooled = ad.reduce_max(masked, axis=1)
    return ad.mul(pooled, cache.nonempty)


def gate_radar(p_r_s: Tensor, p_r_c: Tensor, params: PointFusionParams,
               apply_gate: bool = True) -> tuple[Tensor, Tensor]:
    """Radar self-gating branch.

    Returns (gated point features (N,P,d), gate logits (N,P,d)).  With
    apply_gate=False the geometric embedding passes through ungated (the
    gate logits are still produced for the cross-attention branch).
    """
    if p_r_s.shape[:2] != p_r_c.shape[:2]:
        raise ShapeError("gate_radar: pillar/point shapes disagree")
    if p_r_c.shape[2] != 3:
        raise ShapeError("gate_radar: indicative slice must have 3 channels")
    f_r_s = params.radar_net(p_r_s)
    w_r_c = params.gate_net(ad.concat([p_r_c, f_r_s], axis=2))
    if not apply_gate:
        return f_r_s, w_r_c
    return ad.mul(ad.sigmoid(w_r_c), f_r_s), w_r_c


def attend_lidar_to_radar(lidar_pooled: Tensor, gate_pooled: Tensor,
                          params: PointFusionParams) -> Tensor:
    """Residual cross-attention: LiDAR pillar vectors query radar gates.

    lidar_pooled (M, d) are the queries and the residual base; gate_pooled
    (N, d) serves as both keys and values.  Scores are scaled by 1/sqrt(d_k)
    and row-softmaxed unless attention_softmax is off, in which case the
    raw scaled scores weight the values directly.
    """
    if gate_pooled.shape[0] == 0:
        return lidar_pooled
    if lidar_pooled.shape[1] != gate_pooled.shape[1]:
        raise ShapeError("attend_lidar_to_radar: embedding widths disagree")
    scores = ad.scale(ad.matmul(lidar_pooled, ad.transpose(gate_pooled)),
                      1.0 / np.sqrt(params.d_k))
    attn = ad.softmax(scores, axis=1) if params.attention_softmax else scores
    return ad.add(lidar_pooled, ad.matmul(attn, gate_pooled))
