"""Full detector assembly: pillars -> point fusion -> BEV backbones ->
shape fusion -> head, plus the momentum-SGD training loop.

Module toggles change the wiring:
  * gate_radar off  -> radar embeddings pass ungated into the BEV stage;
  * attend_lidar off -> LiDAR pillar vectors skip the cross-attention;
  * shape_fusion off -> the radar BEV map is used unfused and the shape
    loss term is dropped (its parameters stay allocated but receive no
    gradient and are excluded from the optimizer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bev import BackboneParams, BEVFeatureMap, backbone_forward, scatter_to_bev
from .boxes import Box3D, CLASS_NAMES, Detection
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .config import Config
from .detection_head import (AnchorTargets, Anchors, HeadOutputs, HeadParams,
                             RpnLossCache, assign_targets, decode_and_nms, final_loss,
                             head_forward, make_anchors, rpn_loss)
from .errors import NumericError
from .pillars import PillarSet, build_pillars
from .point_fusion import (PointFusionParams, PoolCache, attend_lidar_to_radar,
                           gate_radar, pool_pillars)
from .shape_fusion import (ShapeFusionParams, ShapeHeatmaps, ShapeTargets,
                           fuse_radar_bev, make_shape_targets, shape_loss,
                           shape_network)
from .synthetic import Frame

RADAR_IN = 9
LIDAR_IN = 10


@dataclass
class PreparedFrame:
    """Per-frame constants reused across training steps."""

    frame_id: str
    radar: PillarSet
    lidar: PillarSet
    anchor_targets: AnchorTargets
    shape_targets: ShapeTargets
    labels: list[Box3D]


@dataclass
class FrameOutputs:
    preds: HeadOutputs
    heatmaps: ShapeHeatmaps | None


class FusionModel:
    """Parameter container plus the differentiable forward pass."""

    def __init__(self, config: Config):
        self.config = config
        cfg_m = config.model
        self.dtype = np.float32 if cfg_m.dtype == "float32" else np.float64
        self.grid = config.grid.lidar_grid()
        self.radar_grid = config.grid.radar_grid()
        rng = np.random.default_rng([config.train.seed, 0xC0FFEE])
        d = cfg_m.embed_dim
        c_out = sum(cfg_m.backbone_channels)
        self.fusion = PointFusionParams.create(
            rng, RADAR_IN, LIDAR_IN, d, attention_softmax=cfg_m.attention_softmax,
            dtype=self.dtype)
        self.radar_backbone = BackboneParams.create(
            rng, d, tuple(cfg_m.backbone_channels), dtype=self.dtype)
        self.lidar_backbone = BackboneParams.create(
            rng, d, tuple(cfg_m.backbone_channels), dtype=self.dtype)
        self.shape = ShapeFusionParams.create(
            rng, c_out, config.n_classes, hidden=cfg_m.shape_hidden, tau=cfg_m.tau,
            dtype=self.dtype)
        self.head = HeadParams.create(rng, 2 * c_out, config.n_classes, dtype=self.dtype)
        self.anchors: Anchors = make_anchors(self.grid, config.anchors.templates(),
                                             CLASS_NAMES)

    # -- parameters -------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out = self.fusion.params()
        out.update(self.radar_backbone.params("radar_backbone"))
        out.update(self.lidar_backbone.params("lidar_backbone"))
        out.update(self.shape.params())
        out.update(self.head.params())
        return out

    def trainable_params(self) -> dict[str, Tensor]:
        """Parameters updated by the optimizer under the active toggles."""
        abl = self.config.ablation
        out = self.params()
        if not abl.shape_fusion:
            out = {k: v for k, v in out.items() if not k.startswith("shape.")}
        if not (abl.gate_radar or abl.attend_lidar):
            out = {k: v for k, v in out.items() if not k.startswith("fusion.gate_net.")}
        return out

    def save(self, path: str) -> None:
        save_checkpoint(path, self.params())

    def load(self, path: str) -> None:
        restore_params(self.params(), load_checkpoint(path))

    # -- data preparation ---------------------------------------------------

    def prepare_frame(self, frame: Frame) -> PreparedFrame:
        seed = int(frame.frame_id) if frame.frame_id.isdigit() else abs(hash(frame.frame_id)) % (2 ** 31)
        radar = build_pillars(frame.radar, self.radar_grid, "radar", seed=seed)
        lidar = build_pillars(frame.lidar, self.grid, "lidar", seed=seed)
        return PreparedFrame(
            frame_id=frame.frame_id,
            radar=radar,
            lidar=lidar,
            anchor_targets=assign_targets(self.anchors, frame.labels),
            shape_targets=make_shape_targets(frame.labels, self.grid, self.config.n_classes),
            labels=frame.labels,
        )

    # -- forward ------------------------------------------------------------

    def forward(self, prep: PreparedFrame) -> FrameOutputs:
        abl = self.config.ablation
        use_gate_net = abl.gate_radar or abl.attend_lidar

        p_r_s = ad.tensor(prep.radar.spatial_features(), dtype=self.dtype)
        mask = np.asarray(self.config.indicative.as_vector())
        p_r_c = ad.tensor(prep.radar.indicative_slice() * mask, dtype=self.dtype)
        if use_gate_net:
            radar_pts, gate_logits = gate_radar(p_r_s, p_r_c, self.fusion,
                                                apply_gate=abl.gate_radar)
        else:
            radar_pts, gate_logits = self.fusion.radar_net(p_r_s), None
        radar_vec = pool_pillars(radar_pts, prep.radar.num_points)

        lidar_emb = self.fusion.lidar_net(ad.tensor(prep.lidar.spatial_features(),
                                                    dtype=self.dtype))
        lidar_vec = pool_pillars(lidar_emb, prep.lidar.num_points)
        if abl.attend_lidar and prep.radar.num_pillars > 0:
            gate_vec = pool_pillars(gate_logits, prep.radar.num_points)
            lidar_vec = attend_lidar_to_radar(lidar_vec, gate_vec, self.fusion)

        radar_bev = scatter_to_bev(radar_vec, prep.radar.coords, self.grid, "radar")
        lidar_bev = scatter_to_bev(lidar_vec, prep.lidar.coords, self.grid, "lidar")
        radar_feat = backbone_forward(radar_bev, self.radar_backbone)
        lidar_feat = backbone_forward(lidar_bev, self.lidar_backbone)

        heat = None
        if abl.shape_fusion:
            heat = shape_network(lidar_feat, self.shape)
            radar_feat = fuse_radar_bev(radar_feat, heat, self.shape)

        fused = BEVFeatureMap(ad.concat([radar_feat.features, lidar_feat.features], axis=0),
                              self.grid, "fused")
        return FrameOutputs(preds=head_forward(fused, self.head), heatmaps=heat)

    def frame_loss(self, prep: PreparedFrame, step_seed: int = 0):
        """(total, components dict) for one frame."""
        out = self.forward(prep)
        rpn, parts = rpn_loss(out.preds, prep.anchor_targets, self.config.loss)
        components = {"rpn": rpn.item(), **{f"rpn_{k}": v for k, v in parts.items()}}
        shape_total = None
        if out.heatmaps is not None:
            shape_total, focal, contrast = shape_loss(out.heatmaps, prep.shape_targets,
                                                      seed=step_seed)
            components["shape_focal"] = focal.item()
            components["shape_contrast"] = contrast.item()
        total = final_loss(rpn, shape_total, self.config.model.alpha)
        components["total"] = total.item()
        return total, components

    # -- inference ------------------------------------------------------------

    def predict_prepared(self, prep: PreparedFrame) -> list[Detection]:
        out = self.forward(prep)
        m = self.config.model
        return decode_and_nms(out.preds, self.anchors, m.score_threshold, m.nms_iou,
                              m.max_detections, frame_id=prep.frame_id)

    def predict(self, frame: Frame) -> list[Detection]:
        return self.predict_prepared(self.prepare_frame(frame))


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    final_loss: float = float("nan")
    aborted: bool = False


class Trainer:
    """Momentum-SGD loop with per-frame caching and deterministic batching."""

    def __init__(self, model: FusionModel, frames: list[Frame]):
        self.model = model
        self.cfg = model.config.train
        self.prepared = [model.prepare_frame(f) for f in frames]
        self.trainable = model.trainable_params()
        self.velocity = {k: np.zeros_like(p.data) for k, p in self.trainable.items()}

    def _batch_loss(self, batch: list[PreparedFrame], step: int):
        totals = []
        merged: dict[str, float] = {}
        for prep in batch:
            total, comps = self.model.frame_loss(prep, step_seed=step)
            totals.append(total)
            for k, v in comps.items():
                merged[k] = merged.get(k, 0.0) + v / len(batch)
        loss = totals[0]
        for t in totals[1:]:
            loss = ad.add(loss, t)
        return ad.scale(loss, 1.0 / len(batch)), merged

    def _apply_update(self):
        lr, mom, clip = self.cfg.learning_rate, self.cfg.momentum, self.cfg.grad_clip
        sq = 0.0
        for p in self.trainable.values():
            sq += float((p.grad.astype(np.float64) ** 2).sum())
        norm = np.sqrt(sq)
        factor = 1.0 if norm <= clip else clip / (norm + 1e-12)
        for k, p in self.trainable.items():
            g = p.grad * factor
            self.velocity[k] = mom * self.velocity[k] + g
            p.data = p.data - (lr * self.velocity[k]).astype(p.data.dtype)
            p.zero_grad()

    def train(self, steps: int | None = None, callback=None) -> TrainResult:
        """Run the loop; on a numeric failure the last good state is kept."""
        steps = self.cfg.steps if steps is None else steps
        rng = np.random.default_rng([self.cfg.seed, 0x7EA1])
        result = TrainResult()
        n = len(self.prepared)
        if n == 0:
            raise NumericError("no training frames")
        for step in range(steps):
            idx = rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
            batch = [self.prepared[int(i)] for i in idx]
            try:
                loss, comps = self._batch_loss(batch, step)
                if not np.isfinite(loss.item()):
                    raise NumericError(f"non-finite loss at step {step}")
                loss.backward()
                self._apply_update()
            except NumericError:
                result.aborted = True
                raise
            comps["step"] = step
            result.history.append(comps)
            result.final_loss = comps["total"]
            if callback is not None:
                callback(step, comps)
        return result


def frames_to_gt(frames: list[Frame]) -> dict[str, list[Box3D]]:
    return {f.frame_id: f.labels for f in frames}


def predict_frames(model: FusionModel, frames: list[Frame]) -> dict[str, list[Detection]]:
    return {f.frame_id: model.predict(f) for f in frames}
