"""Detection head tests: shape contracts, assignment oracle, scalar loss oracle,
encode/decode identities."""

import math

import numpy as np
import pytest

from rlfusion import autodiff as ad
from rlfusion.bev import BEVFeatureMap
from rlfusion.boxes import Box3D, CLASS_NAMES, rotated_iou_bev
from rlfusion.detection_head import (ANCHOR_YAWS, AnchorTargets, Anchors,
                                     DEFAULT_ANCHORS, HeadOutputs, HeadParams,
                                     RpnLossWeights, assign_targets, decode_and_nms,
                                     decode_box, direction_bit, encode_box,
                                     final_loss, head_forward, make_anchors, rpn_loss)
from rlfusion.gradcheck import grad_check
from rlfusion.pillars import GridConfig

GRID = GridConfig(x_range=(0.0, 6.4), y_range=(-3.2, 3.2), z_range=(-1.0, 3.0),
                  pillar_size=0.4, max_pillars=64, max_points_per_pillar=4)


def tiny_anchors(boxes):
    """Anchors dataclass from a list of (Box3D, match, unmatch)."""
    return Anchors(
        cx=np.array([b.cx for b, *_ in boxes]),
        cy=np.array([b.cy for b, *_ in boxes]),
        cz=np.array([b.cz for b, *_ in boxes]),
        length=np.array([b.l for b, *_ in boxes]),
        width=np.array([b.w for b, *_ in boxes]),
        height=np.array([b.h for b, *_ in boxes]),
        yaw=np.array([b.yaw for b, *_ in boxes]),
        class_id=np.array([b.class_id for b, *_ in boxes], dtype=np.int64),
        match_iou=np.array([m for _, m, _ in boxes]),
        unmatch_iou=np.array([u for _, _, u in boxes]),
    )


class TestHeadForward:
    def test_anchor_count_contract(self):
        rng = np.random.default_rng(0)
        params = HeadParams.create(rng, in_channels=6, n_classes=3)
        fused = BEVFeatureMap(ad.tensor(rng.normal(size=(6, 16, 16))), GRID, "fused")
        out = head_forward(fused, params)
        expect = 16 * 16 * 2 * 3
        assert out.cls_logits.shape == (expect,)
        assert out.box_deltas.shape == (expect, 7)
        assert out.dir_logits.shape == (expect, 2)

    def test_zero_params_give_half_scores(self):
        rng = np.random.default_rng(1)
        params = HeadParams.create(rng, in_channels=4, n_classes=3)
        for t in params.params().values():
            t.data[...] = 0.0
        fused = BEVFeatureMap(ad.tensor(rng.normal(size=(4, 8, 8))), GRID, "fused")
        out = head_forward(fused, params)
        scores = 1 / (1 + np.exp(-out.cls_logits.data))
        np.testing.assert_array_equal(scores, 0.5)

    def test_flat_layout_matches_anchor_order(self):
        # the logit for anchor (class c, yaw k, row r, col q) must come from
        # channel c*2+k at spatial position (r, q)
        rng = np.random.default_rng(2)
        params = HeadParams.create(rng, in_channels=3, n_classes=2)
        fused = BEVFeatureMap(ad.tensor(rng.normal(size=(3, 4, 4))), GRID, "fused")
        out = head_forward(fused, params)
        cls_map = params.cls_conv(fused.features).data
        box_map = params.box_conv(fused.features).data
        h = w = 4
        for a in range(4):          # class*yaw groups
            for r in range(h):
                for q in range(w):
                    flat = (a * h + r) * w + q
                    assert out.cls_logits.data[flat] == cls_map[a, r, q]
                    np.testing.assert_array_equal(
                        out.box_deltas.data[flat], box_map[a * 7:(a + 1) * 7, r, q])

    def test_gradient(self):
        rng = np.random.default_rng(3)
        params = HeadParams.create(rng, in_channels=2, n_classes=1)
        x = ad.tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
        names = params.params()
        names["x"] = x

        def f():
            out = head_forward(BEVFeatureMap(x, GRID, "fused"), params)
            return ad.add(ad.reduce_sum(ad.sigmoid(out.cls_logits)),
                          ad.add(ad.mean(out.box_deltas), ad.mean(out.dir_logits)))

        assert grad_check(f, names) < 1e-4


class TestEncodeDecode:
    @pytest.mark.parametrize("seed", range(20))
    def test_decode_encode_identity(self, seed):
        rng = np.random.default_rng(seed)
        anchor = Box3D(rng.uniform(-5, 5), rng.uniform(-5, 5), 0.8,
                       4.2, 1.8, 1.6, float(rng.choice(ANCHOR_YAWS)))
        gt = Box3D(anchor.cx + rng.normal(0, 0.5), anchor.cy + rng.normal(0, 0.5),
                   anchor.cz + rng.normal(0, 0.2), 4.0, 1.7, 1.5,
                   rng.uniform(-3.0, 3.0))          # away from the +-pi wrap
        delta = encode_box(gt, anchor)
        back = decode_box(delta, anchor, direction_bit(gt.yaw, anchor.yaw), 0)
        assert back.cx == pytest.approx(gt.cx, abs=1e-6)
        assert back.cy == pytest.approx(gt.cy, abs=1e-6)
        assert back.cz == pytest.approx(gt.cz, abs=1e-6)
        assert back.l == pytest.approx(gt.l, abs=1e-6)
        assert back.w == pytest.approx(gt.w, abs=1e-6)
        assert back.h == pytest.approx(gt.h, abs=1e-6)
        assert back.yaw == pytest.approx(gt.yaw, abs=1e-6)

    def test_zero_deltas_decode_to_anchor(self):
        anchor = Box3D(1.0, 2.0, 0.8, 4.2, 1.8, 1.6, math.pi / 2)
        back = decode_box(np.zeros(7), anchor, 0, 0)
        for attr in ("cx", "cy", "cz", "l", "w", "h", "yaw"):
            assert getattr(back, attr) == pytest.approx(getattr(anchor, attr), abs=1e-12)


class TestAssignment:
    def test_exact_match_positive_with_zero_deltas(self):
        gt = Box3D(2.0, 0.0, 0.8, 4.2, 1.8, 1.6, 0.0, class_id=0)
        anchors = tiny_anchors([(gt, 0.6, 0.45)])
        tgt = assign_targets(anchors, [gt])
        assert tgt.labels[0] == 1
        np.testing.assert_allclose(tgt.reg_targets[0], 0.0, atol=1e-12)

    def test_empty_gt_all_negative(self):
        anchors = make_anchors(GRID, DEFAULT_ANCHORS, CLASS_NAMES)
        tgt = assign_targets(anchors, [])
        assert tgt.num_positive == 0
        assert (tgt.labels == 0).all()

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(4)
        gts = [Box3D(2.0, 0.5, 0.8, 4.0, 1.8, 1.6, 0.3, class_id=0),
               Box3D(4.5, -1.0, 0.8, 4.4, 1.9, 1.6, -1.2, class_id=0)]
        anchor_boxes = []
        for _ in range(5):
            anchor_boxes.append((Box3D(rng.uniform(1, 5), rng.uniform(-2, 2), 0.8,
                                       4.2, 1.8, 1.6, float(rng.choice([0, np.pi / 2])),
                                       class_id=0), 0.6, 0.45))
        anchors = tiny_anchors(anchor_boxes)
        tgt = assign_targets(anchors, gts)

        # oracle: full IoU table, same rules, no prefilter
        ious = np.array([[rotated_iou_bev(b, g) for g in gts] for b, _, _ in anchor_boxes])
        best = ious.max(axis=1)
        expect = np.zeros(5, dtype=int)
        expect[best < 0.45] = 0
        expect[(best >= 0.45) & (best < 0.6)] = -1
        expect[best >= 0.6] = 1
        for j in range(2):
            if ious[:, j].max() > 1e-6:
                expect[int(ious[:, j].argmax())] = 1
        np.testing.assert_array_equal(tgt.labels, expect)

    def test_force_match_best_anchor(self):
        # gt whose IoU with every anchor is below match threshold still gets one positive
        gt = Box3D(2.0, 0.0, 0.8, 4.2, 1.8, 1.6, 0.6, class_id=0)
        shifted = Box3D(3.2, 0.9, 0.8, 4.2, 1.8, 1.6, 0.0, class_id=0)
        anchors = tiny_anchors([(shifted, 0.99, 0.1)])
        tgt = assign_targets(anchors, [gt])
        assert tgt.labels[0] == 1 and tgt.matched_gt[0] == 0

    def test_class_mismatch_never_matches(self):
        gt = Box3D(2.0, 0.0, 0.85, 0.6, 0.6, 1.7, 0.0, class_id=1)
        car_anchor = Box3D(2.0, 0.0, 0.8, 4.2, 1.8, 1.6, 0.0, class_id=0)
        anchors = tiny_anchors([(car_anchor, 0.6, 0.45)])
        tgt = assign_targets(anchors, [gt])
        assert tgt.labels[0] == 0


def naive_rpn_loss(cls_logits, deltas, dirs, targets, wts):
    """Independent scalar reference for the RPN loss."""
    labels, reg_t, dir_t = targets.labels, targets.reg_targets, targets.dir_targets
    norm = 1.0 / max(1, (labels == 1).sum())
    cls = 0.0
    for i, lab in enumerate(labels):
        p = 1 / (1 + np.exp(-cls_logits[i]))
        p = min(max(p, 1e-6), 1 - 1e-6)
        if lab == 1:
            cls += -wts.focal_alpha * (1 - p) ** wts.focal_gamma * math.log(p)
        elif lab == 0:
            cls += -(1 - wts.focal_alpha) * p ** wts.focal_gamma * math.log(1 - p)
    box = 0.0
    for i in np.flatnonzero(labels == 1):
        for j in range(7):
            d = deltas[i, j] - reg_t[i, j]
            b = wts.huber_beta
            box += 0.5 * d * d / b if abs(d) < b else abs(d) - 0.5 * b
    direction = 0.0
    for i in np.flatnonzero(labels == 1):
        z = dirs[i]
        lse = math.log(math.exp(z[0]) + math.exp(z[1]))
        direction += lse - z[dir_t[i]]
    return wts.cls * cls * norm + wts.box * box * norm + wts.direction * direction * norm


class TestRpnLoss:
    def make_preds(self, rng, n):
        return HeadOutputs(
            cls_logits=ad.tensor(rng.normal(size=(n,)), requires_grad=True),
            box_deltas=ad.tensor(rng.normal(size=(n, 7)), requires_grad=True),
            dir_logits=ad.tensor(rng.normal(size=(n, 2)), requires_grad=True))

    def make_targets(self, rng, n):
        labels = rng.choice([-1, 0, 1], size=n, p=[0.2, 0.5, 0.3])
        return AnchorTargets(labels=labels, reg_targets=rng.normal(size=(n, 7)),
                             dir_targets=rng.integers(0, 2, size=n),
                             matched_gt=np.full(n, -1))

    def test_perfect_predictions_near_zero(self):
        n = 6
        labels = np.array([1, 1, 0, 0, 0, -1])
        reg = np.random.default_rng(5).normal(size=(n, 7))
        tgt = AnchorTargets(labels=labels, reg_targets=reg,
                            dir_targets=np.array([0, 1, 0, 0, 0, 0]),
                            matched_gt=np.full(n, -1))
        logits = np.where(labels == 1, 40.0, -40.0)
        dirs = np.zeros((n, 2))
        dirs[np.arange(n), tgt.dir_targets] = 40.0
        preds = HeadOutputs(ad.tensor(logits.astype(float)),
                            ad.tensor(reg.copy()), ad.tensor(dirs))
        total, parts = rpn_loss(preds, tgt)
        assert total.item() < 1e-3

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_scalar_reimplementation(self, seed):
        rng = np.random.default_rng(seed)
        preds = self.make_preds(rng, 12)
        tgt = self.make_targets(rng, 12)
        wts = RpnLossWeights()
        total, parts = rpn_loss(preds, tgt, wts)
        ref = naive_rpn_loss(preds.cls_logits.data, preds.box_deltas.data,
                             preds.dir_logits.data, tgt, wts)
        assert total.item() == pytest.approx(ref, abs=1e-10)

    def test_zero_positives_classification_only(self):
        rng = np.random.default_rng(6)
        preds = self.make_preds(rng, 8)
        labels = np.zeros(8, dtype=np.int64)
        tgt = AnchorTargets(labels=labels, reg_targets=np.zeros((8, 7)),
                            dir_targets=np.zeros(8, dtype=np.int64),
                            matched_gt=np.full(8, -1))
        total, parts = rpn_loss(preds, tgt)
        assert parts["box"] == 0.0 and parts["dir"] == 0.0

    def test_gradient(self):
        rng = np.random.default_rng(7)
        preds = self.make_preds(rng, 10)
        tgt = self.make_targets(rng, 10)
        names = {"cls": preds.cls_logits, "box": preds.box_deltas, "dir": preds.dir_logits}
        assert grad_check(lambda: rpn_loss(preds, tgt)[0], names) < 1e-4


class TestFinalLoss:
    def test_alpha_one_additivity(self):
        rpn = ad.tensor(np.array(2.5), requires_grad=True)
        shape = ad.tensor(np.array(1.25), requires_grad=True)
        assert final_loss(rpn, shape, 1.0).item() == pytest.approx(3.75, abs=1e-15)

    def test_alpha_zero_is_rpn_only(self):
        rpn = ad.tensor(np.array(2.5))
        shape = ad.tensor(np.array(99.0))
        assert final_loss(rpn, shape, 0.0) is rpn


class TestDecodeAndNms:
    def test_high_scoring_anchor_round_trip(self):
        anchors = make_anchors(GRID, DEFAULT_ANCHORS, CLASS_NAMES)
        n = len(anchors)
        logits = np.full(n, -40.0)
        target_idx = 137
        logits[target_idx] = 6.0
        preds = HeadOutputs(ad.tensor(logits), ad.tensor(np.zeros((n, 7))),
                            ad.tensor(np.tile([5.0, -5.0], (n, 1))))
        dets = decode_and_nms(preds, anchors, score_thr=0.1, nms_iou=0.25, max_dets=10)
        assert len(dets) == 1
        d = dets[0]
        assert d.box.cx == pytest.approx(anchors.cx[target_idx])
        assert d.box.class_id == anchors.class_id[target_idx]
        assert d.score == pytest.approx(1 / (1 + math.exp(-6.0)))

    def test_identical_boxes_nms_keeps_best(self):
        anchors = make_anchors(GRID, DEFAULT_ANCHORS, CLASS_NAMES)
        n = len(anchors)
        logits = np.full(n, -40.0)
        # same cell, same class, both yaw hypotheses decoded to identical boxes
        h, w = GRID.height, GRID.width
        i0 = (0 * h + 4) * w + 5
        i1 = (1 * h + 4) * w + 5
        logits[i0], logits[i1] = 3.0, 5.0
        deltas = np.zeros((n, 7))
        # rotate the yaw-0 anchor to pi/2 so the two decoded boxes coincide
        deltas[i0, 6] = math.sin(math.pi / 2)
        preds = HeadOutputs(ad.tensor(logits), ad.tensor(deltas),
                            ad.tensor(np.tile([5.0, -5.0], (n, 1))))
        dets = decode_and_nms(preds, anchors, score_thr=0.1, nms_iou=0.25, max_dets=10)
        assert len(dets) == 1
        assert dets[0].score == pytest.approx(1 / (1 + math.exp(-5.0)))

    def test_empty_when_all_below_threshold(self):
        anchors = make_anchors(GRID, DEFAULT_ANCHORS, CLASS_NAMES)
        n = len(anchors)
        preds = HeadOutputs(ad.tensor(np.full(n, -40.0)), ad.tensor(np.zeros((n, 7))),
                            ad.tensor(np.zeros((n, 2))))
        assert decode_and_nms(preds, anchors, 0.1, 0.25, 10) == []
