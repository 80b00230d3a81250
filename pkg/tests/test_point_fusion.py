"""Point-fusion tests: loop oracles, residual identities, gradient checks."""

import numpy as np
import pytest

from rlfusion import autodiff as ad
from rlfusion.gradcheck import grad_check
from rlfusion.point_fusion import (PointFusionParams, attend_lidar_to_radar,
                                   gate_radar, pool_pillars)

D = 4


def make_params(rng, softmax=True):
    return PointFusionParams.create(rng, radar_in=9, lidar_in=10, embed_dim=D,
                                    attention_softmax=softmax)


def radar_inputs(rng, n=2, p=3):
    p_r_s = ad.tensor(rng.normal(size=(n, p, 9)), requires_grad=True)
    p_r_c = ad.tensor(rng.normal(size=(n, p, 3)), requires_grad=True)
    return p_r_s, p_r_c


def mlp_forward_np(mlp, x):
    """Independent numpy re-implementation of the Mlp forward."""
    h = np.maximum(0.0, x @ mlp.fc1.w.data + mlp.fc1.b.data)
    return h @ mlp.fc2.w.data + mlp.fc2.b.data


class TestGateRadar:
    def test_zero_gate_logits_halve_features(self):
        rng = np.random.default_rng(0)
        params = make_params(rng)
        # zero gate net -> logits are exactly zero -> sigmoid 0.5
        for t in params.gate_net.params("g").values():
            t.data[...] = 0.0
        p_r_s, p_r_c = radar_inputs(rng)
        gated, logits = gate_radar(p_r_s, p_r_c, params)
        f_r_s = params.radar_net(p_r_s)
        np.testing.assert_array_equal(logits.data, 0.0)
        np.testing.assert_allclose(gated.data, 0.5 * f_r_s.data, atol=0)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_naive_loop(self, seed):
        rng = np.random.default_rng(seed)
        params = make_params(rng)
        p_r_s, p_r_c = radar_inputs(rng, n=2, p=3)
        gated, logits = gate_radar(p_r_s, p_r_c, params)
        for i in range(2):
            for j in range(3):
                f = mlp_forward_np(params.radar_net, p_r_s.data[i, j])
                w = mlp_forward_np(params.gate_net, np.concatenate([p_r_c.data[i, j], f]))
                expect = 1.0 / (1.0 + np.exp(-w)) * f
                np.testing.assert_allclose(gated.data[i, j], expect, atol=1e-10)
                np.testing.assert_allclose(logits.data[i, j], w, atol=1e-10)

    def test_gradient_through_branch(self):
        rng = np.random.default_rng(5)
        params = make_params(rng)
        p_r_s, p_r_c = radar_inputs(rng)
        names = params.params()
        names["p_r_s"] = p_r_s
        names["p_r_c"] = p_r_c

        def f():
            gated, _ = gate_radar(p_r_s, p_r_c, params)
            return ad.reduce_sum(gated)

        assert grad_check(f, names) < 1e-4


class TestPooling:
    def test_single_valid_point(self):
        x = ad.tensor(np.arange(8, dtype=np.float64).reshape(1, 2, 4))
        out = pool_pillars(x, np.array([1]))
        np.testing.assert_array_equal(out.data, x.data[:, 0])

    def test_all_equal_points(self):
        x = ad.tensor(np.full((1, 3, 4), 2.5))
        out = pool_pillars(x, np.array([3]))
        np.testing.assert_array_equal(out.data, np.full((1, 4), 2.5))

    def test_empty_pillar_pools_to_zero(self):
        x = ad.tensor(np.random.default_rng(0).normal(size=(2, 3, 4)))
        out = pool_pillars(x, np.array([0, 2]))
        np.testing.assert_array_equal(out.data[0], 0.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_naive_max(self, seed):
        rng = np.random.default_rng(seed)
        x = ad.tensor(rng.normal(size=(4, 5, 3)))
        counts = rng.integers(0, 6, size=4)
        out = pool_pillars(x, counts)
        for i in range(4):
            if counts[i] == 0:
                np.testing.assert_array_equal(out.data[i], 0.0)
            else:
                np.testing.assert_allclose(out.data[i], x.data[i, :counts[i]].max(axis=0),
                                           atol=0)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = ad.tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        counts = np.array([2, 0, 4])
        assert grad_check(lambda: ad.reduce_sum(pool_pillars(x, counts)), {"x": x}) < 1e-4


class TestCrossAttention:
    def test_zero_values_residual_identity(self):
        rng = np.random.default_rng(0)
        params = make_params(rng)
        lidar = ad.tensor(rng.normal(size=(3, D)))
        gates = ad.tensor(np.zeros((2, D)))
        out = attend_lidar_to_radar(lidar, gates, params)
        assert np.array_equal(out.data, lidar.data)  # bit-exact

    def test_no_radar_pillars_identity(self):
        rng = np.random.default_rng(1)
        params = make_params(rng)
        lidar = ad.tensor(rng.normal(size=(3, D)))
        out = attend_lidar_to_radar(lidar, ad.tensor(np.zeros((0, D))), params)
        assert out is lidar

    def test_single_radar_pillar_softmax_broadcast(self):
        rng = np.random.default_rng(2)
        params = make_params(rng, softmax=True)
        lidar = ad.tensor(rng.normal(size=(3, D)))
        gate = ad.tensor(rng.normal(size=(1, D)))
        out = attend_lidar_to_radar(lidar, gate, params)
        np.testing.assert_allclose(out.data, lidar.data + gate.data, atol=1e-12)

    @pytest.mark.parametrize("softmax", [True, False])
    @pytest.mark.parametrize("seed", range(20))
    def test_matches_naive_double_loop(self, softmax, seed):
        rng = np.random.default_rng(seed)
        params = make_params(rng, softmax=softmax)
        lidar = ad.tensor(rng.normal(size=(3, D)))
        gates = ad.tensor(rng.normal(size=(2, D)))
        out = attend_lidar_to_radar(lidar, gates, params)
        for i in range(3):
            scores = np.array([lidar.data[i] @ gates.data[j] / np.sqrt(D) for j in range(2)])
            if softmax:
                e = np.exp(scores - scores.max())
                scores = e / e.sum()
            expect = lidar.data[i] + sum(scores[j] * gates.data[j] for j in range(2))
            np.testing.assert_allclose(out.data[i], expect, atol=1e-10)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        params = make_params(rng, softmax=True)
        lidar = ad.tensor(rng.normal(size=(4, D)))
        gates = rng.normal(size=(5, D))
        out = attend_lidar_to_radar(lidar, ad.tensor(gates), params)
        perm = rng.permutation(5)
        out_p = attend_lidar_to_radar(lidar, ad.tensor(gates[perm]), params)
        np.testing.assert_allclose(out_p.data, out.data, atol=1e-12)

    def test_convex_combination_bounds(self):
        rng = np.random.default_rng(4)
        params = make_params(rng, softmax=True)
        lidar = ad.tensor(rng.normal(size=(6, D)))
        gates = rng.normal(size=(5, D))
        out = attend_lidar_to_radar(lidar, ad.tensor(gates), params)
        delta = out.data - lidar.data
        assert np.all(delta <= gates.max(axis=0) + 1e-12)
        assert np.all(delta >= gates.min(axis=0) - 1e-12)

    @pytest.mark.parametrize("softmax", [True, False])
    def test_gradient(self, softmax):
        rng = np.random.default_rng(6)
        params = make_params(rng, softmax=softmax)
        lidar = ad.tensor(rng.normal(size=(3, D)), requires_grad=True)
        gates = ad.tensor(rng.normal(size=(2, D)), requires_grad=True)
        err = grad_check(lambda: ad.reduce_sum(attend_lidar_to_radar(lidar, gates, params)),
                         {"lidar": lidar, "gates": gates})
        assert err < 1e-4


def test_full_module_gradient():
    """End-to-end: pillar features -> gate -> pool -> attention -> sum."""
    rng = np.random.default_rng(7)
    params = make_params(rng)
    p_r_s, p_r_c = radar_inputs(rng, n=2, p=3)
    lidar_pts = ad.tensor(rng.normal(size=(3, 3, 10)), requires_grad=True)
    counts_r = np.array([2, 3])
    counts_l = np.array([3, 1, 2])
    names = params.params()
    names.update({"p_r_s": p_r_s, "p_r_c": p_r_c, "lidar_pts": lidar_pts})

    def f():
        gated, logits = gate_radar(p_r_s, p_r_c, params)
        radar_vec = pool_pillars(gated, counts_r)
        gate_vec = pool_pillars(logits, counts_r)
        lidar_emb = params.lidar_net(lidar_pts)
        lidar_vec = pool_pillars(lidar_emb, counts_l)
        fused = attend_lidar_to_radar(lidar_vec, gate_vec, params)
        return ad.add(ad.reduce_sum(fused), ad.reduce_sum(radar_vec))

    assert grad_check(f, names) < 1e-4
