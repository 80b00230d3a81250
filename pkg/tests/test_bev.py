"""BEV scatter/backbone tests: adjointness, shapes, translation consistency."""

import numpy as np
import pytest

from rlfusion import autodiff as ad
from rlfusion.bev import (BackboneParams, BEVFeatureMap, backbone_forward,
                          gather_from_bev, scatter_to_bev)
from rlfusion.errors import ContractError, ShapeError
from rlfusion.gradcheck import grad_check
from rlfusion.pillars import GridConfig

GRID = GridConfig(x_range=(0.0, 3.2), y_range=(-1.6, 1.6), z_range=(-1.0, 3.0),
                  pillar_size=0.4, max_pillars=64, max_points_per_pillar=4)


class TestScatter:
    def test_single_pillar_single_column(self):
        emb = ad.tensor([[1.0, 2.0, 3.0]])
        bev = scatter_to_bev(emb, np.array([[0, 0]]), GRID)
        assert bev.shape == (3, 8, 8)
        nz = np.nonzero(bev.features.data)
        assert set(zip(nz[1], nz[2])) == {(0, 0)}
        np.testing.assert_array_equal(bev.features.data[:, 0, 0], [1, 2, 3])

    def test_scatter_gather_round_trip(self):
        rng = np.random.default_rng(0)
        emb = ad.tensor(rng.normal(size=(5, 4)))
        coords = np.array([[0, 0], [1, 3], [7, 7], [2, 2], [5, 1]])
        bev = scatter_to_bev(emb, coords, GRID)
        back = gather_from_bev(bev, coords)
        np.testing.assert_array_equal(back.data, emb.data)

    def test_empty_pillar_set_gives_zero_map(self):
        bev = scatter_to_bev(ad.tensor(np.zeros((0, 4))), np.zeros((0, 2)), GRID)
        np.testing.assert_array_equal(bev.features.data, 0.0)

    def test_duplicate_coords_rejected(self):
        with pytest.raises(ContractError):
            scatter_to_bev(ad.tensor(np.ones((2, 3))), np.array([[1, 1], [1, 1]]), GRID)

    def test_adjointness_numerically(self):
        # <scatter(x), y> == <x, gather(y)> for random x, y
        rng = np.random.default_rng(1)
        coords = np.array([[0, 1], [4, 4], [6, 2]])
        x = rng.normal(size=(3, 4))
        y = rng.normal(size=(4, 8, 8))
        bev = scatter_to_bev(ad.tensor(x), coords, GRID)
        lhs = float((bev.features.data * y).sum())
        gathered = gather_from_bev(BEVFeatureMap(ad.tensor(y), GRID, ""), coords)
        rhs = float((x * gathered.data).sum())
        assert abs(lhs - rhs) < 1e-12

    def test_scatter_gradient(self):
        rng = np.random.default_rng(2)
        emb = ad.tensor(rng.normal(size=(3, 2)), requires_grad=True)
        coords = np.array([[0, 0], [3, 3], [7, 1]])

        def f():
            bev = scatter_to_bev(emb, coords, GRID)
            return ad.reduce_sum(ad.sigmoid(bev.features))

        assert grad_check(f, {"emb": emb}) < 1e-4


class TestBackbone:
    def make(self, rng, in_ch=4):
        return BackboneParams.create(rng, in_ch, block_channels=(3, 5))

    def test_output_spatial_dims_match_input(self):
        rng = np.random.default_rng(0)
        params = self.make(rng)
        bev = BEVFeatureMap(ad.tensor(rng.normal(size=(4, 8, 8))), GRID, "lidar")
        out = backbone_forward(bev, params)
        assert out.shape == (8, 8, 8)
        assert out.shape[0] == params.out_channels

    def test_zero_input_zero_biases_gives_zero(self):
        rng = np.random.default_rng(1)
        params = self.make(rng)
        bev = BEVFeatureMap(ad.tensor(np.zeros((4, 8, 8))), GRID, "lidar")
        out = backbone_forward(bev, params)
        np.testing.assert_array_equal(out.features.data, 0.0)

    def test_indivisible_size_rejected(self):
        rng = np.random.default_rng(2)
        params = self.make(rng)
        bev = BEVFeatureMap(ad.tensor(np.zeros((4, 6, 8))), GRID, "lidar")
        with pytest.raises(ShapeError):
            backbone_forward(bev, params)

    def test_gradient_through_backbone(self):
        rng = np.random.default_rng(3)
        params = self.make(rng, in_ch=2)
        x = ad.tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
        names = params.params("bb")
        names["x"] = x

        def f():
            out = backbone_forward(BEVFeatureMap(x, GRID, "lidar"), params)
            return ad.mean(ad.sigmoid(out.features))

        assert grad_check(f, names) < 1e-4

    def test_translation_consistency(self):
        # shifting the input by 4 cells shifts the output by 4 cells (interior)
        rng = np.random.default_rng(4)
        params = self.make(rng, in_ch=2)
        grid = GridConfig(x_range=(0.0, 9.6), y_range=(-4.8, 4.8), z_range=(-1.0, 3.0),
                          pillar_size=0.4, max_pillars=64, max_points_per_pillar=4)
        x = np.zeros((2, 24, 24))
        x[:, 8:12, 8:12] = rng.normal(size=(2, 4, 4))
        out = backbone_forward(BEVFeatureMap(ad.tensor(x), grid, "l"), params).features.data
        xs = np.roll(x, 4, axis=2)
        outs = backbone_forward(BEVFeatureMap(ad.tensor(xs), grid, "l"), params).features.data
        np.testing.assert_allclose(outs[:, 6:18, 10:22], out[:, 6:18, 6:18], atol=1e-10)
