"""Tests for the masked 3D feature pyramid, flattening and spherical downsampling."""

import numpy as np
import pytest
import torch

from nerfreg.errors import EmptyMaskError
from nerfreg.field_extract import voxel_centers
from nerfreg.reg_backbone import FPN3D, FeatureGrid, flatten, fpn3d, sample_to_tensors, spherical_downsample
from nerfreg.utils.grid_io import to_x_fastest

from conftest import make_sphere_sample


class TestFPN3D:
    def test_bias_free_zero_input(self):
        network = FPN3D(7, (4, 4, 8), 8, bias=False)
        x = torch.zeros(1, 7, 8, 8, 8)
        out = network(x, torch.ones(1, 8, 8, 8, dtype=torch.bool))
        assert torch.equal(out, torch.zeros_like(out))

    def test_output_shape(self):
        network = FPN3D(7, (4, 4, 8), 16)
        out = network(torch.randn(1, 7, 16, 16, 16), torch.ones(1, 16, 16, 16, dtype=torch.bool))
        assert out.shape == (1, 16, 16, 16, 16)

    def test_zero_outside_mask(self):
        network = FPN3D(7, (4, 4, 8), 8)
        mask = torch.zeros(1, 8, 8, 8, dtype=torch.bool)
        mask[:, 2:5, 2:5, 2:5] = True
        out = network(torch.randn(1, 7, 8, 8, 8), mask)
        assert torch.all(out[:, :, ~mask[0]] == 0)

    def test_batch_items_independent(self):
        network = FPN3D(7, (4, 4, 8), 8).eval()
        x = torch.randn(2, 7, 8, 8, 8)
        mask = torch.rand(2, 8, 8, 8) < 0.6
        out = network(x, mask)
        swapped = network(x.flip(0), mask.flip(0))
        torch.testing.assert_close(swapped, out.flip(0), atol=1e-5, rtol=1e-5)

    def test_empty_mask_rejected(self, sphere_sample):
        sphere_sample.mask[:] = False
        with pytest.raises(EmptyMaskError):
            fpn3d(sphere_sample, FPN3D(7, (4, 4, 8), 8))

    def test_feature_grid_from_sample(self, sphere_sample):
        grid = fpn3d(sphere_sample, FPN3D(7, (4, 4, 8), 8))
        assert grid.features.shape == (8, 8, 8, 8)
        assert torch.equal(grid.mask, torch.as_tensor(sphere_sample.mask))

    def test_unmasked_inputs_zeroed(self, sphere_sample):
        x, mask = sample_to_tensors(sphere_sample)
        assert torch.all(x[0][:, ~mask[0]] == 0)


class TestFlatten:
    def _grid(self, mask):
        features = torch.arange(int(np.prod(mask.shape)) * 2, dtype=torch.float32).reshape(*mask.shape, 2)
        return FeatureGrid(features, torch.as_tensor(mask))

    def test_single_voxel(self):
        mask = np.zeros((4, 4, 4), dtype=bool)
        mask[1, 2, 3] = True
        grid = self._grid(mask)
        points, features = flatten(grid)
        np.testing.assert_allclose(points.numpy(), voxel_centers((4, 4, 4))[1, 2, 3][None], atol=1e-6)
        assert torch.equal(features, grid.features[1, 2, 3][None])

    def test_full_mask_order(self):
        mask = np.ones((4, 4, 4), dtype=bool)
        points, _ = flatten(self._grid(mask))
        assert points.shape == (64, 3)
        np.testing.assert_allclose(points.numpy(), to_x_fastest(voxel_centers((4, 4, 4))), atol=1e-6)

    def test_random_mask_popcount(self, rng):
        mask = rng.random((5, 6, 7)) < 0.3
        points, features = flatten(self._grid(mask))
        assert points.shape[0] == features.shape[0] == int(mask.sum())

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            flatten(self._grid(np.zeros((2, 2, 2), dtype=bool)))


class TestSphericalDownsample:
    def test_small_input_unchanged(self):
        points, features = torch.rand(100, 3), torch.rand(100, 4)
        out = spherical_downsample(points, features, 0.05)
        assert torch.equal(out.points, points) and torch.equal(out.features, features)
        assert out.n_iterations == 0

    def test_full_grid_below_cap(self):
        centers = torch.as_tensor(to_x_fastest(voxel_centers((64, 64, 64))), dtype=torch.float32)
        features = torch.ones(centers.shape[0], 2)
        out = spherical_downsample(centers, features, 2.0 / 64 * 2.0)
        assert 1 <= len(out) < 1500

    def test_outputs_near_inputs(self):
        sample = make_sphere_sample(resolution=24, radius=0.6, shell=0.2)
        centers = torch.as_tensor(sample.grid[..., :3][sample.mask], dtype=torch.float64)
        out = spherical_downsample(centers, torch.ones(centers.shape[0], 1, dtype=torch.float64), 2.0 / 24,
                                   max_points=300)
        assert len(out) < 300
        nearest = torch.cdist(out.points, centers).min(dim=1).values
        assert torch.all(nearest <= np.sqrt(3.0) * out.radius + 1e-9)

    def test_features_are_cell_means(self):
        points = torch.tensor([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [0.9, 0.9, 0.9]])
        features = torch.tensor([[1.0], [3.0], [5.0]])
        out = spherical_downsample(points, features, 0.5, max_points=3)
        assert len(out) == 2
        assert sorted(out.features[:, 0].tolist()) == [2.0, 5.0]
