"""Tests for transmittance, compositing, the hash-grid field, occupancy grid, marching and training."""

import math

import numpy as np
import pytest
import torch

from nerfreg.config import NerfTrainConfig
from nerfreg.errors import InvalidArgumentError
from nerfreg.geometry import Intrinsics
from nerfreg.nerf_core import (FieldQuery, HashGridEncoder, NerfBlock, NeRFField, OccupancyGrid, RaySamples,
                               composite, march_and_prune, nerf_learning_rate, render_ray, render_rays,
                               transmittance, train_block, update_occupancy)
from nerfreg.scene_synth import BlockDataset, Primitive, SceneSpec, generate_trajectory, render_views


class TestTransmittance:
    def test_empty_space(self):
        np.testing.assert_array_equal(transmittance(torch.zeros(5), torch.full((5,), 0.1)).numpy(), np.ones(5))

    def test_single_sample(self):
        T = transmittance(torch.tensor([2.0], dtype=torch.float64), torch.tensor([0.5], dtype=torch.float64),
                          include_final=True)
        assert float(T[1]) == pytest.approx(math.exp(-1.0), abs=1e-12)

    def test_multiplicative(self, rng):
        sigmas = torch.as_tensor(rng.random((1000, 12)) * 3.0)
        deltas = torch.as_tensor(rng.random((1000, 12)) * 0.2 + 0.01)
        full = transmittance(sigmas, deltas, include_final=True)[:, -1]
        splits = rng.integers(1, 12, size=1000)
        for k in map(int, np.unique(splits)):
            rows = torch.as_tensor(splits == k)
            first = transmittance(sigmas[rows, :k], deltas[rows, :k], include_final=True)[:, -1]
            second = transmittance(sigmas[rows, k:], deltas[rows, k:], include_final=True)[:, -1]
            np.testing.assert_allclose(full[rows].numpy(), (first * second).numpy(), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("sigmas, deltas", [([-1.0], [0.1]), ([1.0], [0.0]), ([1.0, 2.0], [0.1])])
    def test_invalid_inputs(self, sigmas, deltas):
        with pytest.raises(InvalidArgumentError):
            transmittance(sigmas, deltas)


class TestComposite:
    def test_opaque_sample(self):
        rgb, opacity, _ = composite(torch.tensor([1e6], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64),
                                    torch.tensor([[0.2, 0.4, 0.6]], dtype=torch.float64))
        np.testing.assert_allclose(rgb.numpy(), [0.2, 0.4, 0.6], atol=1e-12)
        assert float(opacity) == pytest.approx(1.0)

    def test_empty(self):
        rgb, opacity, _ = composite(torch.zeros(4), torch.full((4,), 0.1), torch.rand(4, 3))
        np.testing.assert_array_equal(rgb.numpy(), np.zeros(3))
        assert float(opacity) == 0.0

    def test_two_half_transparent_samples(self):
        ln2 = math.log(2.0)
        rgb, _, weights = composite(torch.tensor([ln2, ln2], dtype=torch.float64),
                                    torch.ones(2, dtype=torch.float64),
                                    torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], dtype=torch.float64))
        np.testing.assert_allclose(rgb.numpy(), [0.5, 0.25, 0.0], atol=1e-12)
        np.testing.assert_allclose(weights.numpy(), [0.5, 0.25], atol=1e-12)


class TabulatedField(torch.nn.Module):
    """Field that returns fixed per-sample densities and colors in query order."""

    def __init__(self, sigmas, colors):
        super().__init__()
        self.hidden = torch.nn.Linear(1, 1).double()
        self.sigmas, self.colors = sigmas, colors

    def query(self, x, d):
        n = x.shape[0]
        return FieldQuery(self.sigmas, torch.zeros((n, 1), dtype=x.dtype), self.colors,
                          torch.zeros(n, dtype=torch.bool))


@pytest.mark.parametrize("seed", range(5))
def test_render_ray_gradcheck(seed):
    rng = np.random.default_rng(seed)
    t = torch.as_tensor(np.sort(rng.uniform(2.0, 4.0, size=(1, 8)), axis=-1))
    samples = RaySamples(torch.tensor([[-3.0, 0.0, 0.0]], dtype=torch.float64),
                         torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64), t,
                         torch.as_tensor(rng.uniform(0.05, 0.3, size=(1, 8))), torch.ones(1, 8, dtype=torch.bool))
    sigmas = torch.as_tensor(rng.uniform(0.1, 3.0, size=8)).requires_grad_(True)
    colors = torch.as_tensor(rng.uniform(0.0, 1.0, size=(8, 3))).requires_grad_(True)

    def rendered(s, c):
        return render_ray(TabulatedField(s, c), samples, background=(1.0, 1.0, 1.0))[0]

    assert torch.autograd.gradcheck(rendered, (sigmas, colors), eps=1e-6, atol=1e-8, rtol=1e-3)


class TestHashGrid:
    def test_output_width_and_init_range(self):
        encoder = HashGridEncoder(n_levels=4, log2_table_size=8, feature_dim=2, base_resolution=4,
                                  finest_resolution=32)
        assert encoder.output_dim == 8
        assert float(encoder.tables.abs().max()) <= 1e-4
        assert encoder(torch.rand(10, 3) * 2 - 1).shape == (10, 8)

    def test_resolutions_must_increase(self):
        with pytest.raises(InvalidArgumentError):
            HashGridEncoder(n_levels=8, base_resolution=4, finest_resolution=5)

    def test_hash_within_table(self):
        encoder = HashGridEncoder(n_levels=2, log2_table_size=6, base_resolution=4, finest_resolution=8)
        idx = encoder.hash(torch.randint(0, 10000, (100, 3)))
        assert int(idx.min()) >= 0 and int(idx.max()) < 64


class TestField:
    def test_untrained_ranges(self, tiny_nerf_config):
        field = NeRFField(tiny_nerf_config)
        x = torch.rand(50, 3) * 2 - 1
        d = torch.nn.functional.normalize(torch.randn(50, 3), dim=-1)
        q = field.query(x, d)
        assert torch.all(torch.isfinite(q.sigma)) and torch.all(q.sigma >= 0)
        assert torch.all((q.color >= 0) & (q.color <= 1))

    def test_density_ignores_direction(self, tiny_nerf_config):
        field = NeRFField(tiny_nerf_config)
        x = torch.rand(20, 3) * 2 - 1
        a = field.query(x, torch.tensor([[1.0, 0.0, 0.0]]).expand(20, 3))
        b = field.query(x, torch.tensor([[0.0, 0.0, -1.0]]).expand(20, 3))
        assert torch.equal(a.sigma, b.sigma)

    def test_zero_density_outside_box(self, tiny_nerf_config):
        field = NeRFField(tiny_nerf_config)
        q = field.query(torch.tensor([[1.5, 0.0, 0.0]]), torch.tensor([[1.0, 0.0, 0.0]]))
        assert float(q.sigma[0]) == 0.0
        assert bool(q.out_of_bounds[0])


class TestOccupancy:
    def test_zero_field_clears(self):
        grid = OccupancyGrid.full(8)
        for _ in range(100):
            update_occupancy(grid, lambda x: torch.zeros(x.shape[0]))
        assert not grid.bits.any()

    def test_dense_field_sets_all(self):
        grid = OccupancyGrid(8)
        update_occupancy(grid, lambda x: torch.full((x.shape[0],), 10.0))
        assert grid.bits.all()

    def test_sphere_volume(self):
        grid = OccupancyGrid(64)
        generator = torch.Generator().manual_seed(0)
        sphere = lambda x: (torch.linalg.norm(x, dim=-1) < 0.8).float() * 10.0
        for _ in range(50):
            update_occupancy(grid, sphere, generator=generator)
        cell_volume = (2.0 / 64) ** 3
        volume = float(grid.bits.sum()) * cell_volume
        expected = 4.0 / 3.0 * math.pi * 0.8 ** 3
        assert abs(volume - expected) / expected < 0.2

    def test_packed_round_trip(self):
        grid = OccupancyGrid(8)
        grid.set_bits(torch.rand(8, 8, 8) < 0.5)
        from nerfreg.utils.grid_io import unpack_mask
        restored = OccupancyGrid.from_bits(unpack_mask(grid.packed(), (8, 8, 8)))
        assert torch.equal(restored.bits, grid.bits)


class TestMarching:
    def _rays(self, n=16):
        origins = torch.tensor([[3.0, 0.0, 0.0]]).expand(n, 3).clone()
        targets = torch.rand(n, 3) * 0.5 - 0.25
        dirs = torch.nn.functional.normalize(targets - origins, dim=-1)
        return origins, dirs

    def test_all_set_gives_full_count(self):
        samples = march_and_prune(*self._rays(), OccupancyGrid.full(16), n_samples=1024)
        assert torch.all(samples.count() == 1024)

    def test_all_clear_gives_none(self):
        samples = march_and_prune(*self._rays(), OccupancyGrid(16), n_samples=64)
        assert int(samples.count().sum()) == 0

    def test_retained_samples_in_set_cells(self):
        grid = OccupancyGrid(16)
        bits = torch.zeros(16, 16, 16, dtype=torch.bool)
        bits[8:] = True
        grid.set_bits(bits)
        samples = march_and_prune(*self._rays(), grid, n_samples=128)
        points = samples.points[samples.valid]
        assert torch.all(grid.lookup(points))
        idx, _ = grid.cell_index(points)
        assert torch.all(idx[:, 0] >= 8)

    def test_missed_ray_is_empty(self, tiny_nerf_config):
        origins = torch.tensor([[3.0, 3.0, 3.0]])
        dirs = torch.tensor([[1.0, 0.0, 0.0]])
        samples = march_and_prune(origins, dirs, OccupancyGrid.full(8), n_samples=16)
        rgb, empty = render_ray(NeRFField(tiny_nerf_config), samples, background=(0.1, 0.2, 0.3))
        assert empty
        np.testing.assert_allclose(rgb.detach().numpy(), [0.1, 0.2, 0.3], atol=1e-7)


def test_learning_rate_schedule():
    config = NerfTrainConfig()
    assert nerf_learning_rate(0, config) == 1e-2
    assert nerf_learning_rate(4999, config) == 1e-2
    assert nerf_learning_rate(5000, config) == 1e-2 * 0.33


def _sphere_block(intr, n_views=8, size=16):
    scene = SceneSpec([Primitive("sphere", (0.0, 0.0, 0.0), (0.4,) * 3, (1.0, 0.0, 0.0))])
    poses = generate_trajectory(n_views, seed=0)
    return BlockDataset(render_views(scene, poses, intr), poses, intr)


class TestTrainBlock:
    def test_zero_iterations_checkpoint(self, tmp_path, tiny_nerf_config):
        intr = Intrinsics.from_fov(8, 8, 40.0)
        data = _sphere_block(intr, n_views=4)
        path = tmp_path / "block.ckpt"
        train_block(data, tiny_nerf_config, path, tmp_path / "log.jsonl")
        block = NerfBlock.load(path)
        assert block.grid.bits.all()
        assert len(block.poses) == 4
        image = block.render_image(block.poses[0], n_samples=16)
        assert image.shape == (8, 8, 3)
        assert np.all(np.isfinite(image))

    def test_short_run_writes_log(self, tmp_path, tiny_nerf_config):
        intr = Intrinsics.from_fov(8, 8, 40.0)
        data = _sphere_block(intr, n_views=4)
        config = NerfTrainConfig(**{**tiny_nerf_config.__dict__, "iterations": 3, "log_every": 1})
        train_block(data, config, tmp_path / "b.ckpt", tmp_path / "log.jsonl")
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 3

    @pytest.mark.slow
    def test_desk_scale_psnr_and_density(self, tmp_path):
        intr = Intrinsics.from_fov(128, 128, 40.0)
        scene = SceneSpec([
            Primitive("sphere", (0.0, 0.0, 0.0), (0.3,) * 3, (1.0, 0.0, 0.0)),
            Primitive("box", (0.3, 0.3, 0.0), (0.12, 0.12, 0.12), (0.1, 0.6, 0.2), pattern="checker"),
            Primitive("cylinder", (-0.3, 0.2, 0.0), (0.1, 0.1, 0.2), (0.2, 0.3, 0.9), pattern="stripes"),
        ])
        poses = generate_trajectory(60, seed=0)
        data = BlockDataset(render_views(scene, poses, intr), poses, intr)
        config = NerfTrainConfig(iterations=2000, lr_milestones=(1000, 1500, 1800))
        block = train_block(data, config)
        assert block.training_psnr(data, max_views=4) >= 25.0
        with torch.no_grad():
            inside = float(block.field.sigma(torch.zeros(1, 3))[0])
            outside = float(block.field.sigma(torch.tensor([[0.0, -0.9, 0.9]]))[0])
        assert inside > 100.0 * max(outside, 1e-6)
