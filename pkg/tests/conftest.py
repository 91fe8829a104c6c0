"""
Shared pytest fixtures for the nerfreg test suite.

Run with:
    pytest tests -v
    NERFREG_RUN_SLOW=1 pytest tests -v   # include desk-scale end-to-end runs
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

# Add the repository root to Python path
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from nerfreg.config import NerfTrainConfig, RegTrainConfig  # noqa: E402
from nerfreg.field_extract import VoxelGridSample, voxel_centers  # noqa: E402
from nerfreg.geometry import Intrinsics, look_at  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale end-to-end runs (set NERFREG_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("NERFREG_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set NERFREG_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _cpu_device(monkeypatch, tmp_path):
    monkeypatch.setenv("NERFREG_DEVICE", "cpu")
    monkeypatch.setenv("NERFREG_CACHE_DIR", str(tmp_path / "grid_cache"))
    torch.manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intrinsics():
    return Intrinsics.from_fov(16, 16, 40.0)


@pytest.fixture
def ring_poses():
    """Eight cameras on a ring of radius 3 around the origin."""
    angles = np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
    return [look_at([3.0 * np.cos(a), 3.0 * np.sin(a), 0.8]) for a in angles]


@pytest.fixture
def tiny_nerf_config():
    return NerfTrainConfig(
        iterations=0,
        batch_rays=64,
        n_samples=32,
        n_levels=4,
        log2_table_size=10,
        base_resolution=4,
        finest_resolution=32,
        hidden_dim=16,
        occupancy_resolution=8,
    )


@pytest.fixture
def tiny_reg_config():
    return RegTrainConfig(
        feature_dim=16,
        backbone_widths=(8, 8, 16),
        n_layers=1,
        n_heads=2,
        pos_frequencies=2,
        max_points=200,
        epochs=1,
    )


def make_sphere_sample(resolution: int = 8, radius: float = 0.6, shell: float = 0.3) -> VoxelGridSample:
    """Voxel grid whose mask is a spherical shell; radiance varies with position."""
    centers = voxel_centers((resolution,) * 3)
    dist = np.linalg.norm(centers, axis=-1)
    mask = np.abs(dist - radius) < shell
    radiance = 0.5 + 0.5 * np.sin(3.0 * centers)
    alpha = np.where(mask, 0.8, 0.0)[..., None]
    grid = np.concatenate([centers, radiance * mask[..., None], alpha], axis=-1).astype(np.float32)
    surface = np.clip(1.0 - np.abs(dist - radius) / shell, 0.0, 1.0).astype(np.float32)
    return VoxelGridSample(grid=grid, mask=mask, surface=surface, opacity=alpha[..., 0].astype(np.float32))


@pytest.fixture
def sphere_sample():
    return make_sphere_sample()
