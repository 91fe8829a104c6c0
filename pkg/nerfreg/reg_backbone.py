"""
3D Feature Pyramid Backbone
Residual 3D convolutional encoder with a top-down lateral decoder over masked
voxel grids, flattening of masked voxels and spherical-neighborhood pooling
down to a bounded number of feature points.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import SCENE_BBOX
from .errors import EmptyMaskError
from .field_extract import VoxelGridSample, voxel_centers

logger = logging.getLogger(__name__)

MAX_FEATURE_POINTS = 1500


@dataclass
class FeatureGrid:
    features: torch.Tensor  # (X, Y, Z, C')
    mask: torch.Tensor  # (X, Y, Z) bool
    bbox: Tuple[float, ...] = SCENE_BBOX


@dataclass
class FeaturePointSet:
    points: torch.Tensor  # (N, 3)
    features: torch.Tensor  # (N, C')
    radius: float = 0.0
    n_iterations: int = 0

    def __len__(self) -> int:
        return int(self.points.shape[0])


class MaskedInstanceNorm3d(nn.Module):
    """Per-sample, per-channel normalization using only voxels inside the mask."""

    def __init__(self, channels: int, bias: bool = True, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels)) if bias else None

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        dims = (2, 3, 4)
        count = mask.sum(dim=dims, keepdim=True).clamp(min=1.0)
        mean = (x * mask).sum(dim=dims, keepdim=True) / count
        var = (((x - mean) * mask) ** 2).sum(dim=dims, keepdim=True) / count
        out = (x - mean) / torch.sqrt(var + self.eps) * self.weight.view(1, -1, 1, 1, 1)
        if self.bias is not None:
            out = out + self.bias.view(1, -1, 1, 1, 1)
        return out * mask


class ResidualBlock3d(nn.Module):

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, bias: bool = True):
        super().__init__()
        # no conv bias ahead of an instance norm: the mean subtraction removes it
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1, bias=False)
        self.norm1 = MaskedInstanceNorm3d(out_channels, bias)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = MaskedInstanceNorm3d(out_channels, bias)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Conv3d(in_channels, out_channels, 1, stride=stride, bias=False)
            self.shortcut_norm = MaskedInstanceNorm3d(out_channels, bias)
        self.stride = stride

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        out_mask = F.max_pool3d(mask, 3, stride=self.stride, padding=1) if self.stride != 1 else mask
        out = F.relu(self.norm1(self.conv1(x), out_mask))
        out = self.norm2(self.conv2(out), out_mask)
        skip = x if self.shortcut is None else self.shortcut_norm(self.shortcut(x), out_mask)
        return F.relu(out + skip) * out_mask, out_mask


class FPN3D(nn.Module):
    """
    Stem, three stride-2 residual stages and a top-down decoder with 1x1
    lateral connections. Only the finest decoder level is returned, rescaled
    to the input resolution.
    """

    def __init__(self, in_channels: int = 7, widths: Sequence[int] = (32, 64, 128),
                 out_channels: int = 128, bias: bool = True):
        super().__init__()
        self.stem = nn.Conv3d(in_channels, widths[0], 3, padding=1, bias=False)
        self.stem_norm = MaskedInstanceNorm3d(widths[0], bias)
        stages, prev = [], widths[0]
        for width in widths:
            stages.append(ResidualBlock3d(prev, width, stride=2, bias=bias))
            prev = width
        self.stages = nn.ModuleList(stages)
        self.laterals = nn.ModuleList([nn.Conv3d(w, out_channels, 1, bias=bias) for w in widths])
        self.smooth = nn.Conv3d(out_channels, out_channels, 3, padding=1, bias=bias)
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """
        Args:
            x: (B, C_in, X, Y, Z) voxel features
            mask: (B, X, Y, Z) bool

        Returns:
            (B, C', X, Y, Z), zero outside the mask
        """
        m = mask[:, None].to(x.dtype)
        x = x * m
        out = F.relu(self.stem_norm(self.stem(x), m))
        skips = []
        level_mask = m
        for stage in self.stages:
            out, level_mask = stage(out, level_mask)
            skips.append(out)

        top = self.laterals[-1](skips[-1])
        for lateral, skip in zip(reversed(self.laterals[:-1]), reversed(skips[:-1])):
            top = lateral(skip) + F.interpolate(top, size=skip.shape[-3:], mode="trilinear", align_corners=False)
        finest = self.smooth(top)
        finest = F.interpolate(finest, size=x.shape[-3:], mode="trilinear", align_corners=False)
        return finest * m


def sample_to_tensors(sample: VoxelGridSample, device="cpu") -> Tuple[torch.Tensor, torch.Tensor]:
    """(1, 7, X, Y, Z) features with unmasked voxels zeroed, and the (1, X, Y, Z) mask."""
    grid = torch.as_tensor(np.asarray(sample.grid, dtype=np.float32), device=device)
    mask = torch.as_tensor(np.asarray(sample.mask, dtype=bool), device=device)
    grid = grid * mask[..., None]
    return grid.permute(3, 0, 1, 2)[None].contiguous(), mask[None]


def fpn3d(sample: VoxelGridSample, network: FPN3D) -> FeatureGrid:
    if sample.is_empty:
        raise EmptyMaskError("voxel grid mask is empty")
    device = next(network.parameters()).device
    x, mask = sample_to_tensors(sample, device)
    features = network(x, mask)[0].permute(1, 2, 3, 0)
    return FeatureGrid(features, mask[0], tuple(sample.bbox))


def flatten(grid: FeatureGrid, mask: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Masked voxels' (center, feature) pairs in x-fastest order."""
    mask = grid.mask if mask is None else torch.as_tensor(mask, device=grid.features.device)
    if not bool(mask.any()):
        raise EmptyMaskError("cannot flatten an empty mask")
    centers = torch.as_tensor(voxel_centers(mask.shape, grid.bbox), dtype=grid.features.dtype,
                              device=grid.features.device)
    order = (2, 1, 0)
    flat_mask = mask.permute(order).reshape(-1)
    points = centers.permute(order + (3,)).reshape(-1, 3)[flat_mask]
    features = grid.features.permute(order + (3,)).reshape(-1, grid.features.shape[-1])[flat_mask]
    return points, features


def grid_pool(points: torch.Tensor, features: torch.Tensor, radius: float,
              origin: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Replace the points of each non-empty cubic cell by their centroid and mean feature."""
    cells = torch.floor((points - origin) / radius).long()
    _, inverse = torch.unique(cells, dim=0, return_inverse=True)
    n_cells = int(inverse.max()) + 1
    counts = torch.zeros(n_cells, dtype=points.dtype, device=points.device).index_add_(
        0, inverse, torch.ones_like(points[:, 0]))
    pooled_points = torch.zeros((n_cells, 3), dtype=points.dtype, device=points.device).index_add(
        0, inverse, points) / counts[:, None]
    pooled_features = torch.zeros((n_cells, features.shape[1]), dtype=features.dtype,
                                  device=features.device).index_add(0, inverse, features)
    pooled_features = pooled_features / counts[:, None].to(features.dtype)
    return pooled_points, pooled_features


def spherical_downsample(points: torch.Tensor, features: torch.Tensor, initial_radius: float,
                         max_points: int = MAX_FEATURE_POINTS,
                         origin: Sequence[float] = SCENE_BBOX[:3]) -> FeaturePointSet:
    """
    Pool with cells of doubling radius until fewer than max_points remain.

    Cells share a fixed origin so every coarser cell is a union of finer ones.
    Inputs already below the cap come back unchanged.
    """
    if points.shape[0] < max_points:
        return FeaturePointSet(points, features, 0.0, 0)
    origin_t = torch.as_tensor(origin, dtype=points.dtype, device=points.device)
    radius = float(initial_radius)
    iterations = 0
    while True:
        points, features = grid_pool(points, features, radius, origin_t)
        iterations += 1
        if points.shape[0] < max_points:
            break
        radius *= 2.0
    logger.debug(f"Downsampled to {points.shape[0]} points after {iterations} pooling passes (radius {radius:.4f})")
    return FeaturePointSet(points, features, radius, iterations)
