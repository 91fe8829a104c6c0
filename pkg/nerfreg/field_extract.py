"""
Voxel Grid Extraction
Turns a trained NeRF block into the registration network's input: a dense
[coords, view-averaged radiance, alpha] grid with an occupancy / density /
surface-field mask, plus surface-field evaluators used as supervision.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .config import SCENE_BBOX, ExtractConfig
from .errors import InvalidArgumentError
from .geometry import CameraPose, camera_centers
from .nerf_core import NerfBlock, NeRFField, OccupancyGrid, ray_box_intersection
from .utils.grid_io import (from_x_fastest, read_surface_sidecar, read_voxel_grid, sidecar_path,
                            to_x_fastest, write_surface_sidecar, write_voxel_grid)
from .utils.timing import timed_function

logger = logging.getLogger(__name__)

DensityFn = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class FieldSample:
    sigma: float
    radiance: Tuple[float, float, float]
    surface: float
    alpha: float


@dataclass
class VoxelGridSample:
    """
    Dense (X, Y, Z, 7) grid of [coords, radiance, alpha] with its mask.

    `surface` and `opacity` hold the dense view-max surface field and per-voxel
    opacity used as cached supervision; the three partial masks are kept when
    the sample comes straight from extraction.
    """
    grid: np.ndarray
    mask: np.ndarray
    bbox: Tuple[float, ...] = SCENE_BBOX
    surface: Optional[np.ndarray] = None
    opacity: Optional[np.ndarray] = None
    mask_occ: Optional[np.ndarray] = None
    mask_df: Optional[np.ndarray] = None
    mask_sf: Optional[np.ndarray] = None

    @property
    def resolution(self) -> Tuple[int, int, int]:
        return tuple(self.grid.shape[:3])

    @property
    def voxel_size(self) -> float:
        return float(self.bbox[3] - self.bbox[0]) / self.resolution[0]

    @property
    def is_empty(self) -> bool:
        return not bool(self.mask.any())

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())


def voxel_centers(resolution: Sequence[int], bbox: Sequence[float] = SCENE_BBOX) -> np.ndarray:
    """
    Cell centers of a regular lattice over the box.

    Returns:
        (X, Y, Z, 3) float64 array; index [i, j, k] is the center of cell (i, j, k)
    """
    resolution = tuple(int(r) for r in resolution)
    if len(resolution) != 3 or min(resolution) < 1:
        raise InvalidArgumentError(f"resolution components must be >= 1, got {resolution}")
    lo = np.asarray(bbox[:3], dtype=np.float64)
    hi = np.asarray(bbox[3:], dtype=np.float64)
    axes = [lo[a] + (np.arange(resolution[a]) + 0.5) * (hi[a] - lo[a]) / resolution[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def density_mask(sigmas, sigma_t: float = 0.7) -> np.ndarray:
    """Bits where sigma > sigma_t (strict)."""
    sigmas = np.asarray(sigmas)
    if np.any(sigmas < 0):
        raise InvalidArgumentError("densities must be non-negative")
    return sigmas > sigma_t


def alpha_composite_value(sigma, delta):
    """alpha = 1 - exp(-sigma * delta)."""
    return -np.expm1(-np.asarray(sigma, dtype=np.float64) * delta)


def surface_field_closed_form(transmittance_before, sigma_t, delta):
    """S = T(t - delta) * (1 - exp(-2 sigma_t delta)), density constant on [t - delta, t + delta]."""
    return np.asarray(transmittance_before) * -np.expm1(-2.0 * np.asarray(sigma_t, dtype=np.float64) * delta)


def _density_fn(source) -> DensityFn:
    if isinstance(source, NerfBlock):
        return source.field.sigma
    if isinstance(source, NeRFField):
        return source.sigma
    return source


def _radiance_field(source):
    return source.field if isinstance(source, NerfBlock) else source


def surface_field_batch(density_fn: DensityFn, origins: torch.Tensor, directions: torch.Tensor,
                        t: torch.Tensor, delta: float, n_steps: int = 256,
                        grid: Optional[OccupancyGrid] = None,
                        bbox: Sequence[float] = SCENE_BBOX) -> torch.Tensor:
    """
    Surface field at depth t along each ray.

    Transmittance is marched with n_steps midpoint samples from the ray's
    entry into the box up to t - delta; samples in cleared occupancy cells
    contribute no density. Gradients flow to t and the ray geometry.

    Returns:
        (R,) tensor in [0, 1]
    """
    if torch.any(t <= delta):
        raise InvalidArgumentError("surface field needs t > delta")
    t_near, _, _ = ray_box_intersection(origins, directions, bbox)
    end = t - delta
    start = torch.minimum(t_near.detach(), end)
    step = (end - start) / n_steps
    slots = torch.arange(n_steps, dtype=origins.dtype, device=origins.device) + 0.5
    s = start[:, None] + slots * step[:, None]
    points = origins[:, None, :] + s[..., None] * directions[:, None, :]
    flat = points.reshape(-1, 3)
    sigmas = density_fn(flat).reshape(s.shape).to(origins.dtype)
    if grid is not None:
        sigmas = torch.where(grid.lookup(flat).reshape(s.shape), sigmas, torch.zeros_like(sigmas))
    trans = torch.exp(-torch.sum(sigmas, dim=-1) * step)

    at_t = origins + t[:, None] * directions
    sigma_t = density_fn(at_t).reshape(-1).to(origins.dtype)
    return (trans * -torch.expm1(-2.0 * sigma_t * delta)).clamp(0.0, 1.0)


def surface_field(field, origin, direction, t: float, delta: float, n_steps: int = 256,
                  grid: Optional[OccupancyGrid] = None) -> float:
    """Scalar surface field S(t) on one ray."""
    if not (t > delta > 0):
        raise InvalidArgumentError(f"need t > delta > 0, got t={t}, delta={delta}")
    o = torch.as_tensor(np.asarray(origin, dtype=np.float64)).reshape(1, 3)
    d = torch.as_tensor(np.asarray(direction, dtype=np.float64)).reshape(1, 3)
    if abs(float(torch.linalg.norm(d)) - 1.0) > 1e-6:
        raise InvalidArgumentError("ray direction must be unit length")
    with torch.no_grad():
        value = surface_field_batch(_density_fn(field), o, d, torch.tensor([float(t)], dtype=torch.float64),
                                    delta, n_steps, grid)
    return float(value[0])


def view_max_surface_field(points, field, poses: Sequence[CameraPose], delta: float,
                           n_steps: int = 256, grid: Optional[OccupancyGrid] = None,
                           chunk_size: int = 4096) -> torch.Tensor:
    """
    Maximum surface field over the rays from every training camera through each point.

    Rays whose camera lies within delta of the point are skipped; a point
    with every ray skipped is an error. Points outside the box get S = 0.

    Returns:
        (N,) tensor in the dtype of `points`
    """
    if not poses:
        raise InvalidArgumentError("view_max_surface_field needs at least one pose")
    points = torch.as_tensor(points)
    single = points.ndim == 1
    points = points.reshape(-1, 3)
    density_fn = _density_fn(field)
    centers = torch.as_tensor(camera_centers(poses), dtype=points.dtype, device=points.device)
    lo = torch.tensor(SCENE_BBOX[:3], dtype=points.dtype, device=points.device)
    hi = torch.tensor(SCENE_BBOX[3:], dtype=points.dtype, device=points.device)

    results = []
    for chunk in torch.split(points, chunk_size):
        best = torch.full((chunk.shape[0],), -1.0, dtype=points.dtype, device=points.device)
        for center in centers:
            offset = chunk - center
            dist = torch.linalg.norm(offset, dim=-1)
            usable = dist > delta
            if not usable.any():
                continue
            safe_dist = torch.where(usable, dist, torch.full_like(dist, 2.0 * delta + 1.0))
            dirs = offset / safe_dist[:, None]
            origins = center.expand_as(chunk)
            value = surface_field_batch(density_fn, origins, dirs, safe_dist, delta, n_steps, grid)
            best = torch.maximum(best, torch.where(usable, value, torch.full_like(value, -1.0)))
        if torch.any(best < 0):
            raise InvalidArgumentError("every camera ray through a query point was skipped")
        inside = torch.all((chunk >= lo) & (chunk <= hi), dim=-1)
        results.append(torch.where(inside, best, torch.zeros_like(best)))
    out = torch.cat(results)
    return out[0] if single else out


def view_averaged_radiance(points, field, poses: Sequence[CameraPose], chunk_size: int = 16384) -> torch.Tensor:
    """
    Mean of c(x, d_i) over the directions d_i from each camera center to x.

    Cameras coinciding with x are skipped; all skipped is an error.
    """
    if not poses:
        raise InvalidArgumentError("view_averaged_radiance needs at least one pose")
    field = _radiance_field(field)
    points = torch.as_tensor(points)
    single = points.ndim == 1
    points = points.reshape(-1, 3)
    centers = torch.as_tensor(camera_centers(poses), dtype=points.dtype, device=points.device)

    results = []
    for chunk in torch.split(points, chunk_size):
        _, embedding, _ = field.density(chunk)
        total = torch.zeros((chunk.shape[0], 3), dtype=embedding.dtype, device=chunk.device)
        count = torch.zeros(chunk.shape[0], dtype=embedding.dtype, device=chunk.device)
        for center in centers:
            offset = chunk - center
            dist = torch.linalg.norm(offset, dim=-1, keepdim=True)
            usable = dist[:, 0] > 1e-12
            dirs = offset / torch.where(dist > 1e-12, dist, torch.ones_like(dist))
            color = field.color(embedding, dirs.to(embedding.dtype))
            total = total + torch.where(usable[:, None], color, torch.zeros_like(color))
            count = count + usable.to(count.dtype)
        if torch.any(count == 0):
            raise InvalidArgumentError("every camera coincides with a query point")
        results.append(total / count[:, None])
    out = torch.cat(results)
    return out[0] if single else out


def query_field_sample(block: NerfBlock, x, delta: float, n_steps: int = 256) -> FieldSample:
    """All supervision quantities at one point of a block."""
    point = torch.as_tensor(np.asarray(x, dtype=np.float32), device=block.device).reshape(1, 3)
    with torch.no_grad():
        sigma = float(block.field.sigma(point)[0])
        radiance = view_averaged_radiance(point, block, block.poses)[0].cpu().numpy()
        surface = float(view_max_surface_field(point, block, block.poses, delta, n_steps, block.grid)[0])
    return FieldSample(sigma, tuple(float(c) for c in radiance), surface,
                       float(alpha_composite_value(sigma, delta)))


@timed_function("extract_voxel_grid")
@torch.no_grad()
def extract_voxel_grid(block: NerfBlock, resolution: int = 64, sigma_t: float = 0.7, eta: float = 0.5,
                       march_steps: int = 256, chunk_size: int = 16384) -> VoxelGridSample:
    """
    Query a frozen block on a voxel lattice and build M = M_occ ∩ M_df ∩ M_sf.

    Args:
        block: Trained NeRF block
        resolution: Voxels per axis
        sigma_t: Density threshold (strict)
        eta: Surface-field threshold (strict)
        march_steps: Transmittance steps per surface-field ray
        chunk_size: Voxels per query batch

    Returns:
        VoxelGridSample; unmasked voxels keep coordinates with zeroed radiance and alpha
    """
    block.field.eval()
    shape = (resolution,) * 3
    centers = voxel_centers(shape)
    flat = to_x_fastest(centers)
    delta = 2.0 / resolution
    device = block.device
    points = torch.from_numpy(flat.astype(np.float32)).to(device)

    n = flat.shape[0]
    sigma = np.zeros(n, dtype=np.float32)
    m_occ = np.zeros(n, dtype=bool)
    for sl in _chunks(n, chunk_size):
        sigma[sl] = block.field.sigma(points[sl]).cpu().numpy()
        m_occ[sl] = block.grid.lookup(points[sl]).cpu().numpy()
    alpha = alpha_composite_value(sigma, delta).astype(np.float32)
    m_df = density_mask(sigma, sigma_t)

    # the surface field is only marched where the occupancy grid is set
    surface = np.zeros(n, dtype=np.float32)
    occupied = np.flatnonzero(m_occ)
    steps_chunk = max(1, chunk_size // 4)
    for start in range(0, len(occupied), steps_chunk):
        idx = occupied[start:start + steps_chunk]
        surface[idx] = view_max_surface_field(points[torch.from_numpy(idx)], block, block.poses, delta,
                                              march_steps, block.grid).cpu().numpy()
    m_sf = surface > eta
    mask = m_occ & m_df & m_sf

    radiance = np.zeros((n, 3), dtype=np.float32)
    masked = np.flatnonzero(mask)
    for start in range(0, len(masked), chunk_size):
        idx = masked[start:start + chunk_size]
        radiance[idx] = view_averaged_radiance(points[torch.from_numpy(idx)], block, block.poses).cpu().numpy()

    features = np.concatenate([flat.astype(np.float32), radiance,
                               np.where(mask, alpha, 0.0)[:, None].astype(np.float32)], axis=1)
    sample = VoxelGridSample(
        grid=from_x_fastest(features, shape),
        mask=from_x_fastest(mask, shape),
        bbox=SCENE_BBOX,
        surface=from_x_fastest(surface, shape),
        opacity=from_x_fastest(alpha, shape),
        mask_occ=from_x_fastest(m_occ, shape),
        mask_df=from_x_fastest(m_df, shape),
        mask_sf=from_x_fastest(m_sf, shape),
    )
    if sample.is_empty:
        logger.warning("Extracted voxel grid has an empty mask; registration will refuse this block")
    else:
        logger.info(f"Extracted {resolution}^3 grid: {sample.n_masked} masked of {int(m_occ.sum())} occupied voxels")
    return sample


def extract_from_config(block: NerfBlock, config: ExtractConfig) -> VoxelGridSample:
    return extract_voxel_grid(block, config.resolution, config.sigma_t, config.eta,
                              config.march_steps, config.chunk_size)


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def save_voxel_grid(sample: VoxelGridSample, path) -> Path:
    """Write the DRGV file and, when present, the surface-field sidecar."""
    path = write_voxel_grid(path, sample.grid, sample.mask, sample.bbox)
    if sample.surface is not None and sample.opacity is not None:
        write_surface_sidecar(path, sample.surface, sample.opacity)
    return path


def load_voxel_grid(path, with_sidecar: bool = True) -> VoxelGridSample:
    grid, mask, bbox = read_voxel_grid(path)
    surface = opacity = None
    if with_sidecar and sidecar_path(path).exists():
        surface, opacity = read_surface_sidecar(path)
    return VoxelGridSample(grid=grid, mask=mask, bbox=bbox, surface=surface, opacity=opacity)


class GridSurfaceField:
    """
    Trilinear interpolation of a cached dense volume (surface field or opacity).

    Differentiable in the query points; points outside the box evaluate to 0.
    """

    def __init__(self, volume: np.ndarray, bbox: Sequence[float] = SCENE_BBOX, device="cpu"):
        volume = torch.as_tensor(np.asarray(volume, dtype=np.float32), device=device)
        # grid_sample reads (D, H, W) = (z, y, x)
        self.volume = volume.permute(2, 1, 0)[None, None].contiguous()
        self.lo = torch.tensor(bbox[:3], dtype=torch.float32, device=device)
        self.hi = torch.tensor(bbox[3:], dtype=torch.float32, device=device)

    def to(self, device) -> "GridSurfaceField":
        self.volume, self.lo, self.hi = self.volume.to(device), self.lo.to(device), self.hi.to(device)
        return self

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        pts = points.to(self.volume.dtype)
        normalized = 2.0 * (pts - self.lo) / (self.hi - self.lo) - 1.0
        sampled = F.grid_sample(self.volume, normalized.reshape(1, -1, 1, 1, 3),
                                mode="bilinear", padding_mode="border", align_corners=False)
        values = sampled.reshape(-1)
        inside = torch.all((pts >= self.lo) & (pts <= self.hi), dim=-1)
        return torch.where(inside, values, torch.zeros_like(values)).clamp(0.0, 1.0)


class NeRFSurfaceField:
    """Live view-max surface field against a block, using an evenly spaced subset of its cameras."""

    def __init__(self, block: NerfBlock, n_views: int = 8, n_steps: int = 64, delta: float = 2.0 / 64):
        for parameter in block.field.parameters():
            parameter.requires_grad_(False)
        self.block = block
        picks = np.linspace(0, len(block.poses) - 1, num=min(n_views, len(block.poses))).round().astype(int)
        self.poses = [block.poses[i] for i in sorted(set(picks.tolist()))]
        self.n_steps = n_steps
        self.delta = delta

    def __call__(self, points: torch.Tensor) -> torch.Tensor:
        pts = points.to(self.block.device, torch.float32)
        return view_max_surface_field(pts, self.block, self.poses, self.delta, self.n_steps, self.block.grid)


def surface_evaluator(sample: VoxelGridSample, supervision: str = "surface", device="cpu") -> GridSurfaceField:
    """Cached evaluator for a grid: the surface-field volume, or opacity for density supervision."""
    volume = sample.surface if supervision == "surface" else sample.opacity
    if volume is None:
        raise FileNotFoundError("voxel grid has no cached surface-field sidecar")
    return GridSurfaceField(volume, sample.bbox, device)


SurfaceFieldEvaluator = Union[GridSurfaceField, NeRFSurfaceField]
