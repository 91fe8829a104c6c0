"""
Hash-Grid NeRF Blocks
Multiresolution hash encoding, density/radiance field, single-resolution
occupancy grid, ray marching, volume rendering and per-block training.
"""

import json
import logging
import math
from bisect import bisect_right
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .config import SCENE_BBOX, NerfTrainConfig, default_device
from .errors import InvalidArgumentError, NonFiniteLossError
from .geometry import CameraPose, Intrinsics, RigidTransform, camera_rays
from .scene_synth import BlockDataset
from .utils.checkpoint_io import decode_metadata, encode_metadata, load_archive, save_archive
from .utils.grid_io import pack_mask, unpack_mask
from .utils.timing import timed_function

logger = logging.getLogger(__name__)

HASH_PRIMES = (1, 2654435761, 805459861)
MAX_DENSITY = 1e4
_LOG_MAX_DENSITY = math.log(MAX_DENSITY)


def _as_tensor(values, dtype=None) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values if dtype is None else values.to(dtype)
    return torch.as_tensor(np.asarray(values), dtype=dtype or torch.float64)


def _exclusive_cumsum(x: torch.Tensor) -> torch.Tensor:
    zeros = torch.zeros_like(x[..., :1])
    return torch.cat([zeros, torch.cumsum(x, dim=-1)[..., :-1]], dim=-1)


def transmittance(sigmas, deltas, include_final: bool = False) -> torch.Tensor:
    """
    T_n = exp(-sum_{k<n} sigma_k delta_k) along the last axis.

    Args:
        sigmas: Non-negative densities
        deltas: Positive interval lengths, same shape
        include_final: Also return the transmittance past the last sample

    Returns:
        Tensor with one entry per sample (plus one if include_final)
    """
    sigmas, deltas = _as_tensor(sigmas), _as_tensor(deltas)
    if sigmas.shape != deltas.shape:
        raise InvalidArgumentError(f"sigmas {tuple(sigmas.shape)} and deltas {tuple(deltas.shape)} differ")
    if torch.any(sigmas < 0):
        raise InvalidArgumentError("densities must be non-negative")
    if torch.any(deltas <= 0):
        raise InvalidArgumentError("interval lengths must be positive")
    optical = sigmas * deltas
    if include_final:
        optical = torch.cat([optical, torch.zeros_like(optical[..., :1])], dim=-1)
    return torch.exp(-_exclusive_cumsum(optical))


def composite(sigmas: torch.Tensor, deltas: torch.Tensor, colors: torch.Tensor):
    """
    Volume-rendering weights and color, C = sum_n T_n (1 - exp(-sigma_n delta_n)) c_n.

    Returns:
        (rgb (..., 3), opacity (...), weights (..., K))
    """
    optical = sigmas * deltas
    alpha = 1.0 - torch.exp(-optical)
    trans = torch.exp(-_exclusive_cumsum(optical))
    weights = trans * alpha
    rgb = torch.sum(weights[..., None] * colors, dim=-2)
    return rgb, weights.sum(dim=-1), weights


class HashGridEncoder(nn.Module):
    """Multiresolution spatial-hash feature grid with trilinear interpolation."""

    def __init__(self, n_levels: int = 16, log2_table_size: int = 19, feature_dim: int = 2,
                 base_resolution: int = 16, finest_resolution: int = 512,
                 bbox: Sequence[float] = SCENE_BBOX):
        super().__init__()
        if n_levels < 1 or feature_dim < 1:
            raise InvalidArgumentError("n_levels and feature_dim must be positive")
        self.n_levels = n_levels
        self.feature_dim = feature_dim
        self.table_size = 2 ** log2_table_size
        growth = math.exp((math.log(finest_resolution) - math.log(base_resolution)) / max(n_levels - 1, 1))
        resolutions = [int(math.floor(base_resolution * growth ** level)) for level in range(n_levels)]
        if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
            raise InvalidArgumentError(f"level resolutions are not strictly increasing: {resolutions}")
        self.resolutions = resolutions

        self.register_buffer("bbox_min", torch.tensor(bbox[:3], dtype=torch.float32))
        self.register_buffer("bbox_max", torch.tensor(bbox[3:], dtype=torch.float32))
        self.register_buffer("primes", torch.tensor(HASH_PRIMES, dtype=torch.int64))
        self.register_buffer("corner_offsets", torch.tensor(
            [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.int64))
        self.tables = nn.Parameter(torch.empty(n_levels, self.table_size, feature_dim))
        nn.init.uniform_(self.tables, -1e-4, 1e-4)

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.feature_dim

    def hash(self, coords: torch.Tensor) -> torch.Tensor:
        """XOR of coordinate-wise products with fixed primes, modulo the table size."""
        scaled = coords * self.primes
        return (scaled[..., 0] ^ scaled[..., 1] ^ scaled[..., 2]) & (self.table_size - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        unit = ((x - self.bbox_min) / (self.bbox_max - self.bbox_min)).clamp(0.0, 1.0)
        features = []
        for level, resolution in enumerate(self.resolutions):
            pos = unit * resolution
            lower = torch.floor(pos).long()
            frac = (pos - lower).to(self.tables.dtype)
            corners = lower[:, None, :] + self.corner_offsets  # (B, 8, 3)
            embeds = self.tables[level][self.hash(corners)]  # (B, 8, F)
            offsets = self.corner_offsets.to(frac.dtype)
            weights = torch.prod(offsets * frac[:, None, :] + (1 - offsets) * (1 - frac[:, None, :]), dim=-1)
            features.append(torch.sum(weights[..., None] * embeds, dim=1))
        return torch.cat(features, dim=-1)


@dataclass
class FieldQuery:
    sigma: torch.Tensor
    embedding: torch.Tensor
    color: torch.Tensor
    out_of_bounds: torch.Tensor


class NeRFField(nn.Module):
    """
    Density branch over hash features plus a color branch that sees the raw
    view direction. The embedding e is the first hidden layer's output.
    """

    def __init__(self, config: Optional[NerfTrainConfig] = None, bbox: Sequence[float] = SCENE_BBOX):
        super().__init__()
        config = config or NerfTrainConfig()
        self.encoder = HashGridEncoder(config.n_levels, config.log2_table_size, config.feature_dim,
                                       config.base_resolution, config.finest_resolution, bbox)
        hidden = config.hidden_dim
        self.hidden = nn.Linear(self.encoder.output_dim, hidden)
        self.sigma_head = nn.Linear(hidden, 1)
        self.color_net = nn.Sequential(
            nn.Linear(hidden + 3, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, 3),
        )
        self.register_buffer("bbox_min", torch.tensor(bbox[:3], dtype=torch.float32))
        self.register_buffer("bbox_max", torch.tensor(bbox[3:], dtype=torch.float32))

    def inside(self, x: torch.Tensor) -> torch.Tensor:
        return torch.all((x >= self.bbox_min) & (x <= self.bbox_max), dim=-1)

    def density(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(sigma, embedding, inside); sigma is 0 outside the bounding box."""
        inside = self.inside(x)
        embedding = F.relu(self.hidden(self.encoder(x)))
        raw = self.sigma_head(embedding).squeeze(-1)
        sigma = torch.exp(torch.clamp(raw, max=_LOG_MAX_DENSITY))
        sigma = torch.where(inside, sigma, torch.zeros_like(sigma))
        return sigma, embedding, inside

    def color(self, embedding: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.color_net(torch.cat([embedding, d.to(embedding.dtype)], dim=-1)))

    def query(self, x: torch.Tensor, d: torch.Tensor) -> FieldQuery:
        sigma, embedding, inside = self.density(x)
        return FieldQuery(sigma, embedding, self.color(embedding, d), ~inside)

    def sigma(self, x: torch.Tensor) -> torch.Tensor:
        return self.density(x)[0]


class OccupancyGrid:
    """Single-resolution bit grid over the scene box with a running density estimate."""

    def __init__(self, resolution: int = 128, threshold: float = 0.01,
                 bbox: Sequence[float] = SCENE_BBOX, device="cpu"):
        if resolution < 1:
            raise InvalidArgumentError("occupancy resolution must be >= 1")
        self.resolution = resolution
        self.threshold = threshold
        self.bbox_min = torch.tensor(bbox[:3], dtype=torch.float64, device=device)
        self.bbox_max = torch.tensor(bbox[3:], dtype=torch.float64, device=device)
        self.estimate = torch.zeros((resolution,) * 3, dtype=torch.float32, device=device)
        self.bits = torch.zeros((resolution,) * 3, dtype=torch.bool, device=device)

    @classmethod
    def full(cls, resolution: int = 128, threshold: float = 0.01, **kwargs) -> "OccupancyGrid":
        grid = cls(resolution, threshold, **kwargs)
        grid.set_bits(torch.ones_like(grid.bits))
        return grid

    @classmethod
    def from_bits(cls, bits, threshold: float = 0.01, **kwargs) -> "OccupancyGrid":
        bits = _as_tensor(bits, torch.bool)
        grid = cls(bits.shape[0], threshold, **kwargs)
        grid.set_bits(bits.to(grid.bits.device))
        return grid

    def set_bits(self, bits: torch.Tensor):
        self.bits = bits.clone()
        self.estimate = torch.where(bits, torch.full_like(self.estimate, max(1.0, 2.0 * self.threshold)),
                                    torch.zeros_like(self.estimate))

    @property
    def cell_size(self) -> torch.Tensor:
        return (self.bbox_max - self.bbox_min) / self.resolution

    def cell_centers(self) -> torch.Tensor:
        idx = torch.arange(self.resolution, dtype=torch.float64, device=self.bits.device)
        gx, gy, gz = torch.meshgrid(idx, idx, idx, indexing="ij")
        cells = torch.stack([gx, gy, gz], dim=-1)
        return self.bbox_min + (cells + 0.5) * self.cell_size

    def cell_index(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(integer cell indices clamped into the grid, inside-box flag) for each point."""
        p = points.to(torch.float64)
        inside = torch.all((p >= self.bbox_min) & (p <= self.bbox_max), dim=-1)
        idx = torch.floor((p - self.bbox_min) / self.cell_size).long().clamp(0, self.resolution - 1)
        return idx, inside

    def lookup(self, points: torch.Tensor) -> torch.Tensor:
        idx, inside = self.cell_index(points)
        return inside & self.bits[idx[..., 0], idx[..., 1], idx[..., 2]]

    def occupied_fraction(self) -> float:
        return float(self.bits.float().mean())

    def packed(self) -> np.ndarray:
        return pack_mask(self.bits.cpu().numpy())


@torch.no_grad()
def update_occupancy(grid: OccupancyGrid, density_fn: Callable[[torch.Tensor], torch.Tensor],
                     decay: float = 0.95, generator: Optional[torch.Generator] = None,
                     chunk_size: int = 262144) -> OccupancyGrid:
    """
    estimate <- max(decay * estimate, sigma at a jittered point in each cell);
    bit = estimate > threshold.

    Args:
        grid: Grid updated in place
        density_fn: Maps (N, 3) float32 points to (N,) densities
        decay: Running-estimate decay
        generator: Jitter source

    Returns:
        The same grid
    """
    device = grid.bits.device
    centers = grid.cell_centers().reshape(-1, 3)
    jitter = torch.rand(centers.shape, generator=generator, dtype=torch.float64,
                        device=generator.device if generator is not None else device) - 0.5
    points = (centers + jitter.to(device) * grid.cell_size).to(torch.float32)
    sigmas = torch.cat([density_fn(chunk).reshape(-1).to(torch.float32)
                        for chunk in torch.split(points, chunk_size)])
    sigmas = sigmas.reshape(grid.estimate.shape).to(device)
    grid.estimate = torch.maximum(grid.estimate * decay, torch.nan_to_num(sigmas, nan=0.0))
    grid.bits = grid.estimate > grid.threshold
    return grid


@dataclass
class RaySamples:
    """Samples for a batch of R rays with K slots each; `valid` marks retained samples."""
    origins: torch.Tensor  # (R, 3)
    directions: torch.Tensor  # (R, 3)
    t: torch.Tensor  # (R, K)
    deltas: torch.Tensor  # (R, K)
    valid: torch.Tensor  # (R, K) bool

    @property
    def points(self) -> torch.Tensor:
        return self.origins[:, None, :] + self.t[..., None] * self.directions[:, None, :]

    def count(self) -> torch.Tensor:
        return self.valid.sum(dim=-1)


def ray_box_intersection(origins: torch.Tensor, directions: torch.Tensor,
                         bbox: Sequence[float] = SCENE_BBOX) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab test: (t_near, t_far, hit) with t_near clamped at 0."""
    lo = torch.tensor(bbox[:3], dtype=origins.dtype, device=origins.device)
    hi = torch.tensor(bbox[3:], dtype=origins.dtype, device=origins.device)
    safe = torch.where(directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions)
    t0 = (lo - origins) / safe
    t1 = (hi - origins) / safe
    t_near = torch.minimum(t0, t1).amax(dim=-1).clamp(min=0.0)
    t_far = torch.maximum(t0, t1).amin(dim=-1)
    return t_near, t_far, t_far > t_near


def march_and_prune(origins: torch.Tensor, directions: torch.Tensor, grid: OccupancyGrid,
                    n_samples: int = 1024, stratified: bool = False,
                    generator: Optional[torch.Generator] = None) -> RaySamples:
    """
    Uniform samples across each ray's box segment, keeping those in set cells.

    Rays that miss the box get no valid samples.
    """
    bbox = tuple(grid.bbox_min.tolist()) + tuple(grid.bbox_max.tolist())
    t_near, t_far, hit = ray_box_intersection(origins, directions, bbox)
    span = torch.where(hit, t_far - t_near, torch.ones_like(t_far))
    step = span / n_samples
    slots = torch.arange(n_samples, dtype=origins.dtype, device=origins.device)
    if stratified:
        offsets = torch.rand((origins.shape[0], n_samples), generator=generator,
                             dtype=origins.dtype, device=generator.device if generator is not None else origins.device)
        offsets = offsets.to(origins.device)
    else:
        offsets = torch.full((origins.shape[0], n_samples), 0.5, dtype=origins.dtype, device=origins.device)
    t = t_near[:, None] + (slots + offsets) * step[:, None]
    deltas = step[:, None].expand_as(t).clone()
    samples = RaySamples(origins, directions, t, deltas, torch.zeros_like(t, dtype=torch.bool))
    samples.valid = hit[:, None] & grid.lookup(samples.points)
    return samples


@dataclass
class RenderOutput:
    rgb: torch.Tensor  # (R, 3), background composited
    opacity: torch.Tensor  # (R,)
    depth: torch.Tensor  # (R,)
    empty: torch.Tensor  # (R,) bool, no retained samples


def render_rays(field: NeRFField, samples: RaySamples, background=(1.0, 1.0, 1.0)) -> RenderOutput:
    """Query the field at retained samples only and composite over the background."""
    R, K = samples.t.shape
    dtype = field.hidden.weight.dtype
    sigmas = torch.zeros((R, K), dtype=dtype, device=samples.t.device)
    colors = torch.zeros((R, K, 3), dtype=dtype, device=samples.t.device)
    if samples.valid.any():
        points = samples.points[samples.valid].to(dtype)
        dirs = samples.directions[:, None, :].expand(R, K, 3)[samples.valid].to(dtype)
        q = field.query(points, dirs)
        sigmas = sigmas.index_put((samples.valid,), q.sigma)
        colors = colors.index_put((samples.valid,), q.color)
    rgb, opacity, weights = composite(sigmas, samples.deltas.to(dtype), colors)
    bg = torch.as_tensor(background, dtype=dtype, device=rgb.device)
    rgb = rgb + (1.0 - opacity)[:, None] * bg
    depth = torch.sum(weights * samples.t.to(dtype), dim=-1)
    return RenderOutput(rgb, opacity, depth, samples.count() == 0)


def render_ray(field: NeRFField, samples: RaySamples, background=None) -> Tuple[torch.Tensor, bool]:
    """
    Color of one ray (samples with R = 1).

    Returns the raw composite when background is None; zero retained samples
    yield the background (or black) and the empty flag.
    """
    out = render_rays(field, samples, background if background is not None else (0.0, 0.0, 0.0))
    return out.rgb[0], bool(out.empty[0])


def nerf_learning_rate(step: int, config: NerfTrainConfig) -> float:
    """Step schedule: lr * gamma ** (number of milestones reached)."""
    return config.lr * config.lr_gamma ** bisect_right(list(config.lr_milestones), step)


def psnr(prediction, target) -> float:
    mse = float(torch.mean((_as_tensor(prediction) - _as_tensor(target)) ** 2))
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


class NerfBlock:
    """A trained (or freshly initialized) NeRF block plus its block metadata."""

    def __init__(self, field: NeRFField, grid: OccupancyGrid, poses: List[CameraPose],
                 intrinsics: Intrinsics, gt_transform: RigidTransform = None,
                 background=(1.0, 1.0, 1.0), config: Optional[NerfTrainConfig] = None):
        self.field = field
        self.grid = grid
        self.poses = list(poses)
        self.intrinsics = intrinsics
        self.gt_transform = gt_transform or RigidTransform.identity()
        self.background = tuple(background)
        self.config = config or NerfTrainConfig()

    @property
    def device(self) -> torch.device:
        return self.field.hidden.weight.device

    def save(self, path) -> Path:
        metadata = {
            "poses": [p.to_list() for p in self.poses],
            "intrinsics": self.intrinsics.to_dict(),
            "gt_transform": self.gt_transform.to_list(),
            "background": list(self.background),
            "config": asdict(self.config),
        }
        return save_archive(path, "nerf", {
            "weights": {k: v.detach().cpu() for k, v in self.field.state_dict().items()},
            "occupancy": torch.from_numpy(self.grid.packed()),
            "occupancy_resolution": self.grid.resolution,
            "occupancy_threshold": self.grid.threshold,
            "metadata": encode_metadata(metadata),
        })

    @classmethod
    def load(cls, path, device: Optional[str] = None) -> "NerfBlock":
        device = device or default_device()
        archive = load_archive(path, "nerf")
        metadata = decode_metadata(archive["metadata"])
        raw_config = metadata["config"]
        config = NerfTrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw_config.items()})
        field = NeRFField(config)
        field.load_state_dict(archive["weights"])
        field.to(device).eval()
        resolution = int(archive["occupancy_resolution"])
        bits = unpack_mask(archive["occupancy"].numpy(), (resolution,) * 3)
        grid = OccupancyGrid.from_bits(torch.from_numpy(bits), float(archive["occupancy_threshold"]),
                                       device=device)
        logger.info(f"Loaded NeRF block {path} ({len(metadata['poses'])} poses, "
                    f"{grid.occupied_fraction():.1%} occupied)")
        return cls(field, grid,
                   [CameraPose.from_matrix(m) for m in metadata["poses"]],
                   Intrinsics.from_dict(metadata["intrinsics"]),
                   RigidTransform.from_matrix(metadata["gt_transform"]),
                   tuple(metadata["background"]), config)

    @torch.no_grad()
    def render_image(self, pose: CameraPose, intrinsics: Optional[Intrinsics] = None,
                     n_samples: Optional[int] = None, chunk: int = 4096) -> np.ndarray:
        """Render a full (H, W, 3) float32 image from a camera pose."""
        intr = intrinsics or self.intrinsics
        origins, dirs = camera_rays(pose, intr)
        origins = torch.from_numpy(origins).to(self.device, torch.float32)
        dirs = torch.from_numpy(dirs).to(self.device, torch.float32)
        n_samples = n_samples or self.config.n_samples
        pixels = []
        for o, d in zip(torch.split(origins, chunk), torch.split(dirs, chunk)):
            samples = march_and_prune(o, d, self.grid, n_samples)
            pixels.append(render_rays(self.field, samples, self.background).rgb.clamp(0, 1).cpu())
        return torch.cat(pixels).reshape(intr.height, intr.width, 3).numpy()

    def training_psnr(self, data: BlockDataset, max_views: Optional[int] = None) -> float:
        views = list(zip(data.images, data.poses))[:max_views]
        scores = [psnr(self.render_image(pose, data.intrinsics), image) for image, pose in views]
        return float(np.mean(scores))


def _block_rays(data: BlockDataset, device) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    origins, dirs, colors = [], [], []
    for image, pose in zip(data.images, data.poses):
        o, d = camera_rays(pose, data.intrinsics)
        origins.append(o)
        dirs.append(d)
        colors.append(np.asarray(image, dtype=np.float32).reshape(-1, 3))
    as_tensor = lambda parts: torch.from_numpy(np.concatenate(parts).astype(np.float32)).to(device)
    return as_tensor(origins), as_tensor(dirs), as_tensor(colors)


@timed_function("train_block")
def train_block(data: BlockDataset, config: NerfTrainConfig, out_path=None,
                log_path=None, device: Optional[str] = None) -> NerfBlock:
    """
    Fit one NeRF block to its views with a photometric L2 loss.

    Args:
        data: Block images and poses (block-local frame)
        config: Training schedule and architecture
        out_path: Checkpoint file to write, if any
        log_path: JSON-lines log file, if any
        device: Torch device, defaults to NERFREG_DEVICE or CUDA when present

    Returns:
        The trained NerfBlock
    """
    device = device or default_device()
    torch.manual_seed(config.seed)
    generator = torch.Generator(device=device).manual_seed(config.seed)

    field = NeRFField(config).to(device)
    grid = OccupancyGrid(config.occupancy_resolution, config.occupancy_threshold, device=device)
    origins, dirs, colors = _block_rays(data, device)
    background = torch.tensor(data.background, dtype=torch.float32, device=device)

    optimizer = torch.optim.Adam(field.parameters(), lr=config.lr, betas=(0.9, 0.99), eps=1e-15)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: config.lr_gamma ** bisect_right(list(config.lr_milestones), step))

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for step in tqdm(range(config.iterations), desc="train-nerf", leave=False):
            if step % config.occupancy_update_every == 0:
                field.eval()
                update_occupancy(grid, field.sigma, config.occupancy_decay, generator)
                field.train()

            batch = torch.randint(0, origins.shape[0], (config.batch_rays,), generator=generator, device=device)
            samples = march_and_prune(origins[batch], dirs[batch], grid, config.n_samples,
                                      stratified=True, generator=generator)
            out = render_rays(field, samples, background)
            loss = F.mse_loss(out.rgb, colors[batch])
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite photometric loss at step {step}",
                                         step=step, parts={"photometric": float(loss)})

            lr = optimizer.param_groups[0]["lr"]
            optimizer.zero_grad(set_to_none=True)
            if loss.requires_grad:
                loss.backward()
                optimizer.step()
            scheduler.step()

            if step % config.log_every == 0 or step == config.iterations - 1:
                record = {"step": step, "loss": float(loss), "lr": lr,
                          "occupied": grid.occupied_fraction()}
                if log_file:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                logger.debug(f"nerf step {step}: loss={float(loss):.5f} lr={lr:.2e}")
    finally:
        if log_file:
            log_file.close()

    field.eval()
    if config.iterations > 0:
        update_occupancy(grid, field.sigma, config.occupancy_decay, generator)
    else:
        grid = OccupancyGrid.full(config.occupancy_resolution, config.occupancy_threshold, device=device)

    block = NerfBlock(field, grid, data.poses, data.intrinsics, data.gt_transform, data.background, config)
    logger.info(f"Trained NeRF block for {config.iterations} iterations "
                f"({grid.occupied_fraction():.1%} of the occupancy grid set)")
    if out_path is not None:
        block.save(out_path)
    return block
