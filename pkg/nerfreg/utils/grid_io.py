"""
Binary Grid Formats
Reader/writer for "DRGV" voxel grids and "DRGP" feature point dumps, the bit
packing shared with occupancy grids, and the surface-field sidecar volumes.
"""

import logging
import struct
from pathlib import Path
from typing import Tuple

import numpy as np

from ..errors import FormatError

logger = logging.getLogger(__name__)

GRID_MAGIC = b"DRGV"
POINTS_MAGIC = b"DRGP"
GRID_VERSION = 1
GRID_CHANNELS = 7

_GRID_HEADER = struct.Struct("<4sIIIII6d")
_POINTS_HEADER = struct.Struct("<4sII")


def to_x_fastest(volume: np.ndarray) -> np.ndarray:
    """Flatten an (X, Y, Z, ...) array so that x varies fastest."""
    X, Y, Z = volume.shape[:3]
    order = (2, 1, 0) + tuple(range(3, volume.ndim))
    return volume.transpose(order).reshape((X * Y * Z,) + volume.shape[3:])


def from_x_fastest(flat: np.ndarray, shape: Tuple[int, int, int]) -> np.ndarray:
    """Inverse of to_x_fastest for spatial shape (X, Y, Z)."""
    X, Y, Z = shape
    extra = flat.shape[1:]
    volume = flat.reshape((Z, Y, X) + extra)
    order = (2, 1, 0) + tuple(range(3, volume.ndim))
    return volume.transpose(order)


def pack_mask(mask: np.ndarray) -> np.ndarray:
    """Bit-pack a boolean (X, Y, Z) mask, x-fastest, little-endian bit order."""
    return np.packbits(to_x_fastest(np.asarray(mask, dtype=bool)), bitorder="little")


def unpack_mask(packed: np.ndarray, shape: Tuple[int, int, int]) -> np.ndarray:
    count = int(np.prod(shape))
    bits = np.unpackbits(np.asarray(packed, dtype=np.uint8), count=count, bitorder="little")
    return from_x_fastest(bits.astype(bool), shape)


def write_voxel_grid(path, grid: np.ndarray, mask: np.ndarray, bbox) -> Path:
    """
    Write a DRGV file.

    Args:
        path: Output file
        grid: (X, Y, Z, 7) features [coords, radiance, alpha]
        mask: (X, Y, Z) boolean mask
        bbox: (xmin, ymin, zmin, xmax, ymax, zmax)

    Returns:
        The written path
    """
    grid = np.asarray(grid)
    if grid.ndim != 4 or grid.shape[3] != GRID_CHANNELS:
        raise FormatError(f"voxel grid must be (X, Y, Z, {GRID_CHANNELS}), got {grid.shape}")
    if mask.shape != grid.shape[:3]:
        raise FormatError(f"mask shape {mask.shape} does not match grid {grid.shape[:3]}")
    X, Y, Z = grid.shape[:3]
    header = _GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, X, Y, Z, GRID_CHANNELS,
                               *[float(v) for v in bbox])
    payload = to_x_fastest(grid).astype("<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
        f.write(pack_mask(mask).tobytes())
    return path


def read_voxel_grid(path) -> Tuple[np.ndarray, np.ndarray, Tuple[float, ...]]:
    """Read a DRGV file into (grid float32 (X, Y, Z, 7), mask bool (X, Y, Z), bbox)."""
    data = Path(path).read_bytes()
    if len(data) < _GRID_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, X, Y, Z, channels, *bbox = _GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    n = X * Y * Z
    offset = _GRID_HEADER.size
    payload_size = n * channels * 4
    mask_size = (n + 7) // 8
    if len(data) != offset + payload_size + mask_size:
        raise FormatError(f"{path}: expected {offset + payload_size + mask_size} bytes, got {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", count=n * channels, offset=offset).reshape(n, channels)
    grid = from_x_fastest(flat.astype(np.float32), (X, Y, Z))
    packed = np.frombuffer(data, dtype=np.uint8, count=mask_size, offset=offset + payload_size)
    mask = unpack_mask(packed, (X, Y, Z))
    return np.ascontiguousarray(grid), np.ascontiguousarray(mask), tuple(bbox)


def write_feature_points(path, points: np.ndarray, features: np.ndarray) -> Path:
    """DRGP debug dump: magic, u32 N, u32 C, f32 points then f32 features."""
    points = np.asarray(points, dtype="<f4")
    features = np.asarray(features, dtype="<f4")
    if points.ndim != 2 or points.shape[1] != 3 or features.shape[0] != points.shape[0]:
        raise FormatError(f"points {points.shape} and features {features.shape} do not pair up")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_POINTS_HEADER.pack(POINTS_MAGIC, points.shape[0], features.shape[1]))
        f.write(points.tobytes())
        f.write(features.tobytes())
    return path


def read_feature_points(path) -> Tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    magic, n, channels = _POINTS_HEADER.unpack_from(data)
    if magic != POINTS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    offset = _POINTS_HEADER.size
    points = np.frombuffer(data, dtype="<f4", count=n * 3, offset=offset).reshape(n, 3)
    features = np.frombuffer(data, dtype="<f4", count=n * channels,
                             offset=offset + n * 12).reshape(n, channels)
    return points.copy(), features.copy()


def sidecar_path(grid_path) -> Path:
    return Path(grid_path).with_suffix(".sf.npz")


def write_surface_sidecar(grid_path, surface: np.ndarray, opacity: np.ndarray) -> Path:
    """Store the dense view-max surface-field and opacity volumes next to a grid."""
    path = sidecar_path(grid_path)
    np.savez_compressed(path, surface=surface.astype(np.float32), opacity=opacity.astype(np.float32))
    return path


def read_surface_sidecar(grid_path) -> Tuple[np.ndarray, np.ndarray]:
    path = sidecar_path(grid_path)
    if not path.exists():
        raise FileNotFoundError(f"surface-field sidecar not found: {path}")
    with np.load(path) as data:
        return data["surface"], data["opacity"]
