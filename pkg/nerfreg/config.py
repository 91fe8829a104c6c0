"""
Configuration for nerfreg
Paths and environment-driven defaults, plus the typed run configurations that
are read from flat key=value files.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, get_type_hints

import torch
from dotenv import dotenv_values, load_dotenv

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

load_dotenv()

APP_NAME = "nerfreg"
BASE_DIR = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.environ.get("NERFREG_DATA_DIR", BASE_DIR / "data"))

# Precomputed voxel grids live here unless overridden
CACHE_DIR = Path(os.environ.get("NERFREG_CACHE_DIR", DATA_DIR / "grid_cache"))

CHECKPOINT_SCHEMA_VERSION = 1

# Cameras are camera-to-world, OpenGL style: +x right, +y up, looking down -z.
CAMERA_CONVENTION = "opengl"

# Scene bounding box shared by the occupancy grid and voxel extraction
SCENE_BBOX: Tuple[float, ...] = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)


def default_device() -> str:
    """Device from NERFREG_DEVICE, else CUDA when present."""
    requested = os.environ.get("NERFREG_DEVICE")
    if requested:
        return requested
    return "cuda" if torch.cuda.is_available() else "cpu"


def cache_dir() -> Path:
    """Grid cache location, re-read from the environment on every call."""
    return Path(os.environ.get("NERFREG_CACHE_DIR", CACHE_DIR))


def ensure_directories_exist() -> None:
    DATA_DIR.mkdir(parents=True, exist_ok=True)
    cache_dir().mkdir(parents=True, exist_ok=True)


@dataclass
class SynthConfig:
    """Synthetic dataset construction."""
    n_objects: int = 20
    n_test_objects: int = 4
    n_views: int = 120
    image_size: int = 128
    n_primitives: int = 0  # 0 draws 2-5 per object
    fov_degrees: float = 40.0
    radius_range: Tuple[float, ...] = (2.6, 3.2)
    elevation_range: Tuple[float, ...] = (5.0, 75.0)  # degrees
    translation_range: float = 0.5
    background: Tuple[float, ...] = (1.0, 1.0, 1.0)
    identity_transform: bool = False
    seed: int = 0


@dataclass
class NerfTrainConfig:
    """Per-block hash-grid NeRF training."""
    iterations: int = 10000
    lr: float = 1e-2
    lr_milestones: Tuple[int, ...] = (5000, 7500, 9000)
    lr_gamma: float = 0.33
    batch_rays: int = 4096
    n_samples: int = 1024
    n_levels: int = 16
    log2_table_size: int = 19
    feature_dim: int = 2
    base_resolution: int = 16
    finest_resolution: int = 512
    hidden_dim: int = 64
    occupancy_resolution: int = 128
    occupancy_update_every: int = 16
    occupancy_decay: float = 0.95
    occupancy_threshold: float = 0.01
    log_every: int = 100
    seed: int = 0


@dataclass
class ExtractConfig:
    """Voxel-grid extraction from a trained block."""
    resolution: int = 64
    sigma_t: float = 0.7
    eta: float = 0.5
    march_steps: int = 256
    chunk_size: int = 16384


@dataclass
class RegTrainConfig:
    """Registration network training (full-scale defaults)."""
    lr: float = 1e-4
    weight_decay: float = 1e-4
    lr_halving_steps: int = 34000
    batch_size: int = 1
    epochs: int = 60
    feature_dim: int = 128
    backbone_widths: Tuple[int, ...] = (32, 64, 128)
    n_layers: int = 6
    n_heads: int = 8
    pos_frequencies: int = 8
    max_points: int = 1500
    downsample_radius_voxels: float = 2.0
    lambda_conf: float = 1.0
    lambda_sf: float = 1.0
    lambda_corr: float = 0.1
    lambda_feat: float = 1.0
    robust_eta: float = 1.0
    robust_gamma: float = 0.5
    r_pos_voxels: float = 2.0
    r_neg_voxels: float = 4.0
    temperature: float = 0.1
    supervision: str = "surface"  # "surface" or "density"
    surface_source: str = "cache"  # "cache" or "nerf"
    surface_views: int = 8
    surface_steps: int = 64
    grid_cache_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidArgumentError(f"lr must be positive, got {self.lr}")
        if self.batch_size != 1:
            raise InvalidArgumentError("batch_size must be 1: point sets are unbatched")
        if self.feature_dim % self.n_heads != 0:
            raise InvalidArgumentError(
                f"feature_dim {self.feature_dim} is not divisible by n_heads {self.n_heads}")
        if self.supervision not in ("surface", "density"):
            raise InvalidArgumentError(f"unknown supervision '{self.supervision}'")
        if self.surface_source not in ("cache", "nerf"):
            raise InvalidArgumentError(f"unknown surface_source '{self.surface_source}'")


@dataclass
class EvalConfig:
    """Registration solve and evaluation."""
    min_confidence: float = 0.05
    ransac: bool = False
    ransac_iterations: int = 512
    ransac_threshold_voxels: float = 2.0
    seed: int = 0


@dataclass
class RunConfig:
    """All sections of one key=value configuration file."""
    synth: SynthConfig = field(default_factory=SynthConfig)
    nerf: NerfTrainConfig = field(default_factory=NerfTrainConfig)
    extract: ExtractConfig = field(default_factory=ExtractConfig)
    reg: RegTrainConfig = field(default_factory=RegTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw: str, annotation: Any, key: str) -> Any:
    text = raw.strip()
    try:
        if annotation is bool:
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
        item_type = annotation.__args__[0]
        return tuple(item_type(part) for part in text.split(",") if part.strip())
    except (ValueError, AttributeError, IndexError) as e:
        raise InvalidArgumentError(f"cannot parse config key '{key}' from '{raw}': {e}")


def parse_config_values(values: Dict[str, Optional[str]]) -> RunConfig:
    """
    Build a RunConfig from flat 'section.key' -> text pairs.

    Args:
        values: Mapping such as {'reg.epochs': '8', 'nerf.iterations': '2000'}

    Returns:
        RunConfig with every section populated, defaults where unset
    """
    overrides: Dict[str, Dict[str, Any]] = {name: {} for name in _SECTIONS}
    for key, raw in values.items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise InvalidArgumentError(f"unknown config key '{key}'")
        hints = get_type_hints(_SECTIONS[section])
        if name not in hints:
            raise InvalidArgumentError(f"unknown config key '{key}'")
        if raw is None:
            raise InvalidArgumentError(f"config key '{key}' has no value")
        overrides[section][name] = _coerce(raw, hints[name], key)

    sections = {}
    for section, factory in _SECTIONS.items():
        defaults = asdict(factory())
        defaults.update(overrides[section])
        sections[section] = factory(**defaults)
    return RunConfig(**sections)


def load_config(path: Optional[Path] = None) -> RunConfig:
    """Read a key=value file (or return defaults when path is None)."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    config = parse_config_values(dict(dotenv_values(path)))
    logger.info(f"Loaded configuration from {path}")
    return config


def format_config(config: RunConfig) -> str:
    """Effective configuration in the same key=value syntax it is read from."""
    lines = []
    for section in _SECTIONS:
        for key, value in asdict(getattr(config, section)).items():
            if isinstance(value, (tuple, list)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{section}.{key}={value}")
    return "\n".join(lines) + "\n"
