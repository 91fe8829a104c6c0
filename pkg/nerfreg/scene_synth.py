"""
Synthetic Object-Centric Scenes
Renders views of procedural (or mesh) objects along a spherical trajectory,
splits the views into two blocks with KMeans and moves each block into its own
random coordinate frame.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import imageio.v2 as imageio
import numpy as np
from scipy.spatial.transform import Rotation
from sklearn.cluster import KMeans
from tqdm import tqdm

from .config import SynthConfig
from .errors import InvalidArgumentError
from .geometry import CameraPose, Intrinsics, RigidTransform, camera_centers, camera_rays, look_at
from .utils.timing import timed_function

logger = logging.getLogger(__name__)

UNIT_HALF_EXTENT = 0.5
PRIMITIVE_KINDS = ("sphere", "box", "cylinder")
PATTERNS = ("solid", "stripes", "checker")


@dataclass
class Primitive:
    """A colored primitive; `size` is (r, r, r) for spheres, half extents for
    boxes, (r, r, half_height) for z-aligned cylinders."""
    kind: str
    center: Tuple[float, float, float]
    size: Tuple[float, float, float]
    color: Tuple[float, float, float]
    pattern: str = "solid"
    pattern_color: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    frequency: float = 4.0

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        s = np.asarray(self.size, dtype=np.float64)
        return c - s, c + s


@dataclass
class SceneSpec:
    """Object description normalized into the unit cube centered at the origin."""
    primitives: List[Primitive] = field(default_factory=list)
    mesh: Optional[object] = None  # trimesh.Trimesh with vertex colors

    def validate(self, tol: float = 1e-9):
        for prim in self.primitives:
            if prim.kind not in PRIMITIVE_KINDS:
                raise InvalidArgumentError(f"unknown primitive kind '{prim.kind}'")
            if prim.pattern not in PATTERNS:
                raise InvalidArgumentError(f"unknown albedo pattern '{prim.pattern}'")
            lo, hi = prim.bounds()
            if np.any(lo < -UNIT_HALF_EXTENT - tol) or np.any(hi > UNIT_HALF_EXTENT + tol):
                raise InvalidArgumentError(f"{prim.kind} at {prim.center} leaves the unit bounding box")
        if self.mesh is not None:
            bounds = np.asarray(self.mesh.bounds)
            if np.any(np.abs(bounds) > UNIT_HALF_EXTENT + 1e-6):
                raise InvalidArgumentError("mesh leaves the unit bounding box")


@dataclass
class BlockDataset:
    """Images and poses of one block, expressed in the block's local frame.

    `gt_transform` maps the block-local frame to the original shared frame.
    """
    images: List[np.ndarray]
    poses: List[CameraPose]
    intrinsics: Intrinsics
    gt_transform: RigidTransform = field(default_factory=RigidTransform.identity)
    background: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.images) != len(self.poses):
            raise InvalidArgumentError(
                f"{len(self.images)} images but {len(self.poses)} poses")
        if not self.poses:
            raise InvalidArgumentError("a block needs at least one view")


def generate_trajectory(n_views: int, seed: int = 0,
                        radius_range: Sequence[float] = (2.6, 3.2),
                        elevation_range: Sequence[float] = (5.0, 75.0)) -> List[CameraPose]:
    """
    Camera poses on an upper-hemisphere shell, all looking at the origin.

    Azimuths follow the golden angle; elevations are stratified so that the
    views cover the band with equal area; radii are uniform in the band.

    Args:
        n_views: Number of poses (>= 4)
        seed: Seed for the jitter
        radius_range: (min, max) distance from the origin
        elevation_range: (min, max) elevation in degrees, inside (0, 90)

    Returns:
        List of CameraPose
    """
    if n_views < 4:
        raise InvalidArgumentError(f"n_views must be >= 4, got {n_views}")
    r_min, r_max = radius_range
    e_min, e_max = np.radians(elevation_range[0]), np.radians(elevation_range[1])
    if not (0 < r_min <= r_max) or not (0 <= e_min <= e_max < np.pi / 2):
        raise InvalidArgumentError("invalid radius or elevation range")

    rng = np.random.default_rng(seed)
    golden_angle = np.pi * (3.0 - np.sqrt(5.0))
    azimuth0 = rng.uniform(0.0, 2.0 * np.pi)
    z_lo, z_hi = np.sin(e_min), np.sin(e_max)

    poses = []
    for i in range(n_views):
        z = z_lo + (z_hi - z_lo) * (i + rng.uniform()) / n_views
        elevation = np.arcsin(z)
        azimuth = azimuth0 + i * golden_angle
        radius = rng.uniform(r_min, r_max)
        center = radius * np.array([np.cos(elevation) * np.cos(azimuth),
                                    np.cos(elevation) * np.sin(azimuth),
                                    np.sin(elevation)])
        poses.append(look_at(center))
    return poses


def _intersect_sphere(origins, dirs, prim: Primitive):
    c = np.asarray(prim.center)
    r = prim.size[0]
    oc = origins - c
    b = np.einsum("ij,ij->i", oc, dirs)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - r * r)
    t = np.full(len(origins), np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near, t_far = -b - sq, -b + sq
    t_hit = np.where(t_near > 1e-9, t_near, t_far)
    ok = hit & (t_hit > 1e-9)
    t[ok] = t_hit[ok]
    return t


def _intersect_box(origins, dirs, prim: Primitive):
    lo, hi = prim.bounds()
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t_enter = np.nanmax(np.minimum(t0, t1), axis=1)
    t_exit = np.nanmin(np.maximum(t0, t1), axis=1)
    t_hit = np.where(t_enter > 1e-9, t_enter, t_exit)
    t = np.full(len(origins), np.inf)
    ok = (t_exit >= t_enter) & (t_hit > 1e-9)
    t[ok] = t_hit[ok]
    return t


def _intersect_cylinder(origins, dirs, prim: Primitive):
    c = np.asarray(prim.center)
    r, half_h = prim.size[0], prim.size[2]
    o = origins - c
    t = np.full(len(origins), np.inf)

    # lateral surface
    a = dirs[:, 0] ** 2 + dirs[:, 1] ** 2
    b = o[:, 0] * dirs[:, 0] + o[:, 1] * dirs[:, 1]
    cc = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
    disc = b * b - a * cc
    valid = (a > 1e-12) & (disc >= 0)
    sq = np.sqrt(np.where(valid, disc, 0.0))
    safe_a = np.where(valid, a, 1.0)
    for t_side in ((-b - sq) / safe_a, (-b + sq) / safe_a):
        z = o[:, 2] + t_side * dirs[:, 2]
        ok = valid & (t_side > 1e-9) & (np.abs(z) <= half_h)
        t = np.where(ok & (t_side < t), t_side, t)

    # caps
    with np.errstate(divide="ignore", invalid="ignore"):
        for cap in (-half_h, half_h):
            t_cap = (cap - o[:, 2]) / dirs[:, 2]
            x = o[:, 0] + t_cap * dirs[:, 0]
            y = o[:, 1] + t_cap * dirs[:, 1]
            ok = np.isfinite(t_cap) & (t_cap > 1e-9) & (x * x + y * y <= r * r)
            t = np.where(ok & (t_cap < t), t_cap, t)
    return t


_INTERSECTORS = {
    "sphere": _intersect_sphere,
    "box": _intersect_box,
    "cylinder": _intersect_cylinder,
}


def _albedo(prim: Primitive, points: np.ndarray) -> np.ndarray:
    base = np.broadcast_to(np.asarray(prim.color, dtype=np.float64), points.shape)
    if prim.pattern == "solid":
        return base.copy()
    local = points - np.asarray(prim.center)
    if prim.pattern == "stripes":
        select = np.sin(np.pi * prim.frequency * local[:, 2]) > 0
    else:
        cells = np.floor(prim.frequency * local).astype(np.int64)
        select = (cells.sum(axis=1) % 2) == 0
    alt = np.broadcast_to(np.asarray(prim.pattern_color, dtype=np.float64), points.shape)
    return np.where(select[:, None], alt, base)


def _mesh_hits(mesh, origins, dirs):
    """Nearest mesh hit per ray: (t, rgb); t = inf where the ray misses."""
    import trimesh

    t = np.full(len(origins), np.inf)
    rgb = np.zeros((len(origins), 3))
    intersector = trimesh.ray.ray_triangle.RayMeshIntersector(mesh)
    locations, index_ray, index_tri = intersector.intersects_location(
        origins, dirs, multiple_hits=False)
    if len(index_ray) == 0:
        return t, rgb
    bary = trimesh.triangles.points_to_barycentric(mesh.triangles[index_tri], locations)
    vertex_rgb = np.asarray(mesh.visual.vertex_colors, dtype=np.float64)[:, :3] / 255.0
    rgb[index_ray] = np.einsum("nk,nkc->nc", bary, vertex_rgb[mesh.faces[index_tri]])
    t[index_ray] = np.einsum("ij,ij->i", locations - origins[index_ray], dirs[index_ray])
    return t, rgb


def render_image(scene: SceneSpec, pose: CameraPose, intr: Intrinsics,
                 background: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Unlit albedo rendering of one view as a float32 (H, W, 3) array in [0, 1]."""
    if np.linalg.norm(pose.center) < 1e-12:
        raise InvalidArgumentError("degenerate pose: camera center at the origin")
    origins, dirs = camera_rays(pose, intr)
    depth = np.full(len(origins), np.inf)
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64), origins.shape).copy()

    for prim in scene.primitives:
        t = _INTERSECTORS[prim.kind](origins, dirs, prim)
        closer = t < depth
        if np.any(closer):
            points = origins[closer] + t[closer, None] * dirs[closer]
            rgb[closer] = _albedo(prim, points)
            depth[closer] = t[closer]

    if scene.mesh is not None:
        t, mesh_rgb = _mesh_hits(scene.mesh, origins, dirs)
        closer = t < depth
        rgb[closer] = mesh_rgb[closer]

    return np.clip(rgb, 0.0, 1.0).reshape(intr.height, intr.width, 3).astype(np.float32)


@timed_function("render_views")
def render_views(scene: SceneSpec, poses: Sequence[CameraPose], intr: Intrinsics,
                 background: Sequence[float] = (1.0, 1.0, 1.0)) -> List[np.ndarray]:
    """
    Render one RGB image per pose.

    Args:
        scene: Validated scene
        poses: Non-empty list of camera poses
        intr: Shared intrinsics
        background: Constant background color

    Returns:
        List of float32 (H, W, 3) images
    """
    if not poses:
        raise InvalidArgumentError("render_views needs at least one pose")
    scene.validate()
    return [render_image(scene, pose, intr, background) for pose in poses]


def random_scene(seed: int, n_primitives: Optional[int] = None) -> SceneSpec:
    """Procedural composite of 2-5 colored primitives with distinct albedo patterns."""
    rng = np.random.default_rng(seed)
    count = int(n_primitives if n_primitives is not None else rng.integers(2, 6))
    limit = 0.45
    primitives = []
    for i in range(count):
        kind = PRIMITIVE_KINDS[int(rng.integers(len(PRIMITIVE_KINDS)))]
        if kind == "sphere":
            r = rng.uniform(0.12, 0.22)
            size = (r, r, r)
        elif kind == "box":
            size = tuple(rng.uniform(0.08, 0.2, size=3))
        else:
            r = rng.uniform(0.08, 0.18)
            size = (r, r, rng.uniform(0.1, 0.25))
        extent = np.asarray(size)
        center = tuple(rng.uniform(-limit + extent, limit - extent))
        color = tuple(rng.uniform(0.1, 0.95, size=3))
        primitives.append(Primitive(
            kind=kind,
            center=center,
            size=size,
            color=color,
            pattern=PATTERNS[i % len(PATTERNS)],
            pattern_color=tuple(1.0 - np.asarray(color)),
            frequency=float(rng.uniform(3.0, 8.0)),
        ))
    return SceneSpec(primitives=primitives)


def load_mesh_scene(path) -> SceneSpec:
    """Load a vertex-colored triangle mesh and fit it into the unit cube."""
    import trimesh

    mesh = trimesh.load(str(path), force="mesh")
    if mesh.visual.kind != "vertex":
        mesh.visual = mesh.visual.to_color()
    mesh.apply_translation(-mesh.bounding_box.centroid)
    extent = float(np.max(mesh.extents))
    if extent <= 0:
        raise InvalidArgumentError(f"mesh {path} has no spatial extent")
    mesh.apply_scale(2.0 * UNIT_HALF_EXTENT * 0.999 / extent)
    logger.info(f"Loaded mesh {path}: {len(mesh.faces)} faces")
    return SceneSpec(mesh=mesh)


def kmeans_split(poses: Sequence[CameraPose], k: int = 2, seed: int = 0) -> List[List[int]]:
    """
    Partition pose indices by KMeans on camera centers.

    Lloyd iterations with k-means++ seeding (at most 100). Clusters that come
    back empty, e.g. when centers coincide, take the highest indices from the
    largest cluster. Clusters are ordered by their smallest index.
    """
    if k < 1 or len(poses) < k:
        raise InvalidArgumentError(f"need at least k={k} poses, got {len(poses)}")
    centers = camera_centers(poses)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        labels = KMeans(n_clusters=k, init="k-means++", n_init=1, max_iter=100,
                        algorithm="lloyd", random_state=seed).fit_predict(centers)

    groups = [sorted(np.flatnonzero(labels == c).tolist()) for c in range(k)]
    for empty in [g for g in groups if not g]:
        donor = max(groups, key=len)
        empty.append(donor.pop())
    groups = [sorted(g) for g in groups]
    groups.sort(key=lambda g: g[0])
    return groups


def sample_rigid_transform(rng: np.random.Generator, translation_range: float = 0.5) -> RigidTransform:
    """Uniform rotation on SO(3) and a uniform translation in [-range, range]^3."""
    rotation = Rotation.random(random_state=rng).as_matrix()
    translation = rng.uniform(-translation_range, translation_range, size=3)
    return RigidTransform(rotation, translation)


def apply_random_rigid(block: BlockDataset, seed: int, translation_range: float = 0.5,
                       identity: bool = False) -> Tuple[BlockDataset, RigidTransform]:
    """
    Move a block into a new random frame.

    Every pose is left-multiplied by a sampled T. The returned block's
    gt_transform maps the new frame back to the original shared frame, so
    gt_transform ∘ T ∘ P == gt_before ∘ P.

    Returns:
        (transformed block, T)
    """
    rng = np.random.default_rng(seed)
    T = RigidTransform.identity() if identity else sample_rigid_transform(rng, translation_range)
    poses = [pose.transformed(T) for pose in block.poses]
    moved = replace(block, poses=poses, gt_transform=block.gt_transform.compose(T.inverse()))
    return moved, T


def split_blocks(images: Sequence[np.ndarray], poses: Sequence[CameraPose], intr: Intrinsics,
                 seed: int, background=(1.0, 1.0, 1.0)) -> List[BlockDataset]:
    """KMeans-split a rendered trajectory into two blocks in the shared frame."""
    groups = kmeans_split(poses, k=2, seed=seed)
    return [BlockDataset(images=[images[i] for i in g], poses=[poses[i] for i in g],
                         intrinsics=intr, background=tuple(background)) for g in groups]


def inter_block_transform(source: BlockDataset, target: BlockDataset) -> RigidTransform:
    """Ground truth mapping source-block coordinates into the target block's frame."""
    return target.gt_transform.inverse().compose(source.gt_transform)


def save_block(block: BlockDataset, block_dir) -> Path:
    """Write images/*.png and transforms.json for one block."""
    block_dir = Path(block_dir)
    (block_dir / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for i, (image, pose) in enumerate(zip(block.images, block.poses)):
        name = f"images/{i:04d}.png"
        imageio.imwrite(block_dir / name, np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))
        frames.append({"file_path": name, "transform_matrix": pose.to_list()})
    meta = {
        "intrinsics": block.intrinsics.to_dict(),
        "background": [float(c) for c in block.background],
        "block_to_world": block.gt_transform.to_list(),
        "frames": frames,
    }
    (block_dir / "transforms.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return block_dir


def load_block(block_dir) -> BlockDataset:
    block_dir = Path(block_dir)
    meta_path = block_dir / "transforms.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    images, poses = [], []
    for frame in meta["frames"]:
        images.append(imageio.imread(block_dir / frame["file_path"])[..., :3].astype(np.float32) / 255.0)
        poses.append(CameraPose.from_matrix(frame["transform_matrix"]))
    return BlockDataset(
        images=images,
        poses=poses,
        intrinsics=Intrinsics.from_dict(meta["intrinsics"]),
        gt_transform=RigidTransform.from_matrix(meta.get("block_to_world", np.eye(4))),
        background=tuple(meta.get("background", (1.0, 1.0, 1.0))),
    )


def write_gt_transform(object_dir, transform: RigidTransform, source_block: int = 0, target_block: int = 1):
    payload = {"source_block": source_block, "target_block": target_block,
               "matrix": transform.to_list()}
    path = Path(object_dir) / "gt_transform.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def read_gt_transform(path) -> RigidTransform:
    payload = json.loads(Path(path).read_text())
    return RigidTransform.from_matrix(payload["matrix"])


@timed_function("synthesize_object")
def synthesize_object(object_id: str, out_root, config: SynthConfig,
                      scene: Optional[SceneSpec] = None) -> Path:
    """
    Render, split and perturb one object, writing object_<id>/block_<0|1>/.

    Args:
        object_id: Identifier used in the directory name
        out_root: Dataset root directory
        config: Synthesis settings (views, resolution, ranges, seed)
        scene: Scene to render; a procedural scene seeded from config.seed otherwise

    Returns:
        Path of the object directory
    """
    seed = config.seed
    scene = scene or random_scene(seed, config.n_primitives or None)
    intr = Intrinsics.from_fov(config.image_size, config.image_size, config.fov_degrees)
    poses = generate_trajectory(config.n_views, seed, config.radius_range, config.elevation_range)
    images = [render_image(scene, pose, intr, config.background)
              for pose in tqdm(poses, desc=f"render {object_id}", leave=False)]

    blocks = split_blocks(images, poses, intr, seed, config.background)
    moved = []
    for b, block in enumerate(blocks):
        block, _ = apply_random_rigid(block, seed * 2 + b + 1, config.translation_range,
                                      identity=config.identity_transform)
        moved.append(block)

    object_dir = Path(out_root) / f"object_{object_id}"
    for b, block in enumerate(moved):
        save_block(block, object_dir / f"block_{b}")
    write_gt_transform(object_dir, inter_block_transform(moved[0], moved[1]))
    logger.info(f"Synthesized object {object_id}: blocks of {len(moved[0].poses)} and {len(moved[1].poses)} views")
    return object_dir
