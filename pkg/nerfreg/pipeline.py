"""
Registration Pipeline
Experiment manifests, dataset synthesis, per-block NeRF training and grid
extraction, registration-network training, pairwise registration,
evaluation reports, plots and aligned novel-view rendering.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from .alignment import solve_registration, transform_errors
from .config import (EvalConfig, ExtractConfig, NerfTrainConfig, RegTrainConfig, RunConfig, SynthConfig,
                     cache_dir, default_device)
from .errors import EmptyMaskError, InvalidArgumentError, ManifestError
from .field_extract import (GridSurfaceField, NeRFSurfaceField, VoxelGridSample, extract_from_config,
                            load_voxel_grid, save_voxel_grid, surface_evaluator)
from .geometry import CameraPose, RigidTransform
from .nerf_core import NerfBlock, train_block
from .reg_losses import SupervisionBundle, compute_losses
from .reg_transformer import CorrespondencePrediction, RegistrationNetwork
from .scene_synth import load_block, load_mesh_scene, read_gt_transform, synthesize_object
from .utils.checkpoint_io import decode_metadata, encode_metadata, load_archive, save_archive
from .utils.grid_io import write_feature_points
from .utils.timing import timed_function

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "test")


def write_json(path, payload: Dict[str, Any]) -> Path:
    """Deterministic JSON (sorted keys, fixed indent)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass
class ObjectEntry:
    object_id: str
    split: str
    dataset_dir: Path
    checkpoints: Tuple[Path, Path]
    grids: Tuple[Path, Path]
    gt_transform: Path

    def load_gt(self) -> RigidTransform:
        return read_gt_transform(self.gt_transform)


@dataclass
class ExperimentManifest:
    """Objects with their block checkpoints, voxel grids, ground truth and split."""
    objects: List[ObjectEntry] = field(default_factory=list)
    path: Optional[Path] = None

    def split(self, name: str) -> List[ObjectEntry]:
        return [entry for entry in self.objects if entry.split == name]

    @property
    def train(self) -> List[ObjectEntry]:
        return self.split("train")

    @property
    def test(self) -> List[ObjectEntry]:
        return self.split("test")

    def validate(self):
        seen = set()
        for entry in self.objects:
            if entry.split not in SPLITS:
                raise ManifestError(f"object {entry.object_id}: unknown split '{entry.split}'")
            if entry.object_id in seen:
                raise ManifestError(f"object {entry.object_id} is listed more than once")
            seen.add(entry.object_id)
        train_dirs = {e.dataset_dir.resolve() for e in self.train}
        train_grids = {g.resolve() for e in self.train for g in e.grids}
        for entry in self.test:
            if entry.dataset_dir.resolve() in train_dirs or any(g.resolve() in train_grids for g in entry.grids):
                raise ManifestError(f"test object {entry.object_id} shares data with the training split")


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path


def _resolve_grid(value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else cache_dir() / path


def load_manifest(path) -> ExperimentManifest:
    """
    Read a manifest and enforce train/test disjointness.

    Relative dataset and checkpoint paths resolve against the manifest's
    directory; relative grid paths resolve against the grid cache directory.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        base = path.parent
        objects = []
        for raw in payload["objects"]:
            blocks = raw["blocks"]
            if len(blocks) != 2:
                raise ManifestError(f"object {raw['id']} must have exactly two blocks")
            objects.append(ObjectEntry(
                object_id=str(raw["id"]),
                split=raw["split"],
                dataset_dir=_resolve(base, raw["dataset"]),
                checkpoints=tuple(_resolve(base, b["checkpoint"]) for b in blocks),
                grids=tuple(_resolve_grid(b["grid"]) for b in blocks),
                gt_transform=_resolve(base, raw["gt_transform"]),
            ))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: malformed manifest ({e})")
    manifest = ExperimentManifest(objects, path)
    manifest.validate()
    logger.info(f"Loaded manifest {path}: {len(manifest.train)} train / {len(manifest.test)} test objects")
    return manifest


def build_manifest(data_root, n_test: int, out_path=None) -> Path:
    """Manifest over every object_<id> directory; the last n_test objects (sorted) are held out."""
    data_root = Path(data_root)
    object_dirs = sorted(p for p in data_root.glob("object_*") if p.is_dir())
    if not object_dirs:
        raise FileNotFoundError(f"no object_* directories under {data_root}")
    if n_test >= len(object_dirs):
        raise InvalidArgumentError(f"cannot hold out {n_test} of {len(object_dirs)} objects")
    entries = []
    for i, object_dir in enumerate(object_dirs):
        object_id = object_dir.name[len("object_"):]
        entries.append({
            "id": object_id,
            "split": "test" if i >= len(object_dirs) - n_test else "train",
            "dataset": object_dir.name,
            "gt_transform": f"{object_dir.name}/gt_transform.json",
            "blocks": [{"checkpoint": f"{object_dir.name}/block_{b}/nerf.ckpt",
                        "grid": f"object_{object_id}_block_{b}.drgv"} for b in (0, 1)],
        })
    return write_json(out_path or data_root / MANIFEST_NAME, {"objects": entries})


# ---------------------------------------------------------------------------
# Dataset, NeRF and grid stages
# ---------------------------------------------------------------------------

@timed_function("synth_dataset")
def synth_dataset(out_root, config: SynthConfig, meshes: Sequence[Path] = ()) -> Path:
    """Synthesize config.n_objects objects (procedural, or one per mesh) and their manifest."""
    out_root = Path(out_root)
    if meshes:
        jobs = [(f"{i:03d}", load_mesh_scene(mesh)) for i, mesh in enumerate(meshes)]
    else:
        jobs = [(f"{i:03d}", None) for i in range(config.n_objects)]
    for i, (object_id, scene) in enumerate(tqdm(jobs, desc="synth-data")):
        object_config = SynthConfig(**{**asdict(config), "seed": config.seed + i})
        synthesize_object(object_id, out_root, object_config, scene)
    return build_manifest(out_root, min(config.n_test_objects, len(jobs) - 1))


def train_nerf_for_block(block_dir, out_path, config: NerfTrainConfig, device: Optional[str] = None) -> NerfBlock:
    data = load_block(block_dir)
    log_path = Path(out_path).with_suffix(".jsonl")
    block = train_block(data, config, out_path, log_path, device)
    logger.info(f"Block {block_dir}: training-view PSNR {block.training_psnr(data, max_views=4):.2f} dB")
    return block


def train_nerf_for_manifest(manifest: ExperimentManifest, config: NerfTrainConfig, overwrite: bool = False):
    for entry in manifest.objects:
        for b, checkpoint in enumerate(entry.checkpoints):
            if checkpoint.exists() and not overwrite:
                logger.info(f"Skipping existing checkpoint {checkpoint}")
                continue
            train_nerf_for_block(entry.dataset_dir / f"block_{b}", checkpoint, config)


def extract_grid(checkpoint, out_path, config: ExtractConfig, device: Optional[str] = None) -> VoxelGridSample:
    block = NerfBlock.load(checkpoint, device)
    sample = extract_from_config(block, config)
    save_voxel_grid(sample, out_path)
    return sample


def extract_grids_for_manifest(manifest: ExperimentManifest, config: ExtractConfig, overwrite: bool = False):
    for entry in manifest.objects:
        for checkpoint, grid_path in zip(entry.checkpoints, entry.grids):
            if grid_path.exists() and not overwrite:
                continue
            extract_grid(checkpoint, grid_path, config)


# ---------------------------------------------------------------------------
# Registration training
# ---------------------------------------------------------------------------

def registration_learning_rate(step: int, config: RegTrainConfig) -> float:
    """lr halved every lr_halving_steps iterations."""
    return config.lr * 0.5 ** (step // config.lr_halving_steps)


def _reg_config_from_dict(raw: Dict[str, Any]) -> RegTrainConfig:
    return RegTrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})


def save_registration_checkpoint(path, network: RegistrationNetwork, optimizer=None, scheduler=None,
                                 step: int = 0, epoch: int = -1) -> Path:
    return save_archive(path, "registration", {
        "weights": {k: v.detach().cpu() for k, v in network.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else {},
        "scheduler": scheduler.state_dict() if scheduler is not None else {},
        "step": int(step),
        "epoch": int(epoch),
        "config": encode_metadata(asdict(network.config)),
    })


def load_registration_network(path, device: Optional[str] = None) -> Tuple[RegistrationNetwork, Dict[str, Any]]:
    device = device or default_device()
    archive = load_archive(path, "registration", map_location=device)
    network = RegistrationNetwork(_reg_config_from_dict(decode_metadata(archive["config"])))
    network.load_state_dict(archive["weights"])
    network.to(device).eval()
    return network, archive


class _Supervision:
    """Builds surface-field evaluators for training pairs from the configured source."""

    def __init__(self, config: RegTrainConfig, device):
        self.config = config
        self.device = device
        self._blocks = lru_cache(maxsize=config.grid_cache_size)(self._load_block)

    def _load_block(self, checkpoint: str) -> NerfBlock:
        return NerfBlock.load(checkpoint, self.device)

    def evaluator(self, sample: VoxelGridSample, checkpoint: Path) -> Callable:
        if self.config.surface_source == "cache":
            return surface_evaluator(sample, self.config.supervision, self.device)
        block = self._blocks(str(checkpoint))
        if self.config.supervision == "surface":
            return NeRFSurfaceField(block, self.config.surface_views, self.config.surface_steps, sample.voxel_size)
        delta = sample.voxel_size
        return lambda points: -torch.expm1(-block.field.sigma(points.to(block.device, torch.float32)) * delta)


class RegistrationTrainer:
    """Trains the registration network over the training pairs of a manifest."""

    def __init__(self, manifest: ExperimentManifest, config: RegTrainConfig, out_dir,
                 device: Optional[str] = None):
        self.manifest = manifest
        self.config = config
        self.out_dir = Path(out_dir)
        self.device = device or default_device()
        torch.manual_seed(config.seed)
        self.network = RegistrationNetwork(config).to(self.device)
        self.optimizer = torch.optim.AdamW(self.network.parameters(), lr=config.lr,
                                           weight_decay=config.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.StepLR(self.optimizer, step_size=config.lr_halving_steps,
                                                         gamma=0.5)
        self.step = 0
        self.start_epoch = 0
        self.load_grid = lru_cache(maxsize=config.grid_cache_size)(self._read_grid)
        self.supervision = _Supervision(config, self.device)

    @staticmethod
    def _read_grid(path: str) -> VoxelGridSample:
        return load_voxel_grid(path)

    def resume(self, checkpoint):
        archive = load_archive(checkpoint, "registration", map_location=self.device)
        self.network.load_state_dict(archive["weights"])
        self.optimizer.load_state_dict(archive["optimizer"])
        self.scheduler.load_state_dict(archive["scheduler"])
        self.step = int(archive["step"])
        self.start_epoch = int(archive["epoch"]) + 1
        logger.info(f"Resumed registration training at step {self.step}, epoch {self.start_epoch}")

    def training_pairs(self) -> List[ObjectEntry]:
        pairs = []
        for entry in self.manifest.train:
            if not all(g.exists() for g in entry.grids):
                logger.warning(f"Object {entry.object_id}: voxel grids missing, skipped")
                continue
            if any(self.load_grid(str(g)).is_empty for g in entry.grids):
                logger.warning(f"Object {entry.object_id}: empty voxel mask, skipped")
                continue
            pairs.append(entry)
        if not pairs:
            raise InvalidArgumentError("no training pair with non-empty masks")
        return pairs

    def train_step(self, entry: ObjectEntry, swap: bool) -> Dict[str, Any]:
        src_idx, tgt_idx = (1, 0) if swap else (0, 1)
        source = self.load_grid(str(entry.grids[src_idx]))
        target = self.load_grid(str(entry.grids[tgt_idx]))
        gt = entry.load_gt()
        gt = gt.inverse() if swap else gt

        self.network.train()
        pred = self.network(source, target)
        src_eval = self.supervision.evaluator(source, entry.checkpoints[src_idx])
        tgt_eval = self.supervision.evaluator(target, entry.checkpoints[tgt_idx])
        with torch.no_grad():
            src_surface = src_eval(pred.src_points).to(pred.src_conf.dtype)
            tgt_surface = tgt_eval(pred.tgt_points).to(pred.tgt_conf.dtype)
        sup = SupervisionBundle(src_surface, tgt_surface, gt, src_eval, tgt_eval)
        lr = self.optimizer.param_groups[0]["lr"]
        total, parts, feature = compute_losses(pred, sup, self.config, source.voxel_size, self.step)

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.scheduler.step()

        record = {"step": self.step, "object": entry.object_id, "swap": bool(swap),
                  "total": float(total), "lr": lr, "n_source": int(pred.src_points.shape[0]),
                  "n_target": int(pred.tgt_points.shape[0]), "feature_pairs": feature.n_positive}
        record.update(parts.as_dict())
        self.step += 1
        return record

    @timed_function("train_registration")
    def fit(self, max_steps: Optional[int] = None) -> Path:
        pairs = self.training_pairs()
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.out_dir / "train_log.jsonl"
        checkpoint = self.out_dir / "registration.ckpt"
        with open(log_path, "a", encoding="utf-8") as log_file:
            for epoch in range(self.start_epoch, self.config.epochs):
                rng = np.random.default_rng([self.config.seed, epoch])
                order = rng.permutation(len(pairs))
                swaps = rng.random(len(pairs)) < 0.5
                for i in tqdm(order, desc=f"epoch {epoch}", leave=False):
                    record = self.train_step(pairs[i], bool(swaps[i]))
                    record["epoch"] = epoch
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                    if max_steps is not None and self.step >= max_steps:
                        break
                log_file.flush()
                save_registration_checkpoint(checkpoint, self.network, self.optimizer, self.scheduler,
                                             self.step, epoch)
                logger.info(f"Epoch {epoch} done at step {self.step}")
                if max_steps is not None and self.step >= max_steps:
                    break
        return checkpoint


def train_registration(manifest: ExperimentManifest, config: RegTrainConfig, out_dir,
                       resume=None, max_steps: Optional[int] = None, device: Optional[str] = None) -> Path:
    trainer = RegistrationTrainer(manifest, config, out_dir, device)
    if resume is not None:
        trainer.resume(resume)
    return trainer.fit(max_steps)


# ---------------------------------------------------------------------------
# Registration and evaluation
# ---------------------------------------------------------------------------

@dataclass
class RegistrationResult:
    transform: RigidTransform
    n_source_correspondences: int
    n_target_correspondences: int
    mean_confidence: float
    n_inliers: Optional[int] = None
    rre_deg: Optional[float] = None
    rte: Optional[float] = None

    def to_json(self) -> Dict[str, Any]:
        payload = {
            "transform": self.transform.to_list(),
            "n_source_correspondences": self.n_source_correspondences,
            "n_target_correspondences": self.n_target_correspondences,
            "mean_confidence": self.mean_confidence,
        }
        if self.n_inliers is not None:
            payload["n_inliers"] = self.n_inliers
        if self.rre_deg is not None:
            payload.update({"rre_deg": self.rre_deg, "rte": self.rte, "rte_x100": self.rte * 100.0})
        return payload


@torch.no_grad()
def predict_pair(network: RegistrationNetwork, source: VoxelGridSample,
                 target: VoxelGridSample) -> CorrespondencePrediction:
    network.eval()
    return network(source, target).detach()


@timed_function("register_pair")
def register_pair(network: RegistrationNetwork, source: VoxelGridSample, target: VoxelGridSample,
                  config: Optional[EvalConfig] = None, gt: Optional[RigidTransform] = None) -> RegistrationResult:
    """Estimate the source-to-target transform of two voxel grids."""
    config = config or EvalConfig()
    for name, sample in (("source", source), ("target", target)):
        if sample.is_empty:
            raise EmptyMaskError(f"{name} voxel grid mask is empty")
    pred = predict_pair(network, source, target)
    transform, corr, ransac = solve_registration(
        pred, config.min_confidence, config.ransac, config.ransac_iterations,
        config.ransac_threshold_voxels * source.voxel_size, config.seed)
    result = RegistrationResult(
        transform=transform,
        n_source_correspondences=corr.n_from_source,
        n_target_correspondences=corr.n_from_target,
        mean_confidence=float(np.mean(corr.weights)),
        n_inliers=ransac.n_inliers if ransac is not None else None,
    )
    if gt is not None:
        result.rre_deg, result.rte = transform_errors(transform, gt)
    return result


def load_grid_input(path, extract_config: ExtractConfig) -> VoxelGridSample:
    """A DRGV grid as-is, or a NeRF checkpoint extracted on the fly."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    if path.suffix == ".drgv":
        return load_voxel_grid(path)
    return extract_from_config(NerfBlock.load(path), extract_config)


@torch.no_grad()
def dump_feature_points(network: RegistrationNetwork, sample: VoxelGridSample, path) -> Path:
    """Write the downsampled feature point set of one grid as a DRGP file."""
    network.eval()
    point_set = network.extract_points(sample)
    return write_feature_points(path, point_set.points.cpu().numpy(), point_set.features.cpu().numpy())


def register(source, target, model, out_path, run_config: Optional[RunConfig] = None, gt_path=None,
             render_dir=None, points_dir=None) -> RegistrationResult:
    run_config = run_config or RunConfig()
    network, _ = load_registration_network(model)
    gt = read_gt_transform(gt_path) if gt_path else None
    source_grid = load_grid_input(source, run_config.extract)
    target_grid = load_grid_input(target, run_config.extract)
    result = register_pair(network, source_grid, target_grid, run_config.eval, gt)
    write_json(out_path, result.to_json())
    logger.info(f"Registration written to {out_path}")
    if points_dir is not None:
        for name, grid in (("source", source_grid), ("target", target_grid)):
            dump_feature_points(network, grid, Path(points_dir) / f"{name}.drgp")
    if render_dir is not None:
        if Path(source).suffix == ".drgv" or Path(target).suffix == ".drgv":
            logger.warning("Aligned views need NeRF checkpoints for both blocks; skipping render")
        else:
            render_aligned_views(target, source, result.transform, render_dir, gt)
    return result


def _source_points(entry: ObjectEntry, source: VoxelGridSample, limit: int = 256) -> np.ndarray:
    """Source camera centers when the block checkpoint exists, else a stride of masked voxel centers."""
    if entry.checkpoints[0].exists():
        metadata = decode_metadata(load_archive(entry.checkpoints[0], "nerf")["metadata"])
        return np.array([np.asarray(m).reshape(4, 4)[:3, 3] for m in metadata["poses"]])
    points = source.grid[..., :3][source.mask]
    stride = max(1, len(points) // limit)
    return points[::stride].astype(np.float64)


@timed_function("evaluate")
def evaluate(manifest: ExperimentManifest, model, out_dir, config: Optional[EvalConfig] = None) -> Dict[str, Any]:
    """
    Register every test object and write report.json and report.csv.

    Objects with missing grids are skipped; the report carries the coverage.
    """
    config = config or EvalConfig()
    network, _ = load_registration_network(model)
    rows = []
    for entry in manifest.test:
        if not all(g.exists() for g in entry.grids):
            logger.warning(f"Object {entry.object_id}: voxel grids missing, skipped")
            continue
        source, target = load_voxel_grid(entry.grids[0]), load_voxel_grid(entry.grids[1])
        gt = entry.load_gt()
        try:
            result = register_pair(network, source, target, config, gt)
        except (EmptyMaskError, RuntimeError) as e:
            logger.warning(f"Object {entry.object_id}: registration failed ({e}), skipped")
            continue
        rows.append({
            "object": entry.object_id,
            "rre_deg": result.rre_deg,
            "rte": result.rte,
            "rte_x100": result.rte * 100.0,
            "n_source_correspondences": result.n_source_correspondences,
            "n_target_correspondences": result.n_target_correspondences,
            "mean_confidence": result.mean_confidence,
            "estimate": result.transform.to_list(),
            "gt": gt.to_list(),
            "source_points": _source_points(entry, source).tolist(),
        })

    frame = pd.DataFrame(rows, columns=["object", "rre_deg", "rte", "rte_x100", "n_source_correspondences",
                                        "n_target_correspondences", "mean_confidence"])
    report = {
        "objects": rows,
        "n_evaluated": len(rows),
        "n_test": len(manifest.test),
        "coverage": len(rows) / len(manifest.test) if manifest.test else 0.0,
        "mean_rre_deg": float(frame["rre_deg"].mean()) if rows else None,
        "mean_rte": float(frame["rte"].mean()) if rows else None,
        "mean_rte_x100": float(frame["rte_x100"].mean()) if rows else None,
    }
    out_dir = Path(out_dir)
    write_json(out_dir / "report.json", report)
    frame.to_csv(out_dir / "report.csv", index=False, float_format="%.6f")
    if rows:
        logger.info(f"Evaluated {len(rows)}/{len(manifest.test)} objects: mean RRE {report['mean_rre_deg']:.2f} deg, "
                    f"mean RTE {report['mean_rte_x100']:.2f} (x1e2)")
    return report


# ---------------------------------------------------------------------------
# Plots and aligned views
# ---------------------------------------------------------------------------

def aligned_centers(points, estimate: RigidTransform, gt: RigidTransform) -> Tuple[np.ndarray, np.ndarray]:
    """Source-frame points mapped into the target frame by the estimate and by the ground truth."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return estimate.apply(points), gt.apply(points)


def plot_report(report_path, out_dir) -> List[Path]:
    """Per object: RRE and RTE histograms with the object marked, and an aligned-pose scatter."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_path = Path(report_path)
    if not report_path.exists():
        raise FileNotFoundError(f"report not found: {report_path}")
    report = json.loads(report_path.read_text(encoding="utf-8"))
    rows = report.get("objects", [])
    if not rows:
        logger.warning(f"Report {report_path} has no evaluated objects; nothing to plot")
        return []

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rre_values = [row["rre_deg"] for row in rows]
    rte_values = [row["rte_x100"] for row in rows]
    written = []
    for row in rows:
        for key, values, label in (("rre", rre_values, "RRE (deg)"), ("rte", rte_values, "RTE (x1e2)")):
            fig, ax = plt.subplots(figsize=(5, 4))
            ax.hist(values, bins=min(20, max(5, len(values))), color="tab:blue", alpha=0.7)
            ax.axvline(row["rre_deg"] if key == "rre" else row["rte_x100"], color="tab:red", linestyle="--")
            ax.set_xlabel(label)
            ax.set_ylabel("objects")
            ax.set_title(f"object {row['object']}")
            path = out_dir / f"{row['object']}_{key}.png"
            fig.savefig(path, dpi=100)
            plt.close(fig)
            written.append(path)

        est, gt = aligned_centers(row["source_points"], RigidTransform.from_matrix(row["estimate"]),
                                  RigidTransform.from_matrix(row["gt"]))
        fig = plt.figure(figsize=(5, 5))
        ax = fig.add_subplot(projection="3d")
        ax.scatter(gt[:, 0], gt[:, 1], gt[:, 2], s=12, c="tab:green", label="ground truth")
        ax.scatter(est[:, 0], est[:, 1], est[:, 2], s=12, c="tab:red", marker="x", label="estimate")
        ax.legend(loc="upper right")
        ax.set_title(f"object {row['object']}: RRE {row['rre_deg']:.1f} deg")
        path = out_dir / f"{row['object']}_poses.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    logger.info(f"Wrote {len(written)} plots to {out_dir}")
    return written


def render_aligned_views(target_checkpoint, source_checkpoint, transform: RigidTransform, out_dir,
                         gt: Optional[RigidTransform] = None, max_views: int = 4) -> List[Path]:
    """
    Render the target block from source cameras mapped into the target frame
    by the estimate, the ground truth (when given) and no transform.
    """
    import imageio.v2 as imageio

    target = NerfBlock.load(target_checkpoint)
    source_archive = load_archive(source_checkpoint, "nerf")
    poses = [CameraPose.from_matrix(m) for m in decode_metadata(source_archive["metadata"])["poses"]][:max_views]
    variants = {"estimate": transform, "identity": RigidTransform.identity()}
    if gt is not None:
        variants["gt"] = gt
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, T in variants.items():
        for i, pose in enumerate(poses):
            image = target.render_image(pose.transformed(T))
            path = out_dir / f"{name}_{i:02d}.png"
            imageio.imwrite(path, np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))
            written.append(path)
    return written
