"""
Rigid Alignment
Weighted Kabsch solve over bidirectional correspondences, RANSAC refinement
and the RRE/RTE error metrics.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DegenerateConfigurationError, InsufficientCorrespondencesError, InvalidArgumentError
from .geometry import RigidTransform, check_rotation
from .reg_transformer import CorrespondencePrediction

logger = logging.getLogger(__name__)

MIN_CORRESPONDENCES = 3
RANK_TOL = 1e-9
ROTATION_TOL = 1e-6


@dataclass
class WeightedCorrespondences:
    """Pairs (source-frame point, target-frame point, weight)."""
    source: np.ndarray
    target: np.ndarray
    weights: np.ndarray
    n_from_source: int = 0
    n_from_target: int = 0

    def __post_init__(self):
        self.source = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if not (len(self.source) == len(self.target) == len(self.weights)):
            raise InvalidArgumentError("correspondence arrays have different lengths")
        if np.any(self.weights < 0):
            raise InvalidArgumentError("correspondence weights must be non-negative")

    def __len__(self) -> int:
        return len(self.weights)

    def subset(self, keep: np.ndarray) -> "WeightedCorrespondences":
        return WeightedCorrespondences(self.source[keep], self.target[keep], self.weights[keep])


def _to_numpy(tensor) -> np.ndarray:
    if hasattr(tensor, "detach"):
        tensor = tensor.detach().cpu().numpy()
    return np.asarray(tensor, dtype=np.float64)


def assemble_correspondences(pred: CorrespondencePrediction, min_confidence: float = 0.05) -> WeightedCorrespondences:
    """
    Stack both halves as (source point, target point, confidence) and drop
    pairs with confidence below the floor.
    """
    src_pts, src_pred, src_conf = (_to_numpy(v) for v in (pred.src_points, pred.src_pred, pred.src_conf))
    tgt_pts, tgt_pred, tgt_conf = (_to_numpy(v) for v in (pred.tgt_points, pred.tgt_pred, pred.tgt_conf))
    keep_src = src_conf >= min_confidence
    keep_tgt = tgt_conf >= min_confidence
    n_src, n_tgt = int(keep_src.sum()), int(keep_tgt.sum())
    if n_src + n_tgt < MIN_CORRESPONDENCES:
        raise InsufficientCorrespondencesError(
            f"only {n_src + n_tgt} correspondences have confidence >= {min_confidence}")
    return WeightedCorrespondences(
        source=np.concatenate([src_pts[keep_src], tgt_pred[keep_tgt]]),
        target=np.concatenate([src_pred[keep_src], tgt_pts[keep_tgt]]),
        weights=np.concatenate([src_conf[keep_src], tgt_conf[keep_tgt]]),
        n_from_source=n_src,
        n_from_target=n_tgt,
    )


def weighted_kabsch(corr: WeightedCorrespondences) -> RigidTransform:
    """
    Weighted least-squares rigid transform (unit scale) mapping source onto target.

    Args:
        corr: At least three pairs with positive total weight

    Returns:
        RigidTransform with a proper rotation (reflections are corrected)
    """
    if len(corr) < MIN_CORRESPONDENCES:
        raise InsufficientCorrespondencesError(f"need {MIN_CORRESPONDENCES} correspondences, got {len(corr)}")
    total = corr.weights.sum()
    if total <= 0:
        raise InvalidArgumentError("correspondence weights sum to zero")
    w = corr.weights / total
    x_mean = w @ corr.source
    y_mean = w @ corr.target
    H = (corr.source - x_mean).T @ (w[:, None] * (corr.target - y_mean))
    U, S, Vt = np.linalg.svd(H)
    if S[0] <= 1e-300 or S[1] <= RANK_TOL * S[0]:
        raise DegenerateConfigurationError(f"cross-covariance rank < 2 (singular values {S})")
    V = Vt.T
    d = np.sign(np.linalg.det(V @ U.T))
    R = V @ np.diag([1.0, 1.0, d]) @ U.T
    t = y_mean - R @ x_mean
    return RigidTransform(R, t)


def rre(R_est, R_gt) -> float:
    """
    Geodesic angle between two rotations in degrees, in [0, 180].

    Equal to arccos((trace(R_gt^T R_est) - 1) / 2); the sine from the
    antisymmetric part keeps small angles accurate.
    """
    R_est = check_rotation(R_est, ROTATION_TOL, "estimated rotation")
    R_gt = check_rotation(R_gt, ROTATION_TOL, "ground-truth rotation")
    relative = R_gt.T @ R_est
    cos = np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0)
    skew = relative - relative.T
    sin = 0.5 * np.linalg.norm([skew[2, 1], skew[0, 2], skew[1, 0]])
    return float(np.degrees(np.arctan2(sin, cos)))


def rte(t_est, t_gt) -> float:
    """Euclidean translation error in normalized scene units."""
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


def transform_errors(estimate: RigidTransform, gt: RigidTransform) -> Tuple[float, float]:
    return rre(estimate.rotation, gt.rotation), rte(estimate.translation, gt.translation)


@dataclass
class RansacResult:
    transform: RigidTransform
    inlier_mask: np.ndarray
    n_inliers: int
    inlier_mass: float
    n_hypotheses: int


def _inliers(transform: RigidTransform, corr: WeightedCorrespondences, threshold: float) -> np.ndarray:
    residual = np.linalg.norm(transform.apply(corr.source) - corr.target, axis=1)
    return residual < threshold


def ransac_refine(corr: WeightedCorrespondences, n_iters: int = 512, inlier_threshold: float = 2.0 / 64,
                  seed: int = 0) -> RansacResult:
    """
    3-point hypothesize-and-verify over weighted_kabsch.

    Hypothesis 0 is the all-pairs solve, so the result never has less inlier
    mass than it. Ties keep the earlier hypothesis. The winner is refit on
    its inliers when that does not lose inlier mass.
    """
    best = weighted_kabsch(corr)
    best_mask = _inliers(best, corr, inlier_threshold)
    best_mass = float(corr.weights[best_mask].sum())

    rng = np.random.default_rng(seed)
    candidates = np.flatnonzero(corr.weights > 0)
    skipped = 0
    for _ in range(n_iters):
        if len(candidates) < MIN_CORRESPONDENCES:
            break
        pick = rng.choice(candidates, size=MIN_CORRESPONDENCES, replace=False)
        try:
            hypothesis = weighted_kabsch(corr.subset(pick))
        except DegenerateConfigurationError:
            skipped += 1
            continue
        mask = _inliers(hypothesis, corr, inlier_threshold)
        mass = float(corr.weights[mask].sum())
        if mass > best_mass:
            best, best_mask, best_mass = hypothesis, mask, mass
    if skipped:
        logger.debug(f"RANSAC skipped {skipped} degenerate samples")

    if best_mask.sum() >= MIN_CORRESPONDENCES and corr.weights[best_mask].sum() > 0:
        try:
            refit = weighted_kabsch(corr.subset(best_mask))
            refit_mask = _inliers(refit, corr, inlier_threshold)
            refit_mass = float(corr.weights[refit_mask].sum())
            if refit_mass >= best_mass:
                best, best_mask, best_mass = refit, refit_mask, refit_mass
        except DegenerateConfigurationError:
            logger.warning("RANSAC inlier refit is degenerate; keeping the best hypothesis")

    return RansacResult(best, best_mask, int(best_mask.sum()), best_mass, n_iters + 1)


def solve_registration(pred: CorrespondencePrediction, min_confidence: float = 0.05, ransac: bool = False,
                       ransac_iterations: int = 512, ransac_threshold: float = 2.0 / 64,
                       seed: int = 0) -> Tuple[RigidTransform, WeightedCorrespondences, Optional[RansacResult]]:
    """Correspondences -> transform, optionally refined with RANSAC."""
    corr = assemble_correspondences(pred, min_confidence)
    if ransac:
        result = ransac_refine(corr, ransac_iterations, ransac_threshold, seed)
        return result.transform, corr, result
    return weighted_kabsch(corr), corr, None
