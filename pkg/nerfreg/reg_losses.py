"""
Registration Losses
Confidence BCE against queried surface fields, surface-field consistency,
robust correspondence loss, InfoNCE feature loss and their weighted sum.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import torch

from .config import RegTrainConfig
from .errors import InvalidArgumentError, NonFiniteLossError
from .geometry import RigidTransform
from .reg_transformer import CorrespondencePrediction

logger = logging.getLogger(__name__)

BCE_EPS = 1e-7
LOSS_TERMS = ("confidence", "surface_field", "correspondence", "feature")

Evaluator = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class LossWeights:
    """Weights of the four terms; `confidence` allows ablating the confidence loss."""
    surface_field: float = 1.0
    correspondence: float = 0.1
    feature: float = 1.0
    confidence: float = 1.0

    def __post_init__(self):
        if min(self.surface_field, self.correspondence, self.feature, self.confidence) < 0:
            raise InvalidArgumentError("loss weights must be non-negative")

    @classmethod
    def from_reg_config(cls, config: RegTrainConfig) -> "LossWeights":
        return cls(config.lambda_sf, config.lambda_corr, config.lambda_feat, config.lambda_conf)


@dataclass
class RobustLossParams:
    eta: float = 1.0  # shape
    gamma: float = 0.5  # scale

    def __post_init__(self):
        if self.gamma <= 0:
            raise InvalidArgumentError(f"robust loss scale must be positive, got {self.gamma}")


@dataclass
class SupervisionBundle:
    """
    Ground truth for one pair: surface fields queried at the input points of
    each block, the source-to-target transform and evaluators for both blocks.
    """
    src_surface: torch.Tensor
    tgt_surface: torch.Tensor
    gt_transform: RigidTransform
    src_evaluator: Optional[Evaluator] = None
    tgt_evaluator: Optional[Evaluator] = None

    def __post_init__(self):
        self.src_surface = self.src_surface.clamp(0.0, 1.0)
        self.tgt_surface = self.tgt_surface.clamp(0.0, 1.0)


@dataclass
class FeatureLossResult:
    loss: torch.Tensor
    n_positive: int
    no_overlap: bool


@dataclass
class LossParts:
    confidence: torch.Tensor
    surface_field: torch.Tensor
    correspondence: torch.Tensor
    feature: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in LOSS_TERMS}


def _bce(target: torch.Tensor, prob: torch.Tensor) -> torch.Tensor:
    p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def confidence_loss(pred: CorrespondencePrediction, sup: SupervisionBundle) -> torch.Tensor:
    """BCE(S_src, conf_src) + BCE(S_tgt, conf_tgt), each averaged over points."""
    if pred.src_conf.shape != sup.src_surface.shape or pred.tgt_conf.shape != sup.tgt_surface.shape:
        raise InvalidArgumentError("confidence and supervision shapes differ")
    target_src = sup.src_surface.to(pred.src_conf.dtype)
    target_tgt = sup.tgt_surface.to(pred.tgt_conf.dtype)
    return _bce(target_src, pred.src_conf) + _bce(target_tgt, pred.tgt_conf)


def surface_field_loss(pred: CorrespondencePrediction, sup: SupervisionBundle) -> torch.Tensor:
    """
    Mean L1 between the surface field at the input points (in their own block)
    and at their predicted counterparts (in the other block).
    """
    if sup.src_evaluator is None or sup.tgt_evaluator is None:
        raise InvalidArgumentError("surface-field loss needs evaluators for both blocks")
    at_inputs = torch.cat([sup.src_surface, sup.tgt_surface]).to(pred.src_pred.dtype)
    at_preds = torch.cat([sup.tgt_evaluator(pred.src_pred).to(pred.src_pred.dtype),
                          sup.src_evaluator(pred.tgt_pred).to(pred.src_pred.dtype)])
    return torch.mean(torch.abs(at_inputs - at_preds))


def robust_rho(x, params: RobustLossParams = RobustLossParams()) -> torch.Tensor:
    """
    General robust kernel rho(x; alpha=eta, c=gamma), with the log form at
    alpha = 0 and the quadratic form at alpha = 2.
    """
    x = torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
    alpha, scale = float(params.eta), float(params.gamma)
    squared = (x / scale) ** 2
    if alpha == 2.0:
        return 0.5 * squared
    if alpha == 0.0:
        return torch.log1p(0.5 * squared)
    beta = abs(alpha - 2.0)
    return (beta / alpha) * (torch.pow(squared / beta + 1.0, 0.5 * alpha) - 1.0)


def _safe_norm(v: torch.Tensor) -> torch.Tensor:
    return torch.sqrt(torch.clamp(torch.sum(v * v, dim=-1), min=1e-24))


def _transform_tensors(transform: RigidTransform, like: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    R = torch.as_tensor(transform.rotation, dtype=like.dtype, device=like.device)
    t = torch.as_tensor(transform.translation, dtype=like.dtype, device=like.device)
    return R, t


def correspondence_loss(pred: CorrespondencePrediction, sup: SupervisionBundle,
                        params: RobustLossParams = RobustLossParams()) -> torch.Tensor:
    """
    Sum over both directions of the mean of rho(w_i * ||T*(x_i) - y_i||), where
    w_i is the ground-truth surface field at x_i taken as a constant.
    """
    R, t = _transform_tensors(sup.gt_transform, pred.src_pred)
    src_target = pred.src_points @ R.T + t
    tgt_target = (pred.tgt_points - t) @ R
    w_src = sup.src_surface.detach().to(R.dtype)
    w_tgt = sup.tgt_surface.detach().to(R.dtype)
    loss_src = robust_rho(w_src * _safe_norm(src_target - pred.src_pred), params).mean()
    loss_tgt = robust_rho(w_tgt * _safe_norm(tgt_target - pred.tgt_pred), params).mean()
    return loss_src + loss_tgt


def _info_nce_direction(f_anchor, f_other, x_anchor_mapped, x_other, r_pos, r_neg, temperature):
    dists = torch.cdist(x_anchor_mapped, x_other)
    nearest_dist, nearest = dists.min(dim=1)
    has_positive = nearest_dist < r_pos
    n_anchor = int(has_positive.sum())
    if n_anchor == 0:
        return f_anchor.new_zeros(()), 0

    logits = (f_anchor @ f_other.T) / math.sqrt(f_anchor.shape[1]) / temperature
    positive_logit = logits.gather(1, nearest[:, None]).squeeze(1)
    negatives = dists > r_neg
    masked = torch.where(negatives, logits, torch.full_like(logits, -math.inf))
    candidates = torch.cat([positive_logit[:, None], masked], dim=1)
    per_anchor = torch.logsumexp(candidates, dim=1) - positive_logit
    return per_anchor[has_positive].mean(), n_anchor


def feature_loss(f_src: torch.Tensor, f_tgt: torch.Tensor, x_src: torch.Tensor, x_tgt: torch.Tensor,
                 gt_transform: RigidTransform, r_pos: float, r_neg: float,
                 temperature: float = 0.1) -> FeatureLossResult:
    """
    InfoNCE over scaled dot-product feature similarities, summed over both directions.

    The logit of a pair is f_a . f_b / (sqrt(d) * temperature), with d the
    feature width, so s+ and s- are both divided by sqrt(d) and by the
    temperature before the softmax. An anchor's positive is the nearest point of the other set when it lies
    within r_pos of the anchor's ground-truth location; its negatives are the
    points farther than r_neg. Anchors without a positive are skipped.
    """
    if r_neg < r_pos:
        raise InvalidArgumentError("r_neg must be at least r_pos")
    R, t = _transform_tensors(gt_transform, x_src)
    loss_src, n_src = _info_nce_direction(f_src, f_tgt, x_src @ R.T + t, x_tgt, r_pos, r_neg, temperature)
    loss_tgt, n_tgt = _info_nce_direction(f_tgt, f_src, (x_tgt - t) @ R, x_src, r_pos, r_neg, temperature)
    n_positive = n_src + n_tgt
    if n_positive == 0:
        logger.warning("No ground-truth overlap pairs for the feature loss")
    return FeatureLossResult(loss_src + loss_tgt, n_positive, n_positive == 0)


def total_loss(parts: LossParts, weights: LossWeights = LossWeights(), step: int = -1) -> torch.Tensor:
    """L = w_conf L_conf + l1 L_sf + l2 L_corr + l3 L_feat; any non-finite part aborts."""
    for name in LOSS_TERMS:
        value = getattr(parts, name)
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NonFiniteLossError(f"loss term '{name}' is not finite at step {step}",
                                     step=step, parts=parts.as_dict())
    return (weights.confidence * parts.confidence
            + weights.surface_field * parts.surface_field
            + weights.correspondence * parts.correspondence
            + weights.feature * parts.feature)


def compute_losses(pred: CorrespondencePrediction, sup: SupervisionBundle, config: RegTrainConfig,
                   voxel_size: float, step: int = -1) -> Tuple[torch.Tensor, LossParts, FeatureLossResult]:
    """All four terms and their weighted total for one training pair."""
    params = RobustLossParams(config.robust_eta, config.robust_gamma)
    feature = feature_loss(pred.src_features, pred.tgt_features, pred.src_points, pred.tgt_points,
                           sup.gt_transform, config.r_pos_voxels * voxel_size,
                           config.r_neg_voxels * voxel_size, config.temperature)
    parts = LossParts(
        confidence=confidence_loss(pred, sup),
        surface_field=surface_field_loss(pred, sup),
        correspondence=correspondence_loss(pred, sup, params),
        feature=feature.loss,
    )
    return total_loss(parts, LossWeights.from_reg_config(config), step), parts, feature
