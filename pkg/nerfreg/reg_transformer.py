"""
Correspondence Transformer
Multi-head attention, the self/cross-attention encoder over two feature point
sets, the single-head attention decoder, and the full registration network
(backbone + encoder + decoder) shared by both pair directions.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import RegTrainConfig
from .errors import InvalidArgumentError
from .field_extract import VoxelGridSample
from .reg_backbone import FPN3D, FeaturePointSet, flatten, fpn3d, spherical_downsample

logger = logging.getLogger(__name__)


@dataclass
class TransformerConfig:
    n_layers: int = 6
    n_heads: int = 8
    d_model: int = 128
    pos_frequencies: int = 8

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise InvalidArgumentError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")

    @property
    def d_feedforward(self) -> int:
        return 2 * self.d_model

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def from_reg_config(cls, config: RegTrainConfig) -> "TransformerConfig":
        return cls(config.n_layers, config.n_heads, config.feature_dim, config.pos_frequencies)


@dataclass
class CorrespondencePrediction:
    """
    Both halves of the decoder output. src_pred is in the target frame,
    tgt_pred in the source frame.
    """
    src_points: torch.Tensor
    src_pred: torch.Tensor
    src_conf: torch.Tensor
    tgt_points: torch.Tensor
    tgt_pred: torch.Tensor
    tgt_conf: torch.Tensor
    src_features: Optional[torch.Tensor] = None
    tgt_features: Optional[torch.Tensor] = None

    def detach(self) -> "CorrespondencePrediction":
        return CorrespondencePrediction(*[None if v is None else v.detach() for v in (
            self.src_points, self.src_pred, self.src_conf, self.tgt_points, self.tgt_pred,
            self.tgt_conf, self.src_features, self.tgt_features)])


class MultiHeadAttention(nn.Module):
    """softmax(Q W_q (K W_k)^T / sqrt(d_k)) V W_v per head, concatenated, then W_o."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise InvalidArgumentError(f"d_model {d_model} is not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)  # softmax rows are invariant to a key bias
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, query: torch.Tensor, key: torch.Tensor, value: torch.Tensor,
                return_weights: bool = False):
        """
        Args:
            query: (n, d)
            key: (m, d)
            value: (m, d)

        Returns:
            (n, d) output, plus (h, n, m) attention weights if requested
        """
        if query.ndim != 2 or key.ndim != 2 or value.ndim != 2:
            raise InvalidArgumentError("attention inputs must be 2-D (points x features)")
        if query.shape[1] != self.d_model or key.shape[1] != self.d_model or value.shape[1] != self.d_model:
            raise InvalidArgumentError(
                f"feature width mismatch: q {query.shape[1]}, k {key.shape[1]}, v {value.shape[1]}, "
                f"expected {self.d_model}")
        if key.shape[0] != value.shape[0]:
            raise InvalidArgumentError(f"{key.shape[0]} keys but {value.shape[0]} values")

        n, m, h = query.shape[0], key.shape[0], self.n_heads
        q = self.q_proj(query).view(n, h, self.d_head).transpose(0, 1)
        k = self.k_proj(key).view(m, h, self.d_head).transpose(0, 1)
        v = self.v_proj(value).view(m, h, self.d_head).transpose(0, 1)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.d_head), dim=-1)
        out = (weights @ v).transpose(0, 1).reshape(n, self.d_model)
        out = self.out_proj(out)
        return (out, weights) if return_weights else out


class PositionalEncoding3D(nn.Module):
    """Sinusoids of each coordinate at octave frequencies, linearly projected to d_model."""

    def __init__(self, d_model: int, n_frequencies: int = 8):
        super().__init__()
        self.register_buffer("frequencies", math.pi * 2.0 ** torch.arange(n_frequencies, dtype=torch.float32))
        self.proj = nn.Linear(3 * 2 * n_frequencies, d_model)

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        angles = points[..., None] * self.frequencies.to(points.dtype)  # (N, 3, F)
        encoded = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1).flatten(-2)
        return self.proj(encoded)


class FeedForward(nn.Module):

    def __init__(self, d_model: int, d_hidden: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_model, d_hidden), nn.ReLU(), nn.Linear(d_hidden, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class CrossEncoderLayer(nn.Module):
    """Pre-norm self-attention, cross-attention and feedforward, applied to both sets with shared weights."""

    def __init__(self, config: TransformerConfig):
        super().__init__()
        d = config.d_model
        self.self_norm = nn.LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, config.n_heads)
        self.cross_norm = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, config.n_heads)
        self.ff_norm = nn.LayerNorm(d)
        self.ff = FeedForward(d, config.d_feedforward)

    def forward(self, src: torch.Tensor, tgt: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        s, t = self.self_norm(src), self.self_norm(tgt)
        src = src + self.self_attn(s, s, s)
        tgt = tgt + self.self_attn(t, t, t)

        s, t = self.cross_norm(src), self.cross_norm(tgt)
        src, tgt = src + self.cross_attn(s, t, t), tgt + self.cross_attn(t, s, s)

        src = src + self.ff(self.ff_norm(src))
        tgt = tgt + self.ff(self.ff_norm(tgt))
        return src, tgt


class CorrespondenceEncoder(nn.Module):

    def __init__(self, config: TransformerConfig):
        super().__init__()
        self.config = config
        self.pos_encoding = PositionalEncoding3D(config.d_model, config.pos_frequencies)
        self.layers = nn.ModuleList([CrossEncoderLayer(config) for _ in range(config.n_layers)])
        self.norm = nn.LayerNorm(config.d_model)

    def forward(self, f_src, f_tgt, x_src, x_tgt) -> Tuple[torch.Tensor, torch.Tensor]:
        if f_src.shape[0] == 0 or f_tgt.shape[0] == 0:
            raise InvalidArgumentError("cannot encode an empty point set")
        src = f_src + self.pos_encoding(x_src)
        tgt = f_tgt + self.pos_encoding(x_tgt)
        for layer in self.layers:
            src, tgt = layer(src, tgt)
        return self.norm(src), self.norm(tgt)


class CorrespondenceDecoder(nn.Module):
    """
    Single-head attention from one set into the other with values [coords, features].

    The coordinate head refines the attention-weighted coordinate mean and
    starts close to it; the confidence head ends in a sigmoid.
    """

    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)  # softmax rows are invariant to a key bias
        head_in = 3 + 2 * d_model
        self.coord_head = nn.Sequential(nn.Linear(head_in, d_model), nn.ReLU(), nn.Linear(d_model, 3))
        self.conf_head = nn.Sequential(nn.Linear(head_in, d_model), nn.ReLU(), nn.Linear(d_model, 1))
        nn.init.normal_(self.coord_head[-1].weight, std=1e-3)
        nn.init.zeros_(self.coord_head[-1].bias)

    def attend(self, f_query, f_other, x_other, return_weights: bool = False):
        scores = self.q_proj(f_query) @ self.k_proj(f_other).T / math.sqrt(self.d_model)
        weights = torch.softmax(scores, dim=-1)
        attended = weights @ torch.cat([x_other, f_other], dim=-1)
        head_in = torch.cat([attended, f_query], dim=-1)
        coords = attended[:, :3] + self.coord_head(head_in)
        conf = torch.sigmoid(self.conf_head(head_in)).squeeze(-1)
        return (coords, conf, weights) if return_weights else (coords, conf)

    def forward(self, f_src, f_tgt, x_src, x_tgt) -> CorrespondencePrediction:
        src_pred, src_conf = self.attend(f_src, f_tgt, x_tgt)
        tgt_pred, tgt_conf = self.attend(f_tgt, f_src, x_src)
        return CorrespondencePrediction(x_src, src_pred, src_conf, x_tgt, tgt_pred, tgt_conf, f_src, f_tgt)


def encode(f_src, f_tgt, x_src, x_tgt, encoder: CorrespondenceEncoder):
    return encoder(f_src, f_tgt, x_src, x_tgt)


def decode(f_src, f_tgt, x_src, x_tgt, decoder: CorrespondenceDecoder) -> CorrespondencePrediction:
    return decoder(f_src, f_tgt, x_src, x_tgt)


class RegistrationNetwork(nn.Module):
    """Backbone, encoder and decoder; the same weights serve both blocks of a pair."""

    def __init__(self, config: Optional[RegTrainConfig] = None):
        super().__init__()
        self.config = config or RegTrainConfig()
        tf_config = TransformerConfig.from_reg_config(self.config)
        self.backbone = FPN3D(7, self.config.backbone_widths, self.config.feature_dim)
        self.encoder = CorrespondenceEncoder(tf_config)
        self.decoder = CorrespondenceDecoder(self.config.feature_dim)

    def extract_points(self, sample: VoxelGridSample) -> FeaturePointSet:
        feature_grid = fpn3d(sample, self.backbone)
        points, features = flatten(feature_grid)
        radius = self.config.downsample_radius_voxels * sample.voxel_size
        return spherical_downsample(points, features, radius, self.config.max_points, sample.bbox[:3])

    def forward(self, source: VoxelGridSample, target: VoxelGridSample) -> CorrespondencePrediction:
        src = self.extract_points(source)
        tgt = self.extract_points(target)
        f_src, f_tgt = self.encoder(src.features, tgt.features, src.points, tgt.points)
        return self.decoder(f_src, f_tgt, src.points, tgt.points)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
