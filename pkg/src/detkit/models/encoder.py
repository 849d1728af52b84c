"""Encoder slot: refine flattened multi-scale tokens.

``flatten_pyramid`` turns a FeaturePyramid into the token-domain view shared
by encoders, query initializers and decoders. Encoders map FlatTokens ->
refined token tensor of the same shape; they never change sequence length.
"""

from __future__ import annotations

import dataclasses

import torch
import torch.utils.checkpoint
from torch import nn

from detkit.models.attention import MultiheadAttention, MultiScaleDeformableAttention
from detkit.models.backbones import FeaturePyramid
from detkit.models.position import sinusoidal_position_embedding

__all__ = [
    "FlatTokens",
    "flatten_pyramid",
    "grid_reference_points",
    "DenseTransformerEncoder",
    "DeformableTransformerEncoder",
]


@dataclasses.dataclass
class FlatTokens:
    """Level-concatenated token view of a feature pyramid.

    tokens            (B, T, D) with T = sum of H_l * W_l
    padding_mask      (B, T) True where padded
    positions         (B, T, D) sinusoidal embeddings, per level
    spatial_shapes    (L, 2) [H_l, W_l] rows
    level_start_index (L,) offset of each level's first token
    valid_ratios      (B, L, 2) unpadded fraction per level, (w, h) order
    level_index       (T,) level id of every token
    """

    tokens: torch.Tensor
    padding_mask: torch.Tensor
    positions: torch.Tensor
    spatial_shapes: torch.Tensor
    level_start_index: torch.Tensor
    valid_ratios: torch.Tensor
    level_index: torch.Tensor

    @property
    def num_levels(self) -> int:
        return int(self.spatial_shapes.shape[0])


def _valid_ratio(mask: torch.Tensor) -> torch.Tensor:
    """Unpadded fraction of a (B, H, W) mask in (w, h) order.

    Masks produced by batching pad on the bottom/right, so the first row and
    column witness the full valid extent.
    """
    _, h, w = mask.shape
    valid_h = (~mask[:, :, 0]).sum(1).float()
    valid_w = (~mask[:, 0, :]).sum(1).float()
    return torch.stack([valid_w / w, valid_h / h], dim=-1)


def flatten_pyramid(pyramid: FeaturePyramid, embed_dim: int | None = None) -> FlatTokens:
    tokens, masks, positions, shapes, level_ids, ratios = [], [], [], [], [], []
    for level, ((feat, _), mask) in enumerate(zip(pyramid.levels, pyramid.padding_masks)):
        b, d, h, w = feat.shape
        if embed_dim is not None and d != embed_dim:
            raise ValueError(f"level {level} has {d} channels, expected {embed_dim}")
        tokens.append(feat.flatten(2).transpose(1, 2))
        masks.append(mask.flatten(1))
        positions.append(sinusoidal_position_embedding(mask, d).flatten(1, 2))
        shapes.append((h, w))
        level_ids.append(torch.full((h * w,), level, dtype=torch.long))
        ratios.append(_valid_ratio(mask))
    spatial_shapes = torch.as_tensor(shapes, dtype=torch.long)
    start_index = torch.cat(
        [spatial_shapes.new_zeros(1), spatial_shapes.prod(1).cumsum(0)[:-1]]
    )
    return FlatTokens(
        tokens=torch.cat(tokens, dim=1),
        padding_mask=torch.cat(masks, dim=1),
        positions=torch.cat(positions, dim=1),
        spatial_shapes=spatial_shapes,
        level_start_index=start_index,
        valid_ratios=torch.stack(ratios, dim=1),
        level_index=torch.cat(level_ids),
    )


def grid_reference_points(spatial_shapes: torch.Tensor, valid_ratios: torch.Tensor) -> torch.Tensor:
    """Normalized cell-center reference points for every token at every level.

    Returns (B, T, L, 2) in (x, y) order: each token's own center (in its home
    level, rescaled to the valid region) broadcast across all sampling levels
    via the per-level valid ratios.
    """
    points = []
    for level, (h, w) in enumerate(spatial_shapes.tolist()):
        ys, xs = torch.meshgrid(
            torch.linspace(0.5, h - 0.5, h),
            torch.linspace(0.5, w - 0.5, w),
            indexing="ij",
        )
        # normalize by the valid extent of this token's home level
        ref_x = xs.reshape(-1)[None] / (valid_ratios[:, None, level, 0] * w)
        ref_y = ys.reshape(-1)[None] / (valid_ratios[:, None, level, 1] * h)
        points.append(torch.stack([ref_x, ref_y], dim=-1))
    reference = torch.cat(points, dim=1)  # (B, T, 2)
    return reference[:, :, None] * valid_ratios[:, None]


class _DenseEncoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_attn = MultiheadAttention(dim, num_heads, dropout=dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Dropout(dropout), nn.Linear(ffn_dim, dim)
        )
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, tokens, positions, padding_mask):
        q = k = tokens + positions
        tokens = self.norm1(tokens + self.dropout(self.self_attn(q, k, tokens, key_padding_mask=padding_mask)))
        return self.norm2(tokens + self.dropout(self.ffn(tokens)))


class DenseTransformerEncoder(nn.Module):
    """Full self-attention over all tokens; positions enter queries and keys
    only, values stay content-pure."""

    def __init__(self, dim: int = 256, num_layers: int = 6, num_heads: int = 8, ffn_dim: int = 2048, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(_DenseEncoderLayer(dim, num_heads, ffn_dim, dropout) for _ in range(num_layers))
        self.dim = dim

    def forward(self, flat: FlatTokens) -> torch.Tensor:
        tokens = flat.tokens
        for layer in self.layers:
            tokens = layer(tokens, flat.positions, flat.padding_mask)
        return tokens


class _DeformableEncoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, num_levels: int, num_points: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_attn = MultiScaleDeformableAttention(dim, num_heads, num_levels, num_points)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Dropout(dropout), nn.Linear(ffn_dim, dim)
        )
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, tokens, positions, reference_points, spatial_shapes, padding_mask):
        attended = self.self_attn(
            tokens + positions, reference_points, tokens, spatial_shapes, key_padding_mask=padding_mask
        )
        tokens = self.norm1(tokens + self.dropout(attended))
        return self.norm2(tokens + self.dropout(self.ffn(tokens)))


class DeformableTransformerEncoder(nn.Module):
    """Each token attends to a few sampled points per level around its own
    grid location. Cost is linear in token count. Learned level embeddings
    disambiguate tokens that share spatial positions across levels.
    """

    def __init__(
        self,
        dim: int = 256,
        num_layers: int = 6,
        num_heads: int = 8,
        num_levels: int = 4,
        num_points: int = 4,
        ffn_dim: int = 2048,
        dropout: float = 0.0,
        grad_checkpoint: bool = False,
    ):
        super().__init__()
        self.layers = nn.ModuleList(
            _DeformableEncoderLayer(dim, num_heads, num_levels, num_points, ffn_dim, dropout)
            for _ in range(num_layers)
        )
        self.level_embed = nn.Parameter(torch.zeros(num_levels, dim))
        nn.init.normal_(self.level_embed)
        self.num_levels = num_levels
        self.grad_checkpoint = grad_checkpoint
        self.dim = dim

    def forward(self, flat: FlatTokens) -> torch.Tensor:
        if flat.num_levels != self.num_levels:
            raise ValueError(f"encoder built for {self.num_levels} levels, got {flat.num_levels}")
        positions = flat.positions + self.level_embed[flat.level_index]
        reference = grid_reference_points(flat.spatial_shapes, flat.valid_ratios)
        tokens = flat.tokens
        for layer in self.layers:
            if self.grad_checkpoint and self.training:
                tokens = torch.utils.checkpoint.checkpoint(
                    layer, tokens, positions, reference, flat.spatial_shapes, flat.padding_mask,
                    use_reentrant=False,
                )
            else:
                tokens = layer(tokens, positions, reference, flat.spatial_shapes, flat.padding_mask)
        return tokens
