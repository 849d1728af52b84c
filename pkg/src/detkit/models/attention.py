"""Attention variants used by the encoder/decoder slots.

Both modules project q/k/v through explicit Linear layers so the analytic
FLOPs counter can attribute the projection cost to the children and add the
attention-specific matmul/sampling cost through per-type rules.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from detkit.geometry import ShapeMismatchError

__all__ = ["MultiheadAttention", "ConditionalCrossAttention", "MultiScaleDeformableAttention"]


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    b, l, d = x.shape
    return x.view(b, l, num_heads, d // num_heads).transpose(1, 2)  # (B, H, L, hd)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, l, hd = x.shape
    return x.transpose(1, 2).reshape(b, l, h * hd)


def _masked_softmax(scores, key_padding_mask, attn_mask):
    # scores (B, H, Lq, Lk); masks use True = blocked/padded
    if key_padding_mask is not None:
        scores = scores.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
    if attn_mask is not None:
        scores = scores.masked_fill(attn_mask[None, None], float("-inf"))
    return scores.softmax(dim=-1)


class MultiheadAttention(nn.Module):
    """Plain multi-head scaled dot-product attention with padding/attn masks."""

    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % num_heads != 0:
            raise ShapeMismatchError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, key_padding_mask=None, attn_mask=None):
        q = _split_heads(self.q_proj(query), self.num_heads)
        k = _split_heads(self.k_proj(key), self.num_heads)
        v = _split_heads(self.v_proj(value), self.num_heads)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        attn = self.dropout(_masked_softmax(scores, key_padding_mask, attn_mask))
        return self.out_proj(_merge_heads(attn @ v))


class ConditionalCrossAttention(nn.Module):
    """Cross-attention with decoupled content and positional query/key streams.

    Content and positional projections are concatenated per head, so spatial
    agreement and appearance agreement contribute separate dot-product terms.
    """

    def __init__(self, dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % num_heads != 0:
            raise ShapeMismatchError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.q_content = nn.Linear(dim, dim)
        self.q_pos = nn.Linear(dim, dim)
        self.k_content = nn.Linear(dim, dim)
        self.k_pos = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, content_query, pos_query, memory, memory_pos, key_padding_mask=None):
        heads = self.num_heads
        q = torch.cat(
            [_split_heads(self.q_content(content_query), heads), _split_heads(self.q_pos(pos_query), heads)],
            dim=-1,
        )
        k = torch.cat(
            [_split_heads(self.k_content(memory), heads), _split_heads(self.k_pos(memory_pos), heads)],
            dim=-1,
        )
        v = _split_heads(self.v_proj(memory), heads)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        attn = self.dropout(_masked_softmax(scores, key_padding_mask, None))
        return self.out_proj(_merge_heads(attn @ v))


def deformable_sample(value, spatial_shapes, sampling_locations, attention_weights):
    """Bilinear multi-level sampling with attention-weighted reduction.

    Args:
        value: (B, V, H, hd) per-head value tokens (V = sum of level areas).
        spatial_shapes: (L, 2) long, per-level (height, width).
        sampling_locations: (B, Q, H, L, P, 2) in [0, 1] (x, y).
        attention_weights: (B, Q, H, L, P), normalized over L*P.

    Returns:
        (B, Q, H * hd).
    """
    b, _, num_heads, head_dim = value.shape
    _, q, _, num_levels, num_points, _ = sampling_locations.shape
    areas = [int(h) * int(w) for h, w in spatial_shapes.tolist()]
    value_list = value.split(areas, dim=1)
    # grid_sample with align_corners=False maps [0,1] so that (i+0.5)/W hits pixel i exactly
    grids = 2 * sampling_locations - 1
    sampled = []
    for level, (h, w) in enumerate(spatial_shapes.tolist()):
        v = value_list[level].flatten(2).transpose(1, 2).reshape(b * num_heads, head_dim, int(h), int(w))
        grid = grids[:, :, :, level].transpose(1, 2).flatten(0, 1)  # (B*H, Q, P, 2)
        sampled.append(
            F.grid_sample(v, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        )  # (B*H, hd, Q, P)
    weights = attention_weights.transpose(1, 2).reshape(b * num_heads, 1, q, num_levels * num_points)
    stacked = torch.stack(sampled, dim=-2).flatten(-2)  # (B*H, hd, Q, L*P)
    out = (stacked * weights).sum(-1)  # (B*H, hd, Q)
    return out.view(b, num_heads * head_dim, q).transpose(1, 2)


class MultiScaleDeformableAttention(nn.Module):
    """Deformable attention: sample a few offset points per level instead of
    attending densely.

    Sampling offsets and attention weights are linear functions of the query;
    weights softmax-normalize across (levels x points) per head. With 4-dim
    reference boxes the offsets are scaled by the box size, with 2-dim
    reference points by the level resolution.
    """

    def __init__(self, dim: int, num_heads: int = 8, num_levels: int = 4, num_points: int = 4):
        super().__init__()
        if dim % num_heads != 0:
            raise ShapeMismatchError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.sampling_offsets = nn.Linear(dim, num_heads * num_levels * num_points * 2)
        self.attention_weights = nn.Linear(dim, num_heads * num_levels * num_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self._reset_parameters()

    def _reset_parameters(self):
        nn.init.constant_(self.sampling_offsets.weight, 0.0)
        # spread initial sampling points on a small per-head compass rose
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (2 * math.pi / self.num_heads)
        grid = torch.stack([thetas.cos(), thetas.sin()], dim=-1)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid.view(self.num_heads, 1, 1, 2).repeat(1, self.num_levels, self.num_points, 1)
        for p in range(self.num_points):
            grid[:, :, p] *= p + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.constant_(self.attention_weights.weight, 0.0)
        nn.init.constant_(self.attention_weights.bias, 0.0)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.constant_(self.value_proj.bias, 0.0)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.constant_(self.output_proj.bias, 0.0)

    def sampling_parameters(
        self, query: torch.Tensor, reference_points: torch.Tensor, spatial_shapes: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalized sampling locations (B, Q, H, L, P, 2) and attention
        weights (B, Q, H, L, P) softmaxed across levels x points."""
        b, q, _ = query.shape
        heads, levels, points = self.num_heads, self.num_levels, self.num_points
        if reference_points.shape[-2] != levels:
            raise ShapeMismatchError(
                f"reference points carry {reference_points.shape[-2]} levels; module has {levels}"
            )
        offsets = self.sampling_offsets(query).view(b, q, heads, levels, points, 2)
        weights = self.attention_weights(query).view(b, q, heads, levels * points)
        weights = weights.softmax(dim=-1).view(b, q, heads, levels, points)

        if reference_points.shape[-1] == 2:
            # offsets measured in pixels of each level
            normalizer = torch.stack([spatial_shapes[:, 1], spatial_shapes[:, 0]], dim=-1).to(query.dtype)
            locations = (
                reference_points[:, :, None, :, None, :]
                + offsets / normalizer[None, None, None, :, None, :]
            )
        elif reference_points.shape[-1] == 4:
            # offsets measured in fractions of the reference box size
            centers = reference_points[:, :, None, :, None, :2]
            sizes = reference_points[:, :, None, :, None, 2:]
            locations = centers + offsets / points * sizes * 0.5
        else:
            raise ShapeMismatchError(
                f"reference points must be 2- or 4-dim; got {reference_points.shape[-1]}"
            )
        return locations, weights

    def forward(
        self,
        query: torch.Tensor,
        reference_points: torch.Tensor,
        value: torch.Tensor,
        spatial_shapes: torch.Tensor,
        key_padding_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Args:
            query: (B, Q, D).
            reference_points: (B, Q, L, 2) or (B, Q, L, 4), normalized to [0, 1].
            value: (B, V, D) flattened multi-level tokens.
            spatial_shapes: (L, 2) long (height, width) per level.
            key_padding_mask: (B, V) bool, True = padded.
        """
        b = query.shape[0]
        if int(spatial_shapes.prod(dim=-1).sum()) != value.shape[1]:
            raise ShapeMismatchError("value length does not match spatial_shapes")

        v = self.value_proj(value)
        if key_padding_mask is not None:
            v = v.masked_fill(key_padding_mask[..., None], 0.0)
        v = v.view(b, -1, self.num_heads, self.dim // self.num_heads)

        locations, weights = self.sampling_parameters(query, reference_points, spatial_shapes)
        out = deformable_sample(v, spatial_shapes, locations, weights)
        return self.output_proj(out)
