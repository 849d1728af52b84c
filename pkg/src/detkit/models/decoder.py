"""Decoder slot: turn a QuerySet plus encoder memory into per-layer hidden
states and box estimates.

Both decoders share the contract: ``forward(queries, memory, flat, box_head)
-> (hidden per layer, boxes per layer)``. The box head is owned by the
detector and passed in because layer-wise anchor refinement needs box deltas
mid-forward.
"""

from __future__ import annotations

import torch
from torch import nn

from detkit.models.attention import ConditionalCrossAttention, MultiheadAttention, MultiScaleDeformableAttention
from detkit.models.common import inverse_sigmoid, iterative_box_refine
from detkit.models.encoder import FlatTokens
from detkit.models.position import AnchorQueryEmbedding
from detkit.models.queries import QuerySet

__all__ = ["DenseTransformerDecoder", "DeformableTransformerDecoder"]


class _FFN(nn.Module):
    def __init__(self, dim: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, ffn_dim), nn.ReLU(inplace=True), nn.Dropout(dropout), nn.Linear(ffn_dim, dim)
        )
        self.norm = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.norm(x + self.dropout(self.net(x)))


class _DenseDecoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, ffn_dim: int, dropout: float, conditional: bool):
        super().__init__()
        self.self_attn = MultiheadAttention(dim, num_heads, dropout=dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.conditional = conditional
        if conditional:
            self.cross_attn = ConditionalCrossAttention(dim, num_heads, dropout=dropout)
        else:
            self.cross_attn = MultiheadAttention(dim, num_heads, dropout=dropout)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = _FFN(dim, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, hidden, query_pos, memory, memory_pos, self_attn_mask, memory_padding_mask):
        q = k = hidden + query_pos
        attended = self.self_attn(q, k, hidden, attn_mask=self_attn_mask)
        hidden = self.norm1(hidden + self.dropout(attended))
        if self.conditional:
            attended = self.cross_attn(
                hidden, query_pos, memory, memory_pos, key_padding_mask=memory_padding_mask
            )
        else:
            attended = self.cross_attn(
                hidden + query_pos, memory + memory_pos, memory, key_padding_mask=memory_padding_mask
            )
        hidden = self.norm2(hidden + self.dropout(attended))
        return self.ffn(hidden)


class DenseTransformerDecoder(nn.Module):
    """Full cross-attention decoder. Positional queries come from an explicit
    embedding (``QuerySet.pos``) or, when the query set carries anchors, from
    a sinusoid-and-project embedding of the boxes, recomputed per layer when
    ``refine_anchors`` walks them."""

    def __init__(
        self,
        dim: int = 256,
        num_layers: int = 6,
        num_heads: int = 8,
        ffn_dim: int = 2048,
        dropout: float = 0.0,
        conditional: bool = False,
        refine_anchors: bool = False,
        look_forward_twice: bool = False,
    ):
        super().__init__()
        if look_forward_twice:
            raise NotImplementedError("look_forward_twice is reserved and not implemented")
        self.layers = nn.ModuleList(
            _DenseDecoderLayer(dim, num_heads, ffn_dim, dropout, conditional) for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(dim)
        self.anchor_embed = AnchorQueryEmbedding(dim)
        self.refine_anchors = refine_anchors
        self.dim = dim

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def forward(
        self,
        queries: QuerySet,
        memory: torch.Tensor,
        flat: FlatTokens,
        box_head: nn.Module,
    ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        hidden = queries.content
        anchors = queries.anchors
        if anchors is None and queries.pos is None:
            raise ValueError("query set needs anchors or an explicit positional embedding")
        if self.refine_anchors and anchors is None:
            raise ValueError("anchor refinement requires anchor queries")
        hidden_states: list[torch.Tensor] = []
        boxes: list[torch.Tensor] = []
        for layer in self.layers:
            if anchors is not None:
                query_pos = self.anchor_embed(anchors)
            else:
                query_pos = queries.pos
            hidden = layer(
                hidden, query_pos, memory, flat.positions, queries.self_attn_mask, flat.padding_mask
            )
            normed = self.norm(hidden)
            hidden_states.append(normed)
            if anchors is not None:
                layer_boxes = iterative_box_refine(anchors.detach(), box_head(normed))
                if self.refine_anchors:
                    anchors = layer_boxes.detach()
            else:
                layer_boxes = box_head(normed).sigmoid()
            boxes.append(layer_boxes)
        return hidden_states, boxes


class _DeformableDecoderLayer(nn.Module):
    def __init__(self, dim: int, num_heads: int, num_levels: int, num_points: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.self_attn = MultiheadAttention(dim, num_heads, dropout=dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_attn = MultiScaleDeformableAttention(dim, num_heads, num_levels, num_points)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = _FFN(dim, ffn_dim, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, hidden, query_pos, reference_points, memory, spatial_shapes, self_attn_mask, memory_padding_mask):
        q = k = hidden + query_pos
        attended = self.self_attn(q, k, hidden, attn_mask=self_attn_mask)
        hidden = self.norm1(hidden + self.dropout(attended))
        attended = self.cross_attn(
            hidden + query_pos, reference_points, memory, spatial_shapes, key_padding_mask=memory_padding_mask
        )
        hidden = self.norm2(hidden + self.dropout(attended))
        return self.ffn(hidden)


class DeformableTransformerDecoder(nn.Module):
    """Deformable cross-attention decoder. Sampling references are the query
    anchors (4-dim: offsets scale with box size) or their centers (2-dim).

    query_pos_mode selects where positional queries come from:
      "anchor": sinusoid-and-project of the current anchor boxes,
      "learned": the QuerySet's embedding; initial center references are
                  then predicted from it by a small linear head.
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
        ref_dim: int = 4,
        query_pos_mode: str = "anchor",
        refine_anchors: bool = True,
        look_forward_twice: bool = False,
    ):
        super().__init__()
        if look_forward_twice:
            raise NotImplementedError("look_forward_twice is reserved and not implemented")
        if ref_dim not in (2, 4):
            raise ValueError(f"ref_dim must be 2 or 4, got {ref_dim}")
        if query_pos_mode not in ("anchor", "learned"):
            raise ValueError(f"unknown query_pos_mode {query_pos_mode!r}")
        self.layers = nn.ModuleList(
            _DeformableDecoderLayer(dim, num_heads, num_levels, num_points, ffn_dim, dropout)
            for _ in range(num_layers)
        )
        self.norm = nn.LayerNorm(dim)
        self.ref_dim = ref_dim
        self.query_pos_mode = query_pos_mode
        self.refine_anchors = refine_anchors
        self.dim = dim
        if query_pos_mode == "anchor":
            self.anchor_embed = AnchorQueryEmbedding(dim)
        else:
            self.reference_points = nn.Linear(dim, 2)
            nn.init.xavier_uniform_(self.reference_points.weight, gain=1.0)
            nn.init.constant_(self.reference_points.bias, 0.0)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def forward(
        self,
        queries: QuerySet,
        memory: torch.Tensor,
        flat: FlatTokens,
        box_head: nn.Module,
    ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        hidden = queries.content
        box_state = queries.anchors  # full cxcywh when available
        centers = None
        if box_state is None:
            if self.query_pos_mode != "learned" or queries.pos is None:
                raise ValueError("query set has no anchors and no positional embedding to derive references from")
            centers = self.reference_points(queries.pos).sigmoid()
        ratios = flat.valid_ratios
        hidden_states: list[torch.Tensor] = []
        boxes: list[torch.Tensor] = []
        for layer in self.layers:
            if box_state is not None:
                reference = box_state if self.ref_dim == 4 else box_state[..., :2]
            else:
                reference = centers
            if reference.shape[-1] == 4:
                reference_input = reference[:, :, None] * torch.cat([ratios, ratios], dim=-1)[:, None]
            else:
                reference_input = reference[:, :, None] * ratios[:, None]
            if self.query_pos_mode == "anchor":
                query_pos = self.anchor_embed(box_state)
            else:
                query_pos = queries.pos
            hidden = layer(
                hidden, query_pos, reference_input, memory, flat.spatial_shapes,
                queries.self_attn_mask, flat.padding_mask,
            )
            normed = self.norm(hidden)
            hidden_states.append(normed)
            deltas = box_head(normed)
            if box_state is not None:
                layer_boxes = iterative_box_refine(box_state.detach(), deltas)
                if self.refine_anchors:
                    box_state = layer_boxes.detach()
            else:
                center_logits = deltas[..., :2] + inverse_sigmoid(centers.detach())
                layer_boxes = torch.cat([center_logits, deltas[..., 2:]], dim=-1).sigmoid()
                if self.refine_anchors:
                    centers = layer_boxes[..., :2].detach()
            boxes.append(layer_boxes)
        return hidden_states, boxes
