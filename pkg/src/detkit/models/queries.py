"""Query-init slot: produce the decoder's initial query set.

Two families: learned queries (optionally as explicit anchor boxes) and
two-stage selection, where encoder tokens score themselves and the top-k
proposals seed the decoder.
"""

from __future__ import annotations

import dataclasses
import math
import typing

import torch
from torch import nn

from detkit.models.common import MLP, inverse_sigmoid
from detkit.models.encoder import FlatTokens

if typing.TYPE_CHECKING:
    from detkit.models.denoising import DnMeta

__all__ = [
    "QuerySet",
    "EncoderContext",
    "EncoderProposals",
    "LearnedQueryInit",
    "TwoStageQueryInit",
    "make_token_proposals",
    "two_stage_select",
    "KTooLargeError",
]


class KTooLargeError(ValueError):
    """more proposals requested than tokens available."""


@dataclasses.dataclass
class QuerySet:
    """Decoder input. ``anchors`` are normalized cxcywh boxes when the decoder
    derives positional information from geometry; ``pos`` is an explicit
    positional embedding otherwise. Denoising queries, when present, occupy
    the leading positions and ``self_attn_mask`` (True = blocked) keeps their
    groups from leaking into each other or into the matching queries."""

    content: torch.Tensor
    anchors: torch.Tensor | None = None
    pos: torch.Tensor | None = None
    dn: "DnMeta | None" = None
    self_attn_mask: torch.Tensor | None = None

    @property
    def num_queries(self) -> int:
        return int(self.content.shape[1])

    @property
    def num_denoising(self) -> int:
        return 0 if self.dn is None else self.dn.num_queries

    @property
    def num_matching(self) -> int:
        return self.num_queries - self.num_denoising


@dataclasses.dataclass
class EncoderContext:
    """What query initializers see: refined memory plus the flat-token view."""

    memory: torch.Tensor
    flat: FlatTokens


@dataclasses.dataclass
class EncoderProposals:
    """Scored proposals kept for the auxiliary encoder loss (grads flow back
    into the memory; the decoder receives only detached anchors)."""

    logits: torch.Tensor
    boxes: torch.Tensor


class LearnedQueryInit(nn.Module):
    """Input-independent queries. With ``use_anchors`` the positional half is
    a learnable normalized box per query; otherwise it is a free embedding.
    ``learned_content`` zeroes or learns the content half."""

    def __init__(self, num_queries: int = 300, dim: int = 256, use_anchors: bool = False, learned_content: bool = True):
        super().__init__()
        self.num_queries = num_queries
        self.dim = dim
        self.use_anchors = use_anchors
        self.learned_content = learned_content
        if learned_content:
            self.content_embed = nn.Embedding(num_queries, dim)
        if use_anchors:
            self.anchor_logits = nn.Parameter(torch.empty(num_queries, 4))
            nn.init.uniform_(self.anchor_logits, -2.0, 2.0)
        else:
            self.pos_embed = nn.Embedding(num_queries, dim)

    def forward(self, ctx: EncoderContext) -> tuple[QuerySet, EncoderProposals | None]:
        batch = ctx.memory.shape[0]
        if self.learned_content:
            content = self.content_embed.weight[None].expand(batch, -1, -1)
        else:
            content = ctx.memory.new_zeros(batch, self.num_queries, self.dim)
        if self.use_anchors:
            anchors = self.anchor_logits.sigmoid()[None].expand(batch, -1, -1)
            return QuerySet(content=content, anchors=anchors), None
        pos = self.pos_embed.weight[None].expand(batch, -1, -1)
        return QuerySet(content=content, pos=pos), None


def make_token_proposals(flat: FlatTokens, base_scale: float = 0.05) -> tuple[torch.Tensor, torch.Tensor]:
    """One candidate box per token: centered on the token's grid cell with
    width and height ``base_scale * 2**level``, in normalized cxcywh.

    Returns ``(proposals (B, T, 4), valid (B, T))``. A proposal is valid when
    its token is unpadded and the box sits comfortably inside the unit square
    (sigmoid-space refinement saturates near 0 and 1).
    """
    boxes, valid = [], []
    padding = flat.padding_mask
    for level, (h, w) in enumerate(flat.spatial_shapes.tolist()):
        start = int(flat.level_start_index[level])
        mask = padding[:, start : start + h * w].reshape(-1, h, w)
        ys, xs = torch.meshgrid(
            torch.linspace(0.5, h - 0.5, h), torch.linspace(0.5, w - 0.5, w), indexing="ij"
        )
        valid_wh = flat.valid_ratios[:, level] * torch.tensor([w, h], dtype=torch.float32)
        cx = xs.reshape(-1)[None] / valid_wh[:, None, 0]
        cy = ys.reshape(-1)[None] / valid_wh[:, None, 1]
        wh = torch.full_like(cx, base_scale * 2.0**level)
        boxes.append(torch.stack([cx, cy, wh, wh], dim=-1))
        valid.append(~mask.flatten(1))
    proposals = torch.cat(boxes, dim=1)
    inside = ((proposals > 0.01) & (proposals < 0.99)).all(-1)
    return proposals, torch.cat(valid, dim=1) & inside


def two_stage_select(scores: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k best proposals per image, score-descending with
    index-ascending tie-break. Raises KTooLargeError when k exceeds the
    proposal count."""
    if k > scores.shape[1]:
        raise KTooLargeError(f"k={k} but only {scores.shape[1]} proposals")
    order = torch.argsort(-scores, dim=1, stable=True)
    return order[:, :k]


class TwoStageQueryInit(nn.Module):
    """Encoder tokens propose boxes; the top-k seed the decoder. Anchors come
    from the refined proposals (detached); content either from the selected
    memory features or, with ``learned_content``, from a shared embedding."""

    def __init__(self, dim: int = 256, num_queries: int = 300, num_classes: int = 80, learned_content: bool = False):
        super().__init__()
        self.num_queries = num_queries
        self.num_classes = num_classes
        self.learned_content = learned_content
        self.memory_proj = nn.Linear(dim, dim)
        self.memory_norm = nn.LayerNorm(dim)
        self.class_head = nn.Linear(dim, num_classes)
        self.box_head = MLP(dim, dim, 4, 3)
        if learned_content:
            self.content_embed = nn.Embedding(num_queries, dim)
        else:
            self.content_proj = nn.Linear(dim, dim)
            self.content_norm = nn.LayerNorm(dim)
        bias = -math.log((1 - 0.01) / 0.01)
        nn.init.constant_(self.class_head.bias, bias)

    def forward(self, ctx: EncoderContext) -> tuple[QuerySet, EncoderProposals]:
        proposals, valid = make_token_proposals(ctx.flat)
        memory = ctx.memory.masked_fill(~valid[..., None], 0.0)
        memory = self.memory_norm(self.memory_proj(memory))
        logits = self.class_head(memory)
        deltas = self.box_head(memory)
        refined = (inverse_sigmoid(proposals) + deltas).sigmoid()
        scores = logits.max(-1).values.masked_fill(~valid, float("-inf"))
        top = two_stage_select(scores, self.num_queries)
        gather4 = top[..., None].expand(-1, -1, 4)
        top_boxes = refined.gather(1, gather4)
        top_logits = logits.gather(1, top[..., None].expand(-1, -1, self.num_classes))
        anchors = top_boxes.detach()
        if self.learned_content:
            content = self.content_embed.weight[None].expand(top.shape[0], -1, -1)
        else:
            picked = memory.gather(1, top[..., None].expand(-1, -1, memory.shape[-1]))
            content = self.content_norm(self.content_proj(picked.detach()))
        return (
            QuerySet(content=content, anchors=anchors),
            EncoderProposals(logits=top_logits, boxes=top_boxes),
        )
