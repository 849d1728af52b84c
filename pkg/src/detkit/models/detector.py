"""The assembled detector: Backbone -> projection -> Encoder -> Query Init ->
Decoder, with shared class/box heads applied to every decoder layer.

Slots are plain modules satisfying small call contracts, so any conforming
implementation composes here without code changes. Component errors are
re-raised with the failing slot's name attached.
"""

from __future__ import annotations

import dataclasses
import math

import torch
from torch import nn

from detkit.models.common import MLP
from detkit.models.denoising import DnMeta, build_denoising_groups
from detkit.models.encoder import FlatTokens, flatten_pyramid
from detkit.models.queries import EncoderContext, EncoderProposals, QuerySet

__all__ = [
    "Detector",
    "DetectionOutput",
    "DnOutputs",
    "DenoisingConfig",
    "SlotExecutionError",
    "parameter_components",
]


class SlotExecutionError(RuntimeError):
    """A slot failed; carries the slot name alongside the original error."""

    def __init__(self, slot: str, original: BaseException):
        super().__init__(f"slot {slot!r} failed: {type(original).__name__}: {original}")
        self.slot = slot
        self.original = original


@dataclasses.dataclass
class DnOutputs:
    """Per-layer (logits, boxes) restricted to the denoising queries, plus
    the reconstruction metadata the criterion needs."""

    per_layer: list[tuple[torch.Tensor, torch.Tensor]]
    meta: DnMeta


@dataclasses.dataclass
class DetectionOutput:
    """per_layer holds one (logits (B,Q,C), boxes (B,Q,4) cxcywh in [0,1])
    pair per decoder layer, matching queries only; the last entry is the
    model's prediction."""

    per_layer: list[tuple[torch.Tensor, torch.Tensor]]
    encoder_proposals: EncoderProposals | None = None
    dn_outputs: DnOutputs | None = None

    @property
    def logits(self) -> torch.Tensor:
        return self.per_layer[-1][0]

    @property
    def boxes(self) -> torch.Tensor:
        return self.per_layer[-1][1]


@dataclasses.dataclass
class DenoisingConfig:
    num_groups: int = 5
    label_noise_ratio: float = 0.5
    box_noise_scale: float = 0.4
    contrastive: bool = False


class Detector(nn.Module):
    """Composes the slots and owns the shared heads. ``projector`` maps the
    backbone pyramid to the embedding width (pass None when the backbone
    already emits ``dim`` channels)."""

    def __init__(
        self,
        backbone: nn.Module,
        encoder: nn.Module,
        query_init: nn.Module,
        decoder: nn.Module,
        num_classes: int,
        dim: int = 256,
        projector: nn.Module | None = None,
        denoising: DenoisingConfig | None = None,
    ):
        super().__init__()
        self.backbone = backbone
        self.projector = projector
        self.encoder = encoder
        self.query_init = query_init
        self.decoder = decoder
        self.num_classes = num_classes
        self.dim = dim
        self.class_head = nn.Linear(dim, num_classes)
        nn.init.constant_(self.class_head.bias, -math.log((1 - 0.01) / 0.01))
        self.box_head = MLP(dim, dim, 4, 3)
        nn.init.constant_(self.box_head.layers[-1].weight, 0.0)
        nn.init.constant_(self.box_head.layers[-1].bias, 0.0)
        self.denoising = denoising
        if denoising is not None:
            self.dn_label_embed = nn.Embedding(num_classes + 1, dim)

    @staticmethod
    def _run(slot: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SlotExecutionError:
            raise
        except Exception as exc:
            raise SlotExecutionError(slot, exc) from exc

    def _attach_denoising(self, queries: QuerySet, targets: list[dict]) -> tuple[QuerySet, DnMeta | None]:
        dn = build_denoising_groups(
            [t["labels"] for t in targets],
            [t["boxes"] for t in targets],
            num_groups=self.denoising.num_groups,
            label_noise_ratio=self.denoising.label_noise_ratio,
            box_noise_scale=self.denoising.box_noise_scale,
            num_classes=self.num_classes,
            contrastive=self.denoising.contrastive,
        )
        if dn is None:
            return queries, None
        if queries.anchors is None:
            raise ValueError("denoising requires anchor-based queries")
        content = torch.cat([self.dn_label_embed(dn.input_labels), queries.content], dim=1)
        anchors = torch.cat([dn.input_boxes, queries.anchors], dim=1)
        mask = dn.attention_mask(queries.num_queries)
        return QuerySet(content=content, anchors=anchors, dn=dn.meta, self_attn_mask=mask), dn.meta

    def forward(
        self,
        images: torch.Tensor,
        padding_mask: torch.Tensor | None = None,
        targets: list[dict] | None = None,
    ) -> DetectionOutput:
        if padding_mask is None:
            padding_mask = images.new_zeros(images.shape[0], *images.shape[-2:], dtype=torch.bool)
        pyramid = self._run("backbone", self.backbone, images, padding_mask)
        if self.projector is not None:
            pyramid = self._run("projector", self.projector, pyramid)
        flat = flatten_pyramid(pyramid, embed_dim=self.dim)
        memory = self._run("encoder", self.encoder, flat)
        ctx = EncoderContext(memory=memory, flat=flat)
        queries, proposals = self._run("query_init", self.query_init, ctx)

        dn_meta = None
        if self.training and self.denoising is not None and targets is not None:
            queries, dn_meta = self._run("denoising", self._attach_denoising, queries, targets)

        hidden_states, boxes = self._run("decoder", self.decoder, queries, memory, flat, self.box_head)
        per_layer = [(self.class_head(h), b) for h, b in zip(hidden_states, boxes)]

        dn_outputs = None
        if dn_meta is not None:
            split = dn_meta.num_queries
            dn_outputs = DnOutputs(
                per_layer=[(lg[:, :split], bx[:, :split]) for lg, bx in per_layer],
                meta=dn_meta,
            )
            per_layer = [(lg[:, split:], bx[:, split:]) for lg, bx in per_layer]

        return DetectionOutput(per_layer=per_layer, encoder_proposals=proposals, dn_outputs=dn_outputs)


def parameter_components(model: nn.Module) -> dict[str, str]:
    """Map every named parameter to its learning-rate component:

    backbone: anything under the backbone slot
    offsets_refpoints: deformable sampling offsets and reference-point heads
    encdec: everything else (encoder/decoder/heads/queries)
    """
    components = {}
    for name, _ in model.named_parameters():
        if name.startswith("backbone."):
            components[name] = "backbone"
        elif "sampling_offsets" in name or "reference_points" in name:
            components[name] = "offsets_refpoints"
        else:
            components[name] = "encdec"
    return components
