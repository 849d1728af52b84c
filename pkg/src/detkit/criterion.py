"""The Loss slot: Hungarian-matched set criterion with focal classification,
L1 + GIoU box terms, per-layer auxiliary supervision, and denoising
reconstruction losses that bypass the matcher (their assignment is known)."""

from __future__ import annotations

import dataclasses

import torch
import torch.nn.functional as F
from torch import nn

from detkit.geometry import (
    BoxArray,
    BoxFormat,
    build_match_cost,
    cxcywh_to_xyxy,
    giou_matrix,
    hungarian_match,
)
from detkit.models.detector import DetectionOutput

__all__ = ["LossWeights", "focal_loss", "box_losses", "BoxLossResult", "SetCriterion", "BadParamsError"]


class BadParamsError(ValueError):
    """focal parameters outside their valid ranges."""


@dataclasses.dataclass
class LossWeights:
    class_weight: float = 1.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    aux_enabled: bool = True
    dn_weight: float = 1.0

    def __post_init__(self):
        for field in ("class_weight", "l1_weight", "giou_weight", "dn_weight"):
            if getattr(self, field) < 0:
                raise ValueError(f"{field} must be >= 0")


def focal_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    alpha: float | None = 0.25,
    gamma: float = 2.0,
    num_matched: float | None = None,
) -> torch.Tensor:
    """Sigmoid focal loss summed over queries and classes, normalized by the
    matched-target count.

    ``targets`` holds class indices in [0, C]; index C means background (no
    positive channel). ``alpha=None`` disables the class-balance factor.
    ``num_matched`` defaults to the number of non-background targets,
    clamped to at least 1.
    """
    if alpha is not None and not 0.0 <= alpha <= 1.0:
        raise BadParamsError(f"alpha must be in [0, 1] or None, got {alpha}")
    if gamma < 0:
        raise BadParamsError(f"gamma must be >= 0, got {gamma}")
    num_classes = logits.shape[-1]
    if targets.min() < 0 or targets.max() > num_classes:
        raise BadParamsError("targets must lie in [0, num_classes] (num_classes = background)")

    onehot = torch.zeros_like(logits)
    foreground = targets < num_classes
    if foreground.any():
        onehot[foreground] = F.one_hot(targets[foreground], num_classes).to(logits.dtype)

    prob = logits.sigmoid()
    ce = F.binary_cross_entropy_with_logits(logits, onehot, reduction="none")
    p_t = prob * onehot + (1 - prob) * (1 - onehot)
    loss = ce * (1 - p_t).pow(gamma)
    if alpha is not None:
        loss = loss * (alpha * onehot + (1 - alpha) * (1 - onehot))

    if num_matched is None:
        num_matched = float(foreground.sum())
    return loss.sum() / max(num_matched, 1.0)


@dataclasses.dataclass
class BoxLossResult:
    l1: torch.Tensor
    giou: torch.Tensor
    empty: bool


def box_losses(pred: BoxArray, tgt: BoxArray) -> BoxLossResult:
    """Mean L1 distance in cxcywh and mean (1 - GIoU) in xyxy over matched
    pairs. Empty input returns zeros with the ``empty`` flag set."""
    if pred.format is not BoxFormat.CXCYWH_NORM or tgt.format is not BoxFormat.CXCYWH_NORM:
        raise ValueError("box_losses expects cxcywh_norm boxes")
    if len(pred) != len(tgt):
        raise ValueError(f"{len(pred)} predictions vs {len(tgt)} targets")
    if len(pred) == 0:
        zero = pred.data.sum() * 0.0
        return BoxLossResult(l1=zero, giou=zero.clone(), empty=True)
    l1 = (pred.data - tgt.data).abs().sum(-1).mean()
    giou = (1 - giou_matrix(cxcywh_to_xyxy(pred.data), cxcywh_to_xyxy(tgt.data)).diagonal()).mean()
    return BoxLossResult(l1=l1, giou=giou, empty=False)


class SetCriterion(nn.Module):
    """Computes the weighted loss dictionary for a DetectionOutput.

    Matching-cost weights mirror the loss weights unless ``match_weights``
    overrides them (the ablated class weight moves both by default). The
    matcher is injectable; denoising losses never touch it.
    """

    def __init__(
        self,
        num_classes: int,
        weights: LossWeights | None = None,
        alpha: float = 0.25,
        gamma: float = 2.0,
        matcher=hungarian_match,
        match_weights: dict | None = None,
    ):
        super().__init__()
        self.num_classes = num_classes
        self.weights = weights or LossWeights()
        self.alpha = alpha
        self.gamma = gamma
        self.matcher = matcher
        self.match_weights = match_weights or {
            "class": self.weights.class_weight,
            "l1": self.weights.l1_weight,
            "giou": self.weights.giou_weight,
        }

    def _assignments(self, logits, boxes, targets):
        assignments = []
        with torch.no_grad():
            for image, target in enumerate(targets):
                cost = build_match_cost(
                    logits[image].sigmoid(),
                    BoxArray(boxes[image], BoxFormat.CXCYWH_NORM),
                    target["labels"],
                    BoxArray(target["boxes"], BoxFormat.CXCYWH_NORM),
                    self.match_weights,
                    alpha=self.alpha,
                    gamma=self.gamma,
                )
                assignments.append(self.matcher(cost))
        return assignments

    def _matched_losses(self, logits, boxes, targets, assignments, norm):
        batch, num_queries, _ = logits.shape
        target_classes = logits.new_full((batch, num_queries), self.num_classes, dtype=torch.long)
        pred_rows, tgt_rows = [], []
        for image, (assignment, target) in enumerate(zip(assignments, targets)):
            if assignment.pairs:
                pred_idx = torch.tensor(assignment.prediction_indices(), dtype=torch.long)
                tgt_idx = torch.tensor(assignment.target_indices(), dtype=torch.long)
                target_classes[image, pred_idx] = target["labels"][tgt_idx]
                pred_rows.append(boxes[image][pred_idx])
                tgt_rows.append(target["boxes"][tgt_idx])
        cls = focal_loss(
            logits.flatten(0, 1), target_classes.flatten(),
            alpha=self.alpha, gamma=self.gamma, num_matched=norm,
        )
        if pred_rows:
            pred_cat = torch.cat(pred_rows)
            tgt_cat = torch.cat(tgt_rows)
            pairs = pred_cat.shape[0]
            result = box_losses(
                BoxArray(pred_cat, BoxFormat.CXCYWH_NORM), BoxArray(tgt_cat, BoxFormat.CXCYWH_NORM)
            )
            l1 = result.l1 * pairs / norm
            giou = result.giou * pairs / norm
        else:
            l1 = logits.sum() * 0.0
            giou = logits.sum() * 0.0
        w = self.weights
        return {"class": w.class_weight * cls, "l1": w.l1_weight * l1, "giou": w.giou_weight * giou}

    def _dn_losses(self, logits, boxes, meta, norm):
        # assignment is known by construction: slot i reconstructs its own GT
        cls = focal_loss(
            logits.flatten(0, 1), meta.labels.flatten(),
            alpha=self.alpha, gamma=self.gamma, num_matched=norm,
        )
        keep = meta.valid & meta.positive
        if keep.any():
            result = box_losses(
                BoxArray(boxes[keep], BoxFormat.CXCYWH_NORM),
                BoxArray(meta.boxes[keep], BoxFormat.CXCYWH_NORM),
            )
            pairs = int(keep.sum())
            l1 = result.l1 * pairs / norm
            giou = result.giou * pairs / norm
        else:
            l1 = logits.sum() * 0.0
            giou = logits.sum() * 0.0
        w = self.weights
        return {
            "class": w.dn_weight * w.class_weight * cls,
            "l1": w.dn_weight * w.l1_weight * l1,
            "giou": w.dn_weight * w.giou_weight * giou,
        }

    def forward(self, output: DetectionOutput, targets: list[dict]) -> dict[str, torch.Tensor]:
        norm = max(float(sum(len(t["labels"]) for t in targets)), 1.0)
        losses: dict[str, torch.Tensor] = {}

        layers = output.per_layer if self.weights.aux_enabled else output.per_layer[-1:]
        offset = len(output.per_layer) - len(layers)
        for index, (logits, boxes) in enumerate(layers):
            absolute = offset + index
            assignments = self._assignments(logits, boxes, targets)
            group = self._matched_losses(logits, boxes, targets, assignments, norm)
            prefix = "" if absolute == len(output.per_layer) - 1 else f"aux{absolute}."
            for name, value in group.items():
                losses[f"{prefix}{name}"] = value

        if output.encoder_proposals is not None and self.weights.aux_enabled:
            prop = output.encoder_proposals
            assignments = self._assignments(prop.logits, prop.boxes, targets)
            group = self._matched_losses(prop.logits, prop.boxes, targets, assignments, norm)
            for name, value in group.items():
                losses[f"enc.{name}"] = value

        if output.dn_outputs is not None:
            meta = output.dn_outputs.meta
            dn_norm = max(float((meta.valid & meta.positive).sum()), 1.0)
            dn_layers = output.dn_outputs.per_layer if self.weights.aux_enabled else output.dn_outputs.per_layer[-1:]
            dn_offset = len(output.dn_outputs.per_layer) - len(dn_layers)
            for index, (logits, boxes) in enumerate(dn_layers):
                absolute = dn_offset + index
                group = self._dn_losses(logits, boxes, meta, dn_norm)
                prefix = "dn." if absolute == len(output.dn_outputs.per_layer) - 1 else f"dn.aux{absolute}."
                for name, value in group.items():
                    losses[f"{prefix}{name}"] = value

        losses["total"] = sum(v for k, v in losses.items() if k != "total")
        return losses
