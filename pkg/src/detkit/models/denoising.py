"""Denoising query groups: noised ground-truth copies trained to reconstruct
their source object. Targets are known by construction, so these queries
bypass the matcher entirely.

With ``contrastive`` off each group holds one positive copy per GT (DN
style); on, a second negative copy with larger jitter and a background
reconstruction label is appended per GT (DINO style).
"""

from __future__ import annotations

import dataclasses

import torch

__all__ = ["DnMeta", "DnQueries", "build_denoising_groups", "denoising_attention_mask"]


@dataclasses.dataclass
class DnMeta:
    """Reconstruction targets for the denoising block. ``labels`` uses
    num_classes as the background sentinel (negatives and padded slots);
    ``valid`` marks slots backed by a real GT."""

    num_groups: int
    queries_per_group: int
    contrastive: bool
    labels: torch.Tensor
    boxes: torch.Tensor
    valid: torch.Tensor
    positive: torch.Tensor

    @property
    def num_queries(self) -> int:
        return self.num_groups * self.queries_per_group


@dataclasses.dataclass
class DnQueries:
    """Noised inputs plus their reconstruction metadata. ``input_labels``
    indexes a (num_classes + 1)-row embedding table; padded slots use the
    background row."""

    input_labels: torch.Tensor
    input_boxes: torch.Tensor
    meta: DnMeta

    def attention_mask(self, num_matching: int) -> torch.Tensor:
        return denoising_attention_mask(self.meta.num_groups, self.meta.queries_per_group, num_matching)


def denoising_attention_mask(num_groups: int, queries_per_group: int, num_matching: int) -> torch.Tensor:
    """Self-attention mask (True = blocked) for [dn groups..., matching].

    Each dn group is open within itself, the matching block is open within
    itself, and every cross block is closed: groups cannot copy answers from
    each other and matching queries never see ground-truth leakage.
    """
    total = num_groups * queries_per_group + num_matching
    mask = torch.ones(total, total, dtype=torch.bool)
    for g in range(num_groups):
        lo, hi = g * queries_per_group, (g + 1) * queries_per_group
        mask[lo:hi, lo:hi] = False
    mask[num_groups * queries_per_group :, num_groups * queries_per_group :] = False
    return mask


def _noise_boxes(boxes: torch.Tensor, scale: float, negative: bool) -> torch.Tensor:
    """Jitter cxcywh boxes: centers by up to ±(size/2)·scale, sizes by up to
    ±size·scale. Negatives push the noise magnitude into [1, 2)·scale."""
    half = torch.cat([boxes[..., 2:] / 2, boxes[..., 2:]], dim=-1)
    magnitude = torch.rand_like(boxes)
    if negative:
        magnitude = magnitude + 1.0
    sign = torch.randint_like(boxes, 0, 2) * 2 - 1
    return (boxes + sign * magnitude * half * scale).clamp(min=0.0, max=1.0)


def _noise_labels(labels: torch.Tensor, ratio: float, num_classes: int) -> torch.Tensor:
    flip = torch.rand(labels.shape) < ratio
    random_labels = torch.randint(0, num_classes, labels.shape)
    return torch.where(flip, random_labels, labels)


def build_denoising_groups(
    gt_labels: list[torch.Tensor],
    gt_boxes: list[torch.Tensor],
    num_groups: int,
    label_noise_ratio: float,
    box_noise_scale: float,
    num_classes: int,
    contrastive: bool = False,
) -> DnQueries | None:
    """Build the denoising block for a batch of per-image targets (labels as
    int tensors, boxes normalized cxcywh).

    Returns None when num_groups is 0 or no image has targets (denoising
    skipped). Slots are padded to the largest GT count in the batch; padded
    slots carry the background label and are excluded from loss via
    ``meta.valid``.
    """
    if num_groups <= 0:
        return None
    counts = [int(l.shape[0]) for l in gt_labels]
    max_gt = max(counts, default=0)
    if max_gt == 0:
        return None
    if label_noise_ratio < 0 or box_noise_scale < 0:
        raise ValueError("noise parameters must be non-negative")

    batch = len(gt_labels)
    copies = 2 if contrastive else 1
    queries_per_group = copies * max_gt
    dn_total = num_groups * queries_per_group

    input_labels = torch.full((batch, dn_total), num_classes, dtype=torch.long)
    input_boxes = torch.full((batch, dn_total, 4), 0.5)
    target_labels = torch.full((batch, dn_total), num_classes, dtype=torch.long)
    target_boxes = torch.zeros(batch, dn_total, 4)
    valid = torch.zeros(batch, dn_total, dtype=torch.bool)
    positive = torch.zeros(batch, dn_total, dtype=torch.bool)

    for image, (labels, boxes) in enumerate(zip(gt_labels, gt_boxes)):
        n = counts[image]
        if n == 0:
            continue
        for group in range(num_groups):
            base = group * queries_per_group
            pos = slice(base, base + n)
            input_labels[image, pos] = _noise_labels(labels, label_noise_ratio, num_classes)
            input_boxes[image, pos] = _noise_boxes(boxes, box_noise_scale, negative=False)
            target_labels[image, pos] = labels
            target_boxes[image, pos] = boxes
            valid[image, pos] = True
            positive[image, pos] = True
            if contrastive:
                neg = slice(base + max_gt, base + max_gt + n)
                input_labels[image, neg] = _noise_labels(labels, label_noise_ratio, num_classes)
                input_boxes[image, neg] = _noise_boxes(boxes, box_noise_scale, negative=True)
                target_boxes[image, neg] = boxes
                valid[image, neg] = True

    meta = DnMeta(
        num_groups=num_groups,
        queries_per_group=queries_per_group,
        contrastive=contrastive,
        labels=target_labels,
        boxes=target_boxes,
        valid=valid,
        positive=positive,
    )
    return DnQueries(input_labels=input_labels, input_boxes=input_boxes, meta=meta)
