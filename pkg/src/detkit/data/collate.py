"""Batching: pad to a divisibility-rounded common size with padding masks,
and normalize targets by the true image extents."""

from __future__ import annotations

import dataclasses
import math

import torch

from detkit.data.coco import Sample
from detkit.geometry import BoxFormat, convert_format

__all__ = ["Batch", "collate_batch"]


@dataclasses.dataclass
class Batch:
    """images (B, 3, H, W); padding_mask (B, H, W) True on padding; targets
    hold labels and cxcywh boxes normalized by each image's real extent."""

    images: torch.Tensor
    padding_mask: torch.Tensor
    targets: list[dict]
    image_sizes: list[tuple[int, int]]
    image_ids: list[int]

    def __len__(self) -> int:
        return int(self.images.shape[0])


def collate_batch(samples: list[Sample], size_divisibility: int = 32) -> Batch:
    if not samples:
        raise ValueError("cannot collate an empty sample list")
    max_h = max(s.height for s in samples)
    max_w = max(s.width for s in samples)
    if size_divisibility > 1:
        max_h = int(math.ceil(max_h / size_divisibility) * size_divisibility)
        max_w = int(math.ceil(max_w / size_divisibility) * size_divisibility)

    batch = len(samples)
    images = torch.zeros(batch, 3, max_h, max_w)
    padding_mask = torch.ones(batch, max_h, max_w, dtype=torch.bool)
    targets, image_sizes, image_ids = [], [], []
    for index, sample in enumerate(samples):
        h, w = sample.height, sample.width
        images[index, :, :h, :w] = sample.image.permute(2, 0, 1)
        padding_mask[index, :h, :w] = False
        normalized = convert_format(sample.boxes, BoxFormat.CXCYWH_NORM)
        targets.append(
            {
                "labels": sample.labels.clone(),
                "boxes": normalized.data.clone(),
                "crowd": sample.crowd.clone(),
            }
        )
        image_sizes.append((h, w))
        image_ids.append(sample.image_id)
    return Batch(
        images=images,
        padding_mask=padding_mask,
        targets=targets,
        image_sizes=image_sizes,
        image_ids=image_ids,
    )
