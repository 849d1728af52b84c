"""Augmentation pipeline: shortest-edge resize with a long-side cap, and
random crop-then-resize. Every transform keeps boxes valid and in-bounds."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from detkit.data.coco import Sample
from detkit.geometry import BoxArray, BoxFormat

__all__ = ["short_edge_choices", "resize_shortest_edge", "random_crop_then_resize"]


def short_edge_choices(short_range: tuple[int, int] = (480, 800), step: int = 32) -> list[int]:
    """Discrete target short sides covering [low, high] in fixed steps."""
    low, high = short_range
    return list(range(low, high + 1, step))


def _resize_to(sample: Sample, new_height: int, new_width: int) -> Sample:
    chw = sample.image.permute(2, 0, 1)[None]
    resized = F.interpolate(chw, size=(new_height, new_width), mode="bilinear", align_corners=False)
    image = resized[0].permute(1, 2, 0).clamp(0.0, 1.0)
    sy = new_height / sample.height
    sx = new_width / sample.width
    scale = torch.tensor([sx, sy, sx, sy])
    boxes = BoxArray(sample.boxes.data * scale, BoxFormat.XYXY_ABS, (new_height, new_width))
    return Sample(image=image, boxes=boxes, labels=sample.labels, image_id=sample.image_id, crowd=sample.crowd)


def resize_shortest_edge(
    sample: Sample,
    short_edges: int | list[int] = 800,
    max_size: int = 1333,
    rng: np.random.Generator | None = None,
) -> Sample:
    """Scale so the short side hits the target (sampled from ``short_edges``
    when a list), capping the factor so the long side stays <= max_size."""
    if isinstance(short_edges, int):
        target = short_edges
    else:
        if rng is None:
            raise ValueError("sampling a short edge from a set requires an rng")
        target = int(rng.choice(list(short_edges)))
    short = min(sample.height, sample.width)
    long = max(sample.height, sample.width)
    factor = target / short
    if round(long * factor) > max_size:
        factor = max_size / long
    new_height = max(1, round(sample.height * factor))
    new_width = max(1, round(sample.width * factor))
    return _resize_to(sample, new_height, new_width)


def _crop(sample: Sample, x0: int, y0: int, width: int, height: int) -> Sample:
    image = sample.image[y0 : y0 + height, x0 : x0 + width]
    shifted = sample.boxes.data - torch.tensor([x0, y0, x0, y0], dtype=torch.float32)
    clipped = torch.stack(
        [
            shifted[:, 0].clamp(0, width),
            shifted[:, 1].clamp(0, height),
            shifted[:, 2].clamp(0, width),
            shifted[:, 3].clamp(0, height),
        ],
        dim=1,
    )
    keep = (clipped[:, 2] > clipped[:, 0]) & (clipped[:, 3] > clipped[:, 1])
    return Sample(
        image=image,
        boxes=BoxArray(clipped[keep], BoxFormat.XYXY_ABS, (height, width)),
        labels=sample.labels[keep],
        image_id=sample.image_id,
        crowd=sample.crowd[keep],
    )


def random_crop_then_resize(
    sample: Sample,
    rng: np.random.Generator,
    crop_prob: float = 0.5,
    short_edges: int | list[int] = 800,
    max_size: int = 1333,
    min_fraction: float = 0.3,
) -> Sample:
    """With probability ``crop_prob`` crop a random rectangle (each side at
    least ``min_fraction`` of the original), dropping boxes that lose all
    area, then resize as usual; otherwise resize only."""
    if crop_prob > 0 and rng.random() < crop_prob:
        crop_w = int(rng.integers(max(1, int(sample.width * min_fraction)), sample.width + 1))
        crop_h = int(rng.integers(max(1, int(sample.height * min_fraction)), sample.height + 1))
        x0 = int(rng.integers(0, sample.width - crop_w + 1))
        y0 = int(rng.integers(0, sample.height - crop_h + 1))
        sample = _crop(sample, x0, y0, crop_w, crop_h)
    return resize_shortest_edge(sample, short_edges, max_size, rng=rng)
