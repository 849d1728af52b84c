"""Turn raw detector outputs into per-image ranked detections."""

from __future__ import annotations

import dataclasses

import torch

from detkit.geometry import BoxArray, BoxFormat, batched_nms, convert_format, nms
from detkit.models.detector import DetectionOutput

__all__ = ["Detections", "postprocess", "BadTopKError"]


class BadTopKError(ValueError):
    """top_k outside (0, queries x classes]."""


@dataclasses.dataclass
class Detections:
    """Ranked detections for one image: absolute xyxy boxes, sigmoid scores,
    class labels, score-descending."""

    boxes: torch.Tensor
    scores: torch.Tensor
    labels: torch.Tensor
    image_size: tuple[int, int]

    def __len__(self) -> int:
        return int(self.scores.shape[0])


def postprocess(
    output: DetectionOutput,
    image_sizes: list[tuple[int, int]],
    top_k: int = 100,
    use_nms: bool = False,
    nms_threshold: float = 0.8,
    class_agnostic_nms: bool = True,
) -> list[Detections]:
    """Last-layer logits -> sigmoid scores; pick ``top_k`` over the flattened
    (query, class) grid per image; boxes to absolute xyxy for the given
    (height, width) sizes; optional NMS (class-agnostic by default)."""
    logits, boxes = output.per_layer[-1]
    batch, num_queries, num_classes = logits.shape
    if not 0 < top_k <= num_queries * num_classes:
        raise BadTopKError(f"top_k={top_k} outside (0, {num_queries * num_classes}]")
    if len(image_sizes) != batch:
        raise ValueError(f"{len(image_sizes)} image sizes for batch of {batch}")

    scores = logits.sigmoid().flatten(1)
    results = []
    for image in range(batch):
        order = torch.argsort(-scores[image], stable=True)[:top_k]
        picked_scores = scores[image][order]
        picked_labels = order % num_classes
        picked_boxes = boxes[image][order // num_classes]
        absolute = convert_format(
            BoxArray(picked_boxes, BoxFormat.CXCYWH_NORM, image_sizes[image]), BoxFormat.XYXY_ABS
        ).data
        if use_nms:
            if class_agnostic_nms:
                keep = nms(absolute, picked_scores, nms_threshold)
            else:
                keep = batched_nms(absolute, picked_scores, picked_labels, nms_threshold)
            absolute = absolute[keep]
            picked_scores = picked_scores[keep]
            picked_labels = picked_labels[keep]
        results.append(
            Detections(
                boxes=absolute,
                scores=picked_scores,
                labels=picked_labels,
                image_size=image_sizes[image],
            )
        )
    return results
