"""COCO-style average precision over IoU thresholds and area bands.

Matching follows the reference protocol: per class, predictions are taken
in descending score order and greedily matched to the not-yet-matched
ground-truth box of highest IoU at or above the threshold. Crowd regions
absorb otherwise-unmatched predictions (overlap measured against the
prediction's own area) without counting them as false positives. The
precision envelope is sampled at 101 recall points.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 1.0, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 32.0 ** 2),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, float("inf")),
}


class EmptyGroundTruth(ValueError):
    """No annotated object anywhere in the evaluation set."""


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def _iou_xyxy(dets: np.ndarray, gts: np.ndarray, crowd: np.ndarray) -> np.ndarray:
    """Pairwise IoU; against crowd boxes the union is just the det area."""
    if len(dets) == 0 or len(gts) == 0:
        return np.zeros((len(dets), len(gts)))
    x1 = np.maximum(dets[:, None, 0], gts[None, :, 0])
    y1 = np.maximum(dets[:, None, 1], gts[None, :, 1])
    x2 = np.minimum(dets[:, None, 2], gts[None, :, 2])
    y2 = np.minimum(dets[:, None, 3], gts[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    det_area = (dets[:, 2] - dets[:, 0]) * (dets[:, 3] - dets[:, 1])
    gt_area = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    union = det_area[:, None] + gt_area[None, :] - inter
    union = np.where(crowd[None, :], det_area[:, None], union)
    return inter / np.maximum(union, 1e-12)


def _match_image(det_boxes, det_scores, gt_boxes, gt_crowd, gt_in_range, threshold):
    """Greedy per-image matching; returns (tp, ignore) flags in score order."""
    order = np.argsort(-det_scores, kind="stable")
    ious = _iou_xyxy(det_boxes[order], gt_boxes, gt_crowd)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    ignore = np.zeros(len(order), dtype=bool)
    for row in range(len(order)):
        candidates = np.where(~taken & ~gt_crowd & (ious[row] >= threshold))[0]
        if len(candidates):
            best = candidates[np.argmax(ious[row, candidates])]
            taken[best] = True
            if gt_in_range[best]:
                tp[row] = True
            else:
                ignore[row] = True  # matched GT outside the band: not a miss
            continue
        crowd_hits = np.where(gt_crowd & (ious[row] >= threshold))[0]
        if len(crowd_hits):
            ignore[row] = True
    return order, tp, ignore


def _average_precision(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from cumulative match flags."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(~tp)
    recall = cum_tp / num_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    sampled = np.zeros(len(RECALL_POINTS))
    indices = np.searchsorted(recall, RECALL_POINTS, side="left")
    valid = indices < len(envelope)
    sampled[valid] = envelope[indices[valid]]
    return float(sampled.mean())


def coco_ap_evaluate(
    predictions: list[dict],
    ground_truth: list[dict],
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS,
    area_ranges: dict[str, tuple[float, float]] | None = None,
    max_dets: int = 100,
) -> dict[str, float]:
    """Evaluate per-image predictions against per-image ground truth.

    ``predictions[i]``: {"boxes" (N,4) xyxy_abs, "scores" (N,), "labels" (N,)}.
    ``ground_truth[i]``: {"boxes" (M,4), "labels" (M,), "crowd" (M,) bool}.

    Returns {"AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"} in [0, 1];
    bands with no ground truth come back as NaN. Classes without any
    annotation are skipped from the means and logged.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError("predictions and ground_truth must align per image")
    area_ranges = area_ranges or AREA_RANGES

    images = []
    classes = set()
    for preds, gts in zip(predictions, ground_truth):
        det_boxes = _as_numpy(preds["boxes"]).reshape(-1, 4).astype(np.float64)
        det_scores = _as_numpy(preds["scores"]).astype(np.float64)
        det_labels = _as_numpy(preds["labels"]).astype(np.int64)
        gt_boxes = _as_numpy(gts["boxes"]).reshape(-1, 4).astype(np.float64)
        gt_labels = _as_numpy(gts["labels"]).astype(np.int64)
        crowd = (_as_numpy(gts["crowd"]).astype(bool) if "crowd" in gts
                 else np.zeros(len(gt_boxes), dtype=bool))
        images.append((det_boxes, det_scores, det_labels, gt_boxes, gt_labels, crowd))
        classes.update(gt_labels.tolist())
        classes.update(det_labels.tolist())

    annotated = {
        c for _, _, _, gt_boxes, gt_labels, crowd in images
        for c in gt_labels[~crowd].tolist()
    }
    if not annotated:
        raise EmptyGroundTruth("no non-crowd ground-truth boxes in the evaluation set")
    for skipped in sorted(classes - annotated):
        logger.info("class %d has no ground truth; skipped from the mean", skipped)

    # ap[class][band] = list over thresholds
    ap: dict[int, dict[str, list[float]]] = {
        c: {band: [] for band in area_ranges} for c in sorted(annotated)
    }
    for cls in sorted(annotated):
        for band, (lo, hi) in area_ranges.items():
            for threshold in iou_thresholds:
                flags = []
                scores = []
                num_gt = 0
                for det_boxes, det_scores, det_labels, gt_boxes, gt_labels, crowd in images:
                    keep = det_labels == cls
                    boxes, confs = det_boxes[keep], det_scores[keep]
                    if len(confs) > max_dets:
                        top = np.argsort(-confs, kind="stable")[:max_dets]
                        boxes, confs = boxes[top], confs[top]
                    gt_keep = gt_labels == cls
                    g_boxes, g_crowd = gt_boxes[gt_keep], crowd[gt_keep]
                    areas = (g_boxes[:, 2] - g_boxes[:, 0]) * (g_boxes[:, 3] - g_boxes[:, 1])
                    in_range = (areas >= lo) & (areas < hi)
                    num_gt += int((in_range & ~g_crowd).sum())
                    order, tp, ignore = _match_image(
                        boxes, confs, g_boxes, g_crowd, in_range, threshold
                    )
                    det_areas = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]))[order]
                    out_of_band = ~tp & ~ignore & ~((det_areas >= lo) & (det_areas < hi))
                    keep_rows = ~(ignore | out_of_band)
                    flags.extend(tp[keep_rows].tolist())
                    scores.extend(confs[order][keep_rows].tolist())
                ranked = np.argsort(-np.asarray(scores), kind="stable") if scores else []
                tp_sorted = np.asarray(flags, dtype=bool)[ranked] if scores else np.zeros(0, bool)
                ap[cls][band].append(_average_precision(tp_sorted, num_gt))

    def mean_over(band: str, threshold_index: int | None = None) -> float:
        values = []
        for cls in ap:
            per_threshold = ap[cls][band]
            if threshold_index is None:
                usable = [v for v in per_threshold if not np.isnan(v)]
                if usable:
                    values.append(float(np.mean(usable)))
            elif not np.isnan(per_threshold[threshold_index]):
                values.append(per_threshold[threshold_index])
        return float(np.mean(values)) if values else float("nan")

    thresholds = list(iou_thresholds)
    return {
        "AP": mean_over("all"),
        "AP50": mean_over("all", thresholds.index(0.5)) if 0.5 in thresholds else float("nan"),
        "AP75": mean_over("all", thresholds.index(0.75)) if 0.75 in thresholds else float("nan"),
        "AP_S": mean_over("small"),
        "AP_M": mean_over("medium"),
        "AP_L": mean_over("large"),
    }


def results_to_coco_json(
    predictions: list[dict],
    image_ids: list[int],
    category_map: dict[int, int] | None = None,
    path: str | Path | None = None,
) -> list[dict]:
    """Standard results list: {image_id, category_id, bbox xywh, score}.

    ``category_map`` converts contiguous training labels back to original
    category ids (the inverse of the ingestion remap).
    """
    inverse = {v: k for k, v in category_map.items()} if category_map else None
    results = []
    for image_id, preds in zip(image_ids, predictions):
        boxes = _as_numpy(preds["boxes"]).reshape(-1, 4)
        scores = _as_numpy(preds["scores"])
        labels = _as_numpy(preds["labels"]).astype(int)
        for box, score, label in zip(boxes, scores, labels):
            x1, y1, x2, y2 = box.tolist()
            results.append({
                "image_id": int(image_id),
                "category_id": int(inverse[label]) if inverse else int(label),
                "bbox": [x1, y1, x2 - x1, y2 - y1],
                "score": float(score),
            })
    if path is not None:
        Path(path).write_text(json.dumps(results, sort_keys=True))
    return results
