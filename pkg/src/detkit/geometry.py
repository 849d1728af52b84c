"""Box algebra, bipartite set matching, and non-maximum suppression.

Boxes travel as :class:`BoxArray` values in one of two formats:
``cxcywh_norm`` (center/size, normalized to [0,1] by the image extent) and
``xyxy_abs`` (corner pixels). Tensor-level helpers (``cxcywh_to_xyxy``,
``iou_matrix``, ``giou_matrix``) stay differentiable and are what the loss
uses; the BoxArray wrappers validate formats at the API boundary.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

__all__ = [
    "BoxFormat",
    "BoxArray",
    "Assignment",
    "convert_format",
    "cxcywh_to_xyxy",
    "xyxy_to_cxcywh",
    "box_iou",
    "generalized_iou",
    "iou_matrix",
    "giou_matrix",
    "hungarian_match",
    "build_match_cost",
    "focal_class_cost",
    "nms",
    "batched_nms",
    "MissingImageSizeError",
    "NonFiniteCostError",
    "ShapeMismatchError",
    "BadThresholdError",
]


class MissingImageSizeError(ValueError):
    """Normalized<->absolute conversion requested without an image size."""


class NonFiniteCostError(ValueError):
    """The matching cost matrix contains NaN or +-inf."""


class ShapeMismatchError(ValueError):
    pass


class BadThresholdError(ValueError):
    pass


class BoxFormat(str, enum.Enum):
    CXCYWH_NORM = "cxcywh_norm"
    XYXY_ABS = "xyxy_abs"


@dataclasses.dataclass
class BoxArray:
    """N boxes with an explicit coordinate format.

    ``image_size`` is (height, width) in pixels and is required whenever the
    boxes are normalized or a conversion crosses the normalized/absolute
    boundary.
    """

    data: torch.Tensor  # (N, 4)
    format: BoxFormat
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        if not isinstance(self.data, torch.Tensor):
            self.data = torch.as_tensor(self.data, dtype=torch.float32)
        if self.data.ndim != 2 or self.data.shape[-1] != 4:
            raise ShapeMismatchError(f"BoxArray data must be (N, 4); got {tuple(self.data.shape)}")
        self.format = BoxFormat(self.format)

    def __len__(self) -> int:
        return self.data.shape[0]

    def validate(self, atol: float = 1e-5) -> None:
        """Check the format invariants (ranges, corner ordering)."""
        if len(self) == 0:
            return
        d = self.data
        if self.format is BoxFormat.CXCYWH_NORM:
            if d.min() < -atol or d.max() > 1 + atol:
                raise ValueError("cxcywh_norm entries must lie in [0, 1]")
            if (d[:, 2:] < -atol).any():
                raise ValueError("cxcywh_norm widths/heights must be >= 0")
        else:
            if (d[:, 2] - d[:, 0] < -atol).any() or (d[:, 3] - d[:, 1] < -atol).any():
                raise ValueError("xyxy_abs requires x2 >= x1 and y2 >= y1")


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], dim=-1)


def convert_format(boxes: BoxArray, to: BoxFormat | str) -> BoxArray:
    """Exact affine conversion between the two formats.

    Converting and converting back recovers the input to float precision.
    """
    to = BoxFormat(to)
    if boxes.format is to:
        return BoxArray(boxes.data.clone(), to, boxes.image_size)
    if boxes.image_size is None:
        raise MissingImageSizeError(
            f"converting {boxes.format.value} -> {to.value} needs image_size (height, width)"
        )
    height, width = boxes.image_size
    scale = boxes.data.new_tensor([width, height, width, height])
    if boxes.format is BoxFormat.CXCYWH_NORM:
        data = cxcywh_to_xyxy(boxes.data) * scale
    else:
        data = xyxy_to_cxcywh(boxes.data) / scale
    return BoxArray(data, to, boxes.image_size)


def iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of xyxy boxes, (M, N). Zero-area boxes give IoU 0 by definition."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=torch.finfo(a.dtype).tiny), torch.zeros_like(inter))


def giou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise generalized IoU of xyxy boxes, (M, N), in [-1, 1].

    GIoU = IoU - (|C| - |A u B|) / |C| with C the smallest enclosing box.
    """
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    iou = torch.where(union > 0, inter / union.clamp(min=torch.finfo(a.dtype).tiny), torch.zeros_like(inter))
    enclose_lt = torch.min(a[:, None, :2], b[None, :, :2])
    enclose_rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    enclose_wh = (enclose_rb - enclose_lt).clamp(min=0)
    enclose = enclose_wh[..., 0] * enclose_wh[..., 1]
    hull_gap = torch.where(
        enclose > 0,
        (enclose - union) / enclose.clamp(min=torch.finfo(a.dtype).tiny),
        torch.zeros_like(enclose),
    )
    return iou - hull_gap


def _require_xyxy(boxes: BoxArray, name: str) -> torch.Tensor:
    if boxes.format is not BoxFormat.XYXY_ABS:
        raise ShapeMismatchError(f"{name} expects xyxy_abs boxes; got {boxes.format.value}")
    return boxes.data


def box_iou(a: BoxArray, b: BoxArray) -> torch.Tensor:
    return iou_matrix(_require_xyxy(a, "box_iou"), _require_xyxy(b, "box_iou"))


def generalized_iou(a: BoxArray, b: BoxArray) -> torch.Tensor:
    return giou_matrix(_require_xyxy(a, "generalized_iou"), _require_xyxy(b, "generalized_iou"))


@dataclasses.dataclass
class Assignment:
    """A one-to-one partial matching between predictions and targets."""

    pairs: list[tuple[int, int]]  # (prediction index, target index)
    total_cost: float

    def prediction_indices(self) -> list[int]:
        return [p for p, _ in self.pairs]

    def target_indices(self) -> list[int]:
        return [t for _, t in self.pairs]


def hungarian_match(cost) -> Assignment:
    """Minimum-cost one-to-one partial matching of size min(M, N).

    Backed by the Jonker-Volgenant shortest-augmenting-path solver
    (``scipy.optimize.linear_sum_assignment``), exact at any query count the
    package uses. Empty axes yield an empty assignment with cost 0.
    """
    if isinstance(cost, torch.Tensor):
        cost = cost.detach().cpu().numpy()
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeMismatchError(f"cost must be 2-d; got shape {cost.shape}")
    if cost.size and not np.isfinite(cost).all():
        raise NonFiniteCostError("cost matrix contains non-finite entries")
    if 0 in cost.shape:
        return Assignment(pairs=[], total_cost=0.0)
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    pairs = [(int(rows[i]), int(cols[i])) for i in order]
    return Assignment(pairs=pairs, total_cost=float(cost[rows, cols].sum()))


def focal_class_cost(
    class_prob: torch.Tensor,
    tgt_labels: torch.Tensor,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Focal-style classification cost, (M, T).

    cost(i, j) = pos_cost(p_i[label_j]) - neg_cost(p_i[label_j]), the change
    in focal loss from treating target j's class as positive for prediction
    i rather than negative. Can be negative for confident correct scores.
    """
    eps = 1e-8
    prob = class_prob
    neg = (1 - alpha) * prob.pow(gamma) * (-(1 - prob + eps).log())
    pos = alpha * (1 - prob).pow(gamma) * (-(prob + eps).log())
    return (pos - neg)[:, tgt_labels]


def build_match_cost(
    class_prob: torch.Tensor,
    pred_boxes: BoxArray,
    tgt_labels,
    tgt_boxes: BoxArray,
    weights: dict,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Matching cost matrix (M predictions x T targets).

    cost = w_class * focal_class_cost + w_l1 * ||box_i - box_j||_1
         + w_giou * (1 - GIoU(i, j)), boxes compared in cxcywh_norm for the
    L1 term and in xyxy for GIoU. ``weights`` carries keys class/l1/giou.
    """
    tgt_labels = torch.as_tensor(tgt_labels, dtype=torch.long)
    if class_prob.ndim != 2:
        raise ShapeMismatchError(f"class_prob must be (M, C); got {tuple(class_prob.shape)}")
    if len(pred_boxes) != class_prob.shape[0]:
        raise ShapeMismatchError(
            f"{len(pred_boxes)} boxes vs {class_prob.shape[0]} probability rows"
        )
    if len(tgt_boxes) != len(tgt_labels):
        raise ShapeMismatchError(f"{len(tgt_boxes)} target boxes vs {len(tgt_labels)} labels")
    if len(tgt_labels) and int(tgt_labels.max()) >= class_prob.shape[1]:
        raise ShapeMismatchError("target label outside the class-probability columns")
    if pred_boxes.format is not BoxFormat.CXCYWH_NORM or tgt_boxes.format is not BoxFormat.CXCYWH_NORM:
        raise ShapeMismatchError("build_match_cost expects cxcywh_norm boxes on both sides")

    cls_cost = focal_class_cost(class_prob, tgt_labels, alpha=alpha, gamma=gamma)
    l1_cost = torch.cdist(pred_boxes.data, tgt_boxes.data, p=1)
    giou_cost = 1 - giou_matrix(cxcywh_to_xyxy(pred_boxes.data), cxcywh_to_xyxy(tgt_boxes.data))
    return weights["class"] * cls_cost + weights["l1"] * l1_cost + weights["giou"] * giou_cost


def nms(boxes, scores, iou_threshold: float) -> torch.Tensor:
    """Greedy non-maximum suppression; returns kept indices, score-descending.

    Repeatedly keeps the highest-scoring remaining box and suppresses boxes
    whose IoU with it exceeds ``iou_threshold`` (strictly greater). Score ties
    break toward the lower original index, so results are deterministic.
    """
    if not 0 < iou_threshold <= 1:
        raise BadThresholdError(f"iou_threshold must be in (0, 1]; got {iou_threshold}")
    if isinstance(boxes, BoxArray):
        boxes = _require_xyxy(boxes, "nms")
    boxes = torch.as_tensor(boxes, dtype=torch.float32)
    scores = torch.as_tensor(scores, dtype=torch.float32)
    if boxes.shape[0] != scores.shape[0]:
        raise ShapeMismatchError(f"{boxes.shape[0]} boxes vs {scores.shape[0]} scores")
    if boxes.shape[0] == 0:
        return torch.empty(0, dtype=torch.long)
    order = torch.argsort(-scores, stable=True)  # stable: ties keep original order
    keep = []
    while order.numel():
        head = order[0]
        keep.append(int(head))
        if order.numel() == 1:
            break
        rest = order[1:]
        iou = iou_matrix(boxes[head].unsqueeze(0), boxes[rest]).squeeze(0)
        order = rest[iou <= iou_threshold]
    return torch.tensor(keep, dtype=torch.long)


def batched_nms(boxes, scores, labels, iou_threshold: float) -> torch.Tensor:
    """Per-class NMS via the coordinate-offset trick; same return as :func:`nms`."""
    if isinstance(boxes, BoxArray):
        boxes = _require_xyxy(boxes, "batched_nms")
    boxes = torch.as_tensor(boxes, dtype=torch.float32)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if boxes.shape[0] == 0:
        return torch.empty(0, dtype=torch.long)
    span = float(boxes.max()) + 1.0
    shifted = boxes + labels[:, None].to(boxes.dtype) * span
    return nms(shifted, scores, iou_threshold)
