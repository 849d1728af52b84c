"""Draw predicted boxes onto images for qualitative inspection."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw


class WriteError(RuntimeError):
    """The annotated image could not be written."""


def class_color(label: int) -> tuple[int, int, int]:
    """Deterministic, well-separated color per class id (golden-ratio hue)."""
    hue = (label * 0.61803398875) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def _to_pil(image) -> Image.Image:
    if isinstance(image, Image.Image):
        return image.copy()
    if isinstance(image, torch.Tensor):
        array = image.detach().cpu().numpy()
    else:
        array = np.asarray(image)
    if array.ndim == 3 and array.shape[0] in (1, 3) and array.shape[-1] not in (1, 3):
        array = np.moveaxis(array, 0, -1)
    if array.dtype != np.uint8:
        array = (np.clip(array, 0.0, 1.0) * 255).round().astype(np.uint8)
    return Image.fromarray(array)


def visualize_predictions(
    image,
    detections,
    out_path: str | Path,
    score_floor: float = 0.3,
    class_names: list[str] | None = None,
) -> Path:
    """Write ``image`` with every detection above ``score_floor`` drawn in.

    ``detections`` needs ``boxes`` (N, 4) in xyxy absolute pixels,
    ``scores`` and ``labels``; the Detections dataclass and plain dicts
    both work. Zero (or all-suppressed) detections write the bare image.
    """
    if isinstance(detections, dict):
        boxes, scores, labels = detections["boxes"], detections["scores"], detections["labels"]
    else:
        boxes, scores, labels = detections.boxes, detections.scores, detections.labels
    canvas = _to_pil(image)
    draw = ImageDraw.Draw(canvas)
    for box, score, label in zip(boxes, scores, labels):
        score = float(score)
        if score < score_floor:
            continue
        label = int(label)
        x1, y1, x2, y2 = (float(v) for v in box)
        color = class_color(label)
        draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
        name = class_names[label] if class_names and label < len(class_names) else str(label)
        draw.text((x1 + 2, max(y1 - 10, 0)), f"{name} {score:.2f}", fill=color)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(out_path)
    except (OSError, ValueError) as exc:
        raise WriteError(f"cannot write {out_path}: {exc}") from exc
    return out_path
