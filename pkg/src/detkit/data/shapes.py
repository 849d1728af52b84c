"""Deterministic synthetic shapes dataset: colored circles, squares and
triangles on a flat background, with boxes computed from the rasterized
extent so ground truth is exact by construction."""

from __future__ import annotations

import json
import pathlib

import numpy as np
import torch
from PIL import Image

from detkit.data.coco import CocoDataset, Sample, load_coco_annotations
from detkit.geometry import BoxArray, BoxFormat

__all__ = [
    "SHAPE_CLASSES",
    "generate_shapes_dataset",
    "dump_shapes_dataset",
    "reload_shapes_dataset",
    "ShapesDataset",
]

SHAPE_CLASSES = ("circle", "square", "triangle")


def _raster_mask(kind: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray | None:
    ys, xs = np.mgrid[0:height, 0:width]
    size = int(rng.integers(max(6, height // 8), max(8, height // 3) + 1))
    cx = int(rng.integers(size, width - size)) if width > 2 * size else width // 2
    cy = int(rng.integers(size, height - size)) if height > 2 * size else height // 2
    if kind == "circle":
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= (size // 2) ** 2
    elif kind == "square":
        half = size // 2
        mask = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    elif kind == "triangle":
        # upright isoceles triangle: apex at (cx, cy-half), base at cy+half
        half = size // 2
        rel_y = ys - (cy - half)
        inside_rows = (rel_y >= 0) & (rel_y <= 2 * half)
        spread = rel_y / 2.0
        mask = inside_rows & (np.abs(xs - cx) <= spread)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    if not mask.any():
        return None
    return mask


def _mask_extent(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    # a pixel at index i spans [i, i+1), so the extent is exclusive on the right
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _boxes_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


class ShapesDataset:
    """In-memory samples plus the matching COCO-format dictionary."""

    def __init__(self, samples: list[Sample], coco: dict, pixel_arrays: list[np.ndarray]):
        self.samples = samples
        self.coco = coco
        self.pixel_arrays = pixel_arrays
        self.class_names = list(SHAPE_CLASSES)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int) -> Sample:
        return self.samples[index]


def generate_shapes_dataset(
    seed: int,
    num_images: int,
    image_size: int = 64,
    classes: tuple[str, ...] = SHAPE_CLASSES,
    max_objects: int = 4,
) -> ShapesDataset:
    if num_images < 1:
        raise ValueError("num_images must be >= 1")
    rng = np.random.default_rng(seed)
    height = width = int(image_size)
    samples, pixel_arrays = [], []
    coco = {
        "images": [],
        "annotations": [],
        "categories": [{"id": i + 1, "name": name} for i, name in enumerate(classes)],
    }
    annotation_id = 1
    for image_id in range(1, num_images + 1):
        background = rng.integers(0, 96, size=3, dtype=np.uint8)
        pixels = np.broadcast_to(background, (height, width, 3)).copy()
        target_count = int(rng.integers(1, max_objects + 1))
        placed_boxes, labels = [], []
        attempts = 0
        while len(placed_boxes) < target_count and attempts < 50:
            attempts += 1
            label = int(rng.integers(0, len(classes)))
            mask = _raster_mask(classes[label], height, width, rng)
            if mask is None:
                continue
            box = _mask_extent(mask)
            if any(_boxes_overlap(box, other) for other in placed_boxes):
                continue
            color = rng.integers(128, 256, size=3, dtype=np.uint8)
            pixels[mask] = color
            placed_boxes.append(box)
            labels.append(label)
        if not placed_boxes:  # guarantee at least one object
            half = height // 4
            box = (half, half, 3 * half, 3 * half)
            pixels[box[1] : box[3], box[0] : box[2]] = np.array([255, 255, 255], dtype=np.uint8)
            placed_boxes.append(box)
            labels.append(1 if "square" in classes else 0)

        coco["images"].append(
            {"id": image_id, "file_name": f"{image_id:06d}.png", "height": height, "width": width}
        )
        for box, label in zip(placed_boxes, labels):
            x0, y0, x1, y1 = box
            coco["annotations"].append(
                {
                    "id": annotation_id,
                    "image_id": image_id,
                    "category_id": label + 1,
                    "bbox": [float(x0), float(y0), float(x1 - x0), float(y1 - y0)],
                    "area": float((x1 - x0) * (y1 - y0)),
                    "iscrowd": 0,
                }
            )
            annotation_id += 1

        image = torch.from_numpy(pixels.astype(np.float32) / 255.0)
        boxes = torch.tensor(placed_boxes, dtype=torch.float32).reshape(-1, 4)
        samples.append(
            Sample(
                image=image,
                boxes=BoxArray(boxes, BoxFormat.XYXY_ABS, (height, width)),
                labels=torch.tensor(labels, dtype=torch.long),
                image_id=image_id,
                crowd=torch.zeros(len(labels), dtype=torch.bool),
            )
        )
        pixel_arrays.append(pixels)
    return ShapesDataset(samples, coco, pixel_arrays)


def dump_shapes_dataset(dataset: ShapesDataset, out_dir) -> tuple[pathlib.Path, pathlib.Path]:
    """Write PNG images and the COCO JSON; returns (json_path, image_root).
    The dump re-ingests through load_coco_annotations to the same targets."""
    out_dir = pathlib.Path(out_dir)
    image_root = out_dir / "images"
    image_root.mkdir(parents=True, exist_ok=True)
    for entry, pixels in zip(dataset.coco["images"], dataset.pixel_arrays):
        Image.fromarray(pixels).save(image_root / entry["file_name"])
    json_path = out_dir / "instances.json"
    with open(json_path, "w") as handle:
        json.dump(dataset.coco, handle, sort_keys=True)
    return json_path, image_root


def reload_shapes_dataset(out_dir) -> CocoDataset:
    out_dir = pathlib.Path(out_dir)
    return load_coco_annotations(out_dir / "instances.json", out_dir / "images")
