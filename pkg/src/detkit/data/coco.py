"""COCO-format annotation ingestion.

The loader validates the object-detection JSON schema (images, annotations,
categories), converts xywh boxes to xyxy, remaps category ids to contiguous
indices (sorted order, mapping recorded), and keeps crowd annotations with a
flag so the evaluator can absorb them without penalty.
"""

from __future__ import annotations

import dataclasses
import json
import pathlib

import numpy as np
import torch
from PIL import Image

from detkit.geometry import BoxArray, BoxFormat

__all__ = ["Sample", "CocoDataset", "load_coco_annotations", "SchemaError", "MissingImageError"]


class SchemaError(ValueError):
    """annotation JSON violates the COCO object-detection schema."""


class MissingImageError(FileNotFoundError):
    """an images[] entry points at a file that does not exist."""


@dataclasses.dataclass
class Sample:
    """One image with its targets. ``image`` is (H, W, 3) float in [0, 1];
    boxes are absolute xyxy tied to that image; ``crowd`` marks annotations
    the evaluator matches without penalty."""

    image: torch.Tensor
    boxes: BoxArray
    labels: torch.Tensor
    image_id: int
    crowd: torch.Tensor

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


def _require(condition: bool, message: str):
    if not condition:
        raise SchemaError(message)


class CocoDataset:
    """Samples indexed 0..len-1, images decoded on access. ``category_map``
    records original id -> contiguous index; ``class_names`` follows the
    contiguous order."""

    def __init__(self, records: list[dict], image_root: pathlib.Path, category_map: dict[int, int], class_names: list[str]):
        self._records = records
        self.image_root = image_root
        self.category_map = category_map
        self.class_names = class_names

    def __len__(self) -> int:
        return len(self._records)

    def __getitem__(self, index: int) -> Sample:
        record = self._records[index]
        with Image.open(record["path"]) as handle:
            array = np.asarray(handle.convert("RGB"), dtype=np.float32) / 255.0
        image = torch.from_numpy(array)
        boxes = torch.tensor(record["boxes"], dtype=torch.float32).reshape(-1, 4)
        return Sample(
            image=image,
            boxes=BoxArray(boxes, BoxFormat.XYXY_ABS, (image.shape[0], image.shape[1])),
            labels=torch.tensor(record["labels"], dtype=torch.long),
            image_id=record["image_id"],
            crowd=torch.tensor(record["crowd"], dtype=torch.bool),
        )


def load_coco_annotations(json_path, image_root) -> CocoDataset:
    json_path = pathlib.Path(json_path)
    image_root = pathlib.Path(image_root)
    with open(json_path) as handle:
        try:
            payload = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{json_path} is not valid JSON: {exc}") from exc

    for key in ("images", "annotations", "categories"):
        _require(key in payload and isinstance(payload[key], list), f"missing list field {key!r}")
    _require(len(payload["categories"]) > 0, "categories list is empty")

    categories = {}
    for entry in payload["categories"]:
        _require(isinstance(entry, dict) and "id" in entry, "category entry without id")
        categories[int(entry["id"])] = str(entry.get("name", entry["id"]))
    category_map = {original: index for index, original in enumerate(sorted(categories))}
    class_names = [categories[original] for original in sorted(categories)]

    images = {}
    for entry in payload["images"]:
        for field in ("id", "file_name", "height", "width"):
            _require(field in entry, f"image entry missing {field!r}")
        path = image_root / entry["file_name"]
        if not path.exists():
            raise MissingImageError(str(path))
        images[int(entry["id"])] = {
            "path": path,
            "image_id": int(entry["id"]),
            "height": int(entry["height"]),
            "width": int(entry["width"]),
            "boxes": [],
            "labels": [],
            "crowd": [],
        }

    for entry in payload["annotations"]:
        for field in ("image_id", "category_id", "bbox"):
            _require(field in entry, f"annotation missing {field!r}")
        image_id = int(entry["image_id"])
        _require(image_id in images, f"annotation references unknown image id {image_id}")
        _require(int(entry["category_id"]) in category_map, f"unknown category id {entry['category_id']}")
        bbox = entry["bbox"]
        _require(isinstance(bbox, (list, tuple)) and len(bbox) == 4, "bbox must be [x, y, w, h]")
        x, y, w, h = (float(v) for v in bbox)
        record = images[image_id]
        record["boxes"].append([x, y, x + w, y + h])
        record["labels"].append(category_map[int(entry["category_id"])])
        record["crowd"].append(bool(entry.get("iscrowd", 0)))

    ordered = [images[key] for key in sorted(images)]
    return CocoDataset(ordered, image_root, category_map, class_names)
