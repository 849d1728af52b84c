"""Datasets, augmentation, and batching."""

from detkit.data.coco import CocoDataset, MissingImageError, Sample, SchemaError, load_coco_annotations
from detkit.data.collate import Batch, collate_batch
from detkit.data.shapes import (
    SHAPE_CLASSES,
    ShapesDataset,
    dump_shapes_dataset,
    generate_shapes_dataset,
    reload_shapes_dataset,
)
from detkit.data.transforms import random_crop_then_resize, resize_shortest_edge, short_edge_choices

__all__ = [
    "Sample",
    "CocoDataset",
    "load_coco_annotations",
    "SchemaError",
    "MissingImageError",
    "SHAPE_CLASSES",
    "ShapesDataset",
    "generate_shapes_dataset",
    "dump_shapes_dataset",
    "reload_shapes_dataset",
    "resize_shortest_edge",
    "random_crop_then_resize",
    "short_edge_choices",
    "Batch",
    "collate_batch",
]
