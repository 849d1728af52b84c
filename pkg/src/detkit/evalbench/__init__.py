from .analysis import (
    FlopsEstimate,
    FpsResult,
    UnregisteredLayer,
    count_parameters,
    device_peak_memory,
    estimate_flops,
    measure_fps,
    register_flop_rule,
)
from .coco_eval import (
    AREA_RANGES,
    IOU_THRESHOLDS,
    EmptyGroundTruth,
    coco_ap_evaluate,
    results_to_coco_json,
)
from .report import COLUMNS, BenchmarkRecord, emit_report, parse_report_csv
from .visualize import WriteError, class_color, visualize_predictions

__all__ = [
    "AREA_RANGES",
    "BenchmarkRecord",
    "COLUMNS",
    "EmptyGroundTruth",
    "FlopsEstimate",
    "FpsResult",
    "IOU_THRESHOLDS",
    "UnregisteredLayer",
    "WriteError",
    "class_color",
    "coco_ap_evaluate",
    "count_parameters",
    "device_peak_memory",
    "emit_report",
    "estimate_flops",
    "measure_fps",
    "parse_report_csv",
    "register_flop_rule",
    "results_to_coco_json",
    "visualize_predictions",
]
