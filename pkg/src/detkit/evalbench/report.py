"""Benchmark records and the standard thirteen-column comparison table."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, fields

COLUMNS = ["Model", "#ep", "AP", "AP50", "AP75", "APS", "APM", "APL",
           "#params", "GFLOPs", "FPS", "Memory", "wall time"]

_AP_FIELDS = ("ap", "ap50", "ap75", "ap_s", "ap_m", "ap_l")


@dataclass
class BenchmarkRecord:
    """One comparison-table row; AP fields are fractions in [0, 1].

    Undefined metrics (e.g. no large objects in the eval set) are None and
    render as "-"; peak_memory is bytes or None when not measurable.
    """

    model_name: str
    epochs: int
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    params: int
    flops_mean: float
    flops_std: float
    fps: float
    peak_memory: int | None
    wall_hours: float

    def __post_init__(self):
        for name in _AP_FIELDS:
            value = getattr(self, name)
            if value is not None and math.isnan(value):
                setattr(self, name, None)
                continue
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]; got {value}")
        if self.flops_std < 0:
            raise ValueError(f"flops_std must be >= 0; got {self.flops_std}")


def _format_ap(value: float | None) -> str:
    return "-" if value is None else f"{value * 100:.1f}"


def _format_memory(value: int | None) -> str:
    return "n/a" if value is None else f"{value / 2**20:.0f}MB"


def _markdown_row(record: BenchmarkRecord) -> list[str]:
    return [
        record.model_name,
        str(record.epochs),
        _format_ap(record.ap),
        _format_ap(record.ap50),
        _format_ap(record.ap75),
        _format_ap(record.ap_s),
        _format_ap(record.ap_m),
        _format_ap(record.ap_l),
        f"{record.params / 1e6:.1f}M",
        f"{record.flops_mean / 1e9:.1f} ± {record.flops_std / 1e9:.1f}",
        f"{record.fps:.1f}",
        _format_memory(record.peak_memory),
        f"{record.wall_hours:.2f}h",
    ]


def emit_report(records: list[BenchmarkRecord], format: str = "markdown") -> str:
    """Render the comparison table; column order is fixed."""
    if not records:
        raise ValueError("need at least one record")
    if format == "markdown":
        lines = ["| " + " | ".join(COLUMNS) + " |",
                 "|" + "|".join("---" for _ in COLUMNS) + "|"]
        for record in records:
            lines.append("| " + " | ".join(_markdown_row(record)) + " |")
        return "\n".join(lines) + "\n"
    if format == "csv":
        buffer = io.StringIO()
        names = [f.name for f in fields(BenchmarkRecord)]
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(names)
        for record in records:
            row = []
            for name in names:
                value = getattr(record, name)
                row.append("" if value is None else value)
            writer.writerow(row)
        return buffer.getvalue()
    raise ValueError(f"unknown format {format!r}; use markdown or csv")


def parse_report_csv(text: str) -> list[BenchmarkRecord]:
    """Inverse of emit_report(format="csv"); exact float round trip."""
    records = []
    for row in csv.DictReader(io.StringIO(text)):
        records.append(BenchmarkRecord(
            model_name=row["model_name"],
            epochs=int(row["epochs"]),
            ap=None if row["ap"] == "" else float(row["ap"]),
            ap50=None if row["ap50"] == "" else float(row["ap50"]),
            ap75=None if row["ap75"] == "" else float(row["ap75"]),
            ap_s=None if row["ap_s"] == "" else float(row["ap_s"]),
            ap_m=None if row["ap_m"] == "" else float(row["ap_m"]),
            ap_l=None if row["ap_l"] == "" else float(row["ap_l"]),
            params=int(row["params"]),
            flops_mean=float(row["flops_mean"]),
            flops_std=float(row["flops_std"]),
            fps=float(row["fps"]),
            peak_memory=None if row["peak_memory"] == "" else int(row["peak_memory"]),
            wall_hours=float(row["wall_hours"]),
        ))
    return records
