"""Accuracy bookkeeping, timing benches and report rendering."""

from .metrics import COMBINERS, MODES, RobustResult, clean_accuracy, combined_ra, robust_accuracy
from .report import (METHOD_ORDER, METRICS, MethodResult, format_cell, load_raw, parse_cell,
                     render_report, write_report)
from .timing import BENCH_METHODS, TimingRecord, bench_timing, hardware_note

__all__ = [
    "BENCH_METHODS", "COMBINERS", "METHOD_ORDER", "METRICS", "MODES", "MethodResult",
    "RobustResult", "TimingRecord", "bench_timing", "clean_accuracy", "combined_ra",
    "format_cell", "hardware_note", "load_raw", "parse_cell", "render_report",
    "robust_accuracy", "write_report",
]
