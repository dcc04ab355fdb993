"""Table rendering (CSV, JSON, markdown) with per-problem raw values.

Cells show mean ± population standard deviation over problems, in percent
with two decimals. Missing values are rendered as ``absent``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError

METHOD_ORDER = ("1nn", "normal", "early_stop", "trades_best", "trades_recom", "trades_both")
METHOD_LABELS = {"1nn": "1NN", "normal": "Normal", "early_stop": "Early Stop",
                 "trades_best": "TRADES-Best", "trades_recom": "TRADES-Recom",
                 "trades_both": "TRADES-Both"}
METRICS = ("clean_acc", "ra_l2_train", "ra_l2_test", "ra_linf_train", "ra_linf_test",
           "ra_combined_train", "ra_combined_test")
METRIC_LABELS = {"clean_acc": "Clean Acc", "ra_l2_train": "l2 RA (Train)", "ra_l2_test": "l2 RA (Test)",
                 "ra_linf_train": "linf RA (Train)", "ra_linf_test": "linf RA (Test)",
                 "ra_combined_train": "linf + l2 RA (Train)", "ra_combined_test": "linf + l2 RA (Test)"}
ABSENT = "absent"
_CELL = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*±\s*(\d+(?:\.\d+)?)\s*$")


@dataclass
class MethodResult:
    """Per-problem values of every metric for one method.

    ``values[metric][problem]`` is a fraction in [0, 1]; ``modes`` records
    how each metric was measured (exact, certified, empirical).
    """

    method: str
    values: dict = field(default_factory=dict)
    modes: dict = field(default_factory=dict)

    def set(self, problem: str, metric: str, value: float, mode: str = ""):
        if metric not in METRICS:
            raise ConfigurationError(f"unknown metric {metric!r}")
        value = float(value)
        if not 0.0 <= value <= 1.0:
            raise ConfigurationError(f"{metric} = {value} is not a fraction")
        self.values.setdefault(metric, {})[problem] = value
        if mode:
            self.modes[metric] = mode

    def stats(self, metric: str):
        """(mean, population std) or None when nothing was recorded."""
        vals = list(self.values.get(metric, {}).values())
        if not vals:
            return None
        arr = np.array(vals)
        return float(arr.mean()), float(arr.std())

    @property
    def problems(self) -> list[str]:
        return sorted({p for per in self.values.values() for p in per})


def format_cell(stats) -> str:
    if stats is None:
        return ABSENT
    mean, std = stats
    return f"{100 * mean:.2f} ± {100 * std:.2f}"


def parse_cell(text: str):
    """Inverse of ``format_cell``: fractions (mean, std) or None."""
    if text.strip() == ABSENT:
        return None
    m = _CELL.match(text)
    if not m:
        raise ConfigurationError(f"not a report cell: {text!r}")
    return float(m.group(1)) / 100, float(m.group(2)) / 100


def _ordered(results):
    if not results:
        raise ConfigurationError("a report needs at least one method")
    rank = {m: i for i, m in enumerate(METHOD_ORDER)}
    return sorted(results, key=lambda r: (rank.get(r.method, len(rank)), r.method))


def _label(method):
    return METHOD_LABELS.get(method, method)


def render_report(results, fmt: str = "md") -> str:
    """Metrics as rows, methods as columns."""
    results = _ordered(results)
    header = ["metric"] + [_label(r.method) for r in results]
    rows = [[METRIC_LABELS[m]] + [format_cell(r.stats(m)) for r in results] for m in METRICS]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "json":
        doc = {"methods": [], "order": [r.method for r in results]}
        for r in results:
            cells = {}
            for m in METRICS:
                s = r.stats(m)
                cells[m] = None if s is None else {"mean": s[0], "std": s[1], "cell": format_cell(s),
                                                   "mode": r.modes.get(m, ""),
                                                   "n_problems": len(r.values[m])}
            doc["methods"].append({"method": r.method, "label": _label(r.method), "metrics": cells})
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if fmt == "md":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(row) + " |" for row in rows]
        return "\n".join(lines) + "\n"
    raise ConfigurationError(f"unknown report format {fmt!r}")


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def write_report(results, outdir) -> dict:
    """Write report.{csv,json,md} plus raw/{problem}/{method}.jsonl; returns the paths."""
    outdir = Path(outdir)
    paths = {}
    for fmt in ("csv", "json", "md"):
        paths[fmt] = outdir / f"report.{fmt}"
        atomic_write(paths[fmt], render_report(results, fmt))
    for r in results:
        for problem in r.problems:
            lines = []
            for m in METRICS:
                v = r.values.get(m, {}).get(problem)
                if v is not None:
                    lines.append(json.dumps({"metric": m, "value": v, "mode": r.modes.get(m, "")},
                                            sort_keys=True))
            atomic_write(outdir / "raw" / problem / f"{r.method}.jsonl", "\n".join(lines) + "\n")
    return paths


def load_raw(outdir) -> list[MethodResult]:
    """Rebuild MethodResults from the raw per-problem files."""
    found = {}
    for f in sorted(Path(outdir, "raw").glob("*/*.jsonl")):
        res = found.setdefault(f.stem, MethodResult(f.stem))
        for line in f.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                res.set(f.parent.name, rec["metric"], rec["value"], rec.get("mode", ""))
    return list(found.values())


def percent(x: float) -> str:
    return "nan" if math.isnan(x) else f"{100 * x:.2f}"
