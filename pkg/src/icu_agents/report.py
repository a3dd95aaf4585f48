"""Tabular result emission in CSV, markdown and schema-checked JSON."""

from __future__ import annotations

import csv
import io
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from .core import HarnessError
from .metrics import MetricReport, MetricValue

COLUMNS = ("backbone", "protocol", "strategy", "modalities", "auroc", "auroc_ci", "auprc", "auprc_ci",
           "ece", "n", "excluded")
FORMATS = ("csv", "markdown", "structured")

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "rows"],
    "properties": {
        "schema_version": {"const": 1},
        "rows": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["backbone", "protocol", "strategy", "modalities", "auroc", "auprc", "ece",
                             "n_samples", "n_error_records", "ci_method"],
                "properties": {
                    "backbone": {"type": "string"},
                    "protocol": {"type": "string"},
                    "strategy": {"type": "string"},
                    "modalities": {"type": "array", "items": {"enum": ["PS", "EHR", "CXR", "RR"]}},
                    "auroc": {"$ref": "#/$defs/metric"},
                    "auprc": {"$ref": "#/$defs/metric"},
                    "ece": {"$ref": "#/$defs/metric"},
                    "n_samples": {"type": "integer", "minimum": 0},
                    "n_error_records": {"type": "integer", "minimum": 0},
                    "ci_method": {"type": "string"},
                },
            },
        },
    },
    "$defs": {
        "metric": {
            "type": "object",
            "required": ["point", "ci_low", "ci_high"],
            "properties": {
                "point": {"type": ["number", "null"]},
                "ci_low": {"type": ["number", "null"]},
                "ci_high": {"type": ["number", "null"]},
            },
        }
    },
}


class ReportError(HarnessError):
    pass


@dataclass(frozen=True)
class ReportRow:
    backbone: str
    protocol: str
    strategy: str
    modalities: tuple[str, ...]
    report: MetricReport


def _num(x: Optional[float]) -> str:
    return "NA" if x is None else f"{x:.3f}"


def _ci(v: MetricValue) -> str:
    if v.ci_low is None or v.ci_high is None:
        return "NA"
    return f"{v.ci_low:.3f} - {v.ci_high:.3f}"


def _cells(row: ReportRow) -> list[str]:
    r = row.report
    return [row.backbone, row.protocol, row.strategy, ",".join(row.modalities), _num(r.auroc.point),
            _ci(r.auroc), _num(r.auprc.point), _ci(r.auprc), _num(r.ece.point), str(r.n_samples),
            str(r.n_error_records)]


def render_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for row in rows:
        writer.writerow(_cells(row))
    return buf.getvalue()


def render_markdown(rows: Sequence[ReportRow]) -> str:
    header = ["Backbone", "Protocol", "Strategy", "Modalities", "AUROC", "AUPRC", "ECE", "n", "Excluded"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        r = row.report

        def cell(v: MetricValue) -> str:
            return _num(v.point) if _ci(v) == "NA" else f"{_num(v.point)} ({_ci(v)})"

        values = [row.backbone, row.protocol, row.strategy, ",".join(row.modalities), cell(r.auroc),
                  cell(r.auprc), _num(r.ece.point), str(r.n_samples), str(r.n_error_records)]
        lines.append("| " + " | ".join(values) + " |")
    methods = sorted({row.report.ci_method for row in rows if row.report.ci_method})
    if methods:
        lines.append("")
        lines.append("Intervals: " + "; ".join(methods) + ".")
    return "\n".join(lines) + "\n"


def render_structured(rows: Sequence[ReportRow]) -> str:
    payload = {"schema_version": 1, "rows": []}
    for row in rows:
        d = row.report.to_dict()
        payload["rows"].append({
            "backbone": row.backbone,
            "protocol": row.protocol,
            "strategy": row.strategy,
            "modalities": list(row.modalities),
            "auroc": d["auroc"],
            "auprc": d["auprc"],
            "ece": d["ece"],
            "n_samples": d["n_samples"],
            "n_error_records": d["n_error_records"],
            "ci_method": d["ci_method"],
        })
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


RENDERERS = {"csv": render_csv, "markdown": render_markdown, "structured": render_structured}
SUFFIXES = {"csv": ".csv", "markdown": ".md", "structured": ".json"}


def emit_report(rows: Sequence[ReportRow], fmt: str, path) -> Path:
    """Write ``rows`` in one format; ``path`` without a suffix gets the format's suffix."""
    if not rows:
        raise ReportError("nothing to report")
    if fmt not in RENDERERS:
        raise ReportError(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")
    path = Path(path)
    if not path.suffix:
        path = path.with_suffix(SUFFIXES[fmt])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(RENDERERS[fmt](rows), encoding="utf-8")
    return path


_CELL = re.compile(r"^(NA|-?\d+\.\d{3})(?: \((-?\d+\.\d{3}) - (-?\d+\.\d{3})\))?$")


def parse_markdown(text: str) -> list[dict]:
    """Read a table written by ``render_markdown`` back into numbers."""
    rows = []
    for line in text.splitlines():
        if not line.startswith("| ") or line.startswith("| Backbone"):
            continue
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        parsed = {"backbone": cells[0], "protocol": cells[1], "strategy": cells[2],
                  "modalities": tuple(cells[3].split(",")) if cells[3] else ()}
        for name, cell in zip(("auroc", "auprc", "ece"), cells[4:7]):
            m = _CELL.match(cell)
            if not m:
                raise ReportError(f"unparseable cell {cell!r}")
            point, low, high = m.groups()
            parsed[name] = None if point == "NA" else float(point)
            parsed[f"{name}_ci"] = (float(low), float(high)) if low else None
        parsed["n"] = int(cells[7])
        parsed["excluded"] = int(cells[8])
        rows.append(parsed)
    return rows
