"""Writing and reading simulation artifacts."""

from __future__ import annotations

import csv
import enum
import io
import json
from pathlib import Path
from typing import Any, Iterable, Sequence, TextIO

from .engine import DispatchRecord, KpiSet, SimResult, SliceRecord, kpis_from_artifacts
from .protocol import dumps_record


class Format(str, enum.Enum):
    TABLE = "table"
    CSV = "csv"
    JSON_LINES = "json-lines"


EXTENSIONS = {Format.TABLE: "txt", Format.CSV: "csv", Format.JSON_LINES: "jsonl"}


def render(rows: Sequence[dict[str, Any]], fmt: Format) -> str:
    if fmt is Format.JSON_LINES:
        return "".join(dumps_record(r) + "\n" for r in rows)
    if not rows:
        return ""
    cols = list(rows[0])
    if fmt is Format.CSV:
        buf = io.StringIO()
        w = csv.DictWriter(buf, cols, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    cells = [cols] + [[_cell(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "".join(" ".join(v.rjust(w) for v, w in zip(row, widths)) + "\n" for row in cells)


def _cell(v: Any) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def dispatch_rows(result: SimResult) -> list[dict[str, int]]:
    return [d.row() for d in result.dispatch]


def slice_rows(result: SimResult) -> list[dict[str, int]]:
    return [s.row() for s in result.slices]


def trace_lines(result: SimResult) -> list[str]:
    return [dumps_record(r) for r in result.trace]


def artifact_lines(result: SimResult) -> dict[str, list[str]]:
    """The byte-level content replay compares."""
    return {
        "trace": trace_lines(result),
        "dispatch": render(dispatch_rows(result), Format.CSV).splitlines(),
        "slices": render(slice_rows(result), Format.CSV).splitlines(),
    }


def kpi_json(kpis: KpiSet) -> str:
    return json.dumps(kpis.to_dict(), sort_keys=True, indent=2) + "\n"


def meta(result: SimResult) -> dict[str, Any]:
    return {
        "scenario": result.config.name,
        "seed": result.config.seed,
        "horizon_slots": result.config.horizon_slots,
        "storage_capacity": result.storage_capacity,
        "num_classes": result.num_classes,
    }


def write_artifacts(result: SimResult, out_dir: str | Path, fmt: Format = Format.CSV) -> dict[str, Path]:
    """Dispatch table, message trace and KPI summary, plus slice table, events and run metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = EXTENSIONS[fmt]
    paths = {
        "dispatch": out / f"dispatch.{ext}",
        "trace": out / "trace.jsonl",
        "kpis": out / "kpis.json",
        "slices": out / f"slices.{ext}",
        "events": out / "events.jsonl",
        "meta": out / "meta.json",
    }
    paths["dispatch"].write_text(render(dispatch_rows(result), fmt))
    paths["trace"].write_text("".join(line + "\n" for line in trace_lines(result)))
    paths["kpis"].write_text(kpi_json(result.kpis))
    paths["slices"].write_text(render(slice_rows(result), fmt))
    paths["events"].write_text("".join(dumps_record(e) + "\n" for e in result.events))
    paths["meta"].write_text(json.dumps(meta(result), sort_keys=True, indent=2) + "\n")
    return paths


def read_rows(path: str | Path) -> list[dict[str, Any]]:
    """Read a csv or json-lines table written by :func:`write_artifacts`."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    if path.suffix == ".csv":
        return list(csv.DictReader(io.StringIO(text)))
    lines = [l.split() for l in text.splitlines() if l.strip()]
    return [dict(zip(lines[0], row)) for row in lines[1:]]


def kpis_from_dir(out_dir: str | Path) -> KpiSet:
    """Recompute KPIs from artifacts on disk, without the simulator state."""
    out = Path(out_dir)
    m = json.loads((out / "meta.json").read_text())
    trace = read_rows(out / "trace.jsonl")
    disp_path = next(p for p in sorted(out.glob("dispatch.*")))
    slice_path = next(p for p in sorted(out.glob("slices.*")))
    dispatch = [DispatchRecord.from_row(r) for r in read_rows(disp_path)]
    slices = [SliceRecord.from_row(r) for r in read_rows(slice_path)]
    return kpis_from_artifacts(trace, dispatch, slices, m["storage_capacity"], m["num_classes"])
