"""Method-comparison tables: per-frame, per-cine and aggregate CSV plus a text table."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import atomic_write
from .metrics import wilcoxon_signed_rank
from .tracker import MetricTable

METHODS = ("Baseline", "Baseline+anat", "Baseline+recon", "AATracker")


def _f(x: float) -> str:
    return f"{x:.6f}"


@dataclass
class MethodResults:
    name: str
    tables: list[MetricTable]  # one per cine, same cine order for every method

    def end(self, key: str) -> np.ndarray:
        return np.array([getattr(t.end, key) for t in self.tables])

    def per_cine_mean(self, key: str) -> np.ndarray:
        return np.array([getattr(t.mean(), key) for t in self.tables])


def _csv(rows: list[list[str]]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue().encode("ascii")


def per_frame_rows(results: list[MethodResults]) -> list[list[str]]:
    rows = [["cine_id", "method", "frame", "dsc", "hd_mm", "assd_mm"]]
    for res in results:
        for t in res.tables:
            for f, r in zip(t.frames, t.reports):
                rows.append([t.cine_id, res.name, str(f), _f(r.dsc), _f(r.hd_mm), _f(r.assd_mm)])
    return rows


def per_cine_rows(results: list[MethodResults]) -> list[list[str]]:
    rows = [["cine_id", "method", "end_dsc", "end_hd_mm", "end_assd_mm", "mean_dsc", "mean_hd_mm", "mean_assd_mm"]]
    for res in results:
        for t in res.tables:
            e, m = t.end, t.mean()
            rows.append([t.cine_id, res.name, _f(e.dsc), _f(e.hd_mm), _f(e.assd_mm),
                         _f(m.dsc), _f(m.hd_mm), _f(m.assd_mm)])
    return rows


def p_value_or_nan(x, y) -> float:
    try:
        return wilcoxon_signed_rank(x, y)
    except ValueError:
        return float("nan")


def summary_rows(results: list[MethodResults], reference: str = "Baseline") -> list[list[str]]:
    """Aggregate row per method.

    Means and standard deviations are over cines of each cine's mean across
    tracked frames; medians and the paired Wilcoxon p-value use end-frame HD.
    """
    ref = next((r for r in results if r.name == reference), None)
    rows = [["method", "dsc_mean", "dsc_std", "hd_mean_mm", "hd_std_mm", "assd_mean_mm", "assd_std_mm",
             "end_dsc_median", "end_hd_median_mm", "end_assd_median_mm", "p_end_hd_vs_" + reference]]
    for res in results:
        vals = []
        for key in ("dsc", "hd_mm", "assd_mm"):
            c = res.per_cine_mean(key)
            vals += [_f(c.mean()), _f(c.std())]
        vals += [_f(float(np.median(res.end(k)))) for k in ("dsc", "hd_mm", "assd_mm")]
        if ref is None or res is ref:
            p = ""
        else:
            p = _f(p_value_or_nan(ref.end("hd_mm"), res.end("hd_mm")))
        rows.append([res.name] + vals + [p])
    return rows


def text_table(results: list[MethodResults]) -> str:
    lines = [f"{'Method':<16} {'DSC':>16} {'HD (mm)':>16} {'ASSD (mm)':>16}"]
    for res in results:
        cells = []
        for key in ("dsc", "hd_mm", "assd_mm"):
            c = res.per_cine_mean(key)
            cells.append(f"{c.mean():.3f} ({c.std():.3f})")
        lines.append(f"{res.name:<16} {cells[0]:>16} {cells[1]:>16} {cells[2]:>16}")
    return "\n".join(lines) + "\n"


def write_report(results: list[MethodResults], out_dir, reference: str = "Baseline") -> dict[str, Path]:
    out = Path(out_dir)
    paths = {
        "report": out / "report.csv",
        "per_cine": out / "per_cine.csv",
        "per_frame": out / "per_frame.csv",
        "table": out / "report.txt",
    }
    atomic_write(paths["report"], _csv(summary_rows(results, reference)))
    atomic_write(paths["per_cine"], _csv(per_cine_rows(results)))
    atomic_write(paths["per_frame"], _csv(per_frame_rows(results)))
    atomic_write(paths["table"], text_table(results).encode("ascii"))
    return paths


def read_report(path) -> dict[str, dict[str, str]]:
    """report.csv keyed by method name."""
    with open(path, newline="") as fh:
        return {row["method"]: row for row in csv.DictReader(fh)}
