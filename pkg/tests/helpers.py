"""Small readers shared by several test modules."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def end_hd_by_method(run: Path) -> dict[str, np.ndarray]:
    rows = read_csv(run / "per_cine.csv")
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["method"], []).append(float(r["end_hd_mm"]))
    return {k: np.array(v) for k, v in out.items()}
