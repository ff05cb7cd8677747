"""Cine sequences and their directory format.

A cine directory holds ``manifest.txt`` (key=value), frames as
``frame_000.aat`` ..., the ED annotation ``ed_mask.pgm`` and, for synthetic
data, ground-truth ``mask_000.pgm`` ... and pairwise flows ``flow_001.aat``
... (flow_n maps frame n back to frame n-1).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .flow import FlowField
from .io import FormatError, format_keyvalue, read_keyvalue, read_pgm, read_tensor, write_pgm, write_tensor


@dataclass
class CineSequence:
    frames: list[np.ndarray]
    pixel_spacing: float
    ed_mask: np.ndarray
    ed_index: int = 0
    truth_masks: list[np.ndarray] | None = None
    truth_flows: list[FlowField] | None = None
    cine_id: str = "cine"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ValueError("a cine needs at least 2 frames")
        grid = self.frames[0].shape
        if any(f.shape != grid for f in self.frames):
            raise ValueError("all frames must share one grid")
        if self.ed_index != 0:
            raise ValueError("the ED frame must be frame 0")
        if self.pixel_spacing <= 0:
            raise ValueError("pixel_spacing must be positive")
        if self.ed_mask.shape != grid:
            raise ValueError("ED mask grid differs from the frame grid")
        if self.truth_masks is not None and len(self.truth_masks) != len(self.frames):
            raise ValueError("need one ground-truth mask per frame")
        if self.truth_flows is not None and len(self.truth_flows) != len(self.frames) - 1:
            raise ValueError("need one ground-truth flow per consecutive pair")

    @property
    def grid(self) -> tuple[int, int]:
        return self.frames[0].shape

    def __len__(self) -> int:
        return len(self.frames)

    def weak_view(self) -> "CineSequence":
        """Copy carrying only frames and the ED annotation."""
        return replace(self, truth_masks=None, truth_flows=None, extra={})


def normalize(img: np.ndarray) -> np.ndarray:
    """Zero mean, unit standard deviation."""
    img = np.asarray(img, dtype=np.float64)
    sd = img.std()
    return (img - img.mean()) / (sd if sd > 0 else 1.0)


def write_cine(cine: CineSequence, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    h, w = cine.grid
    manifest = {
        "cine_id": cine.cine_id,
        "frames": len(cine),
        "height": h,
        "width": w,
        "spacing_mm": repr(float(cine.pixel_spacing)),
        "ed_mask": "ed_mask.pgm",
        "truth_masks": "yes" if cine.truth_masks is not None else "no",
        "truth_flows": "yes" if cine.truth_flows is not None else "no",
    }
    for i, f in enumerate(cine.frames):
        write_tensor(d / f"frame_{i:03d}.aat", f)
    write_pgm(d / "ed_mask.pgm", cine.ed_mask)
    if cine.truth_masks is not None:
        for i, m in enumerate(cine.truth_masks):
            write_pgm(d / f"mask_{i:03d}.pgm", m)
    if cine.truth_flows is not None:
        for i, fl in enumerate(cine.truth_flows, start=1):
            write_tensor(d / f"flow_{i:03d}.aat", fl.numpy())
    (d / "manifest.txt").write_text(format_keyvalue(manifest))
    return d


def read_cine(directory) -> CineSequence:
    d = Path(directory)
    mpath = d / "manifest.txt"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.txt in {d}")
    m = read_keyvalue(mpath)
    try:
        n = int(m["frames"])
        h, w = int(m["height"]), int(m["width"])
        spacing = float(m["spacing_mm"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{mpath}: missing or invalid frames/height/width/spacing_mm") from exc
    frames = [read_tensor(d / f"frame_{i:03d}.aat") for i in range(n)]
    for f in frames:
        if f.shape != (h, w):
            raise FormatError(f"{d}: frame shape {f.shape} != manifest {(h, w)}")
    ed = read_pgm(d / m.get("ed_mask", "ed_mask.pgm"))
    masks = None
    if m.get("truth_masks", "no") == "yes":
        masks = [read_pgm(d / f"mask_{i:03d}.pgm") for i in range(n)]
    flows = None
    if m.get("truth_flows", "no") == "yes":
        flows = [FlowField.from_array(read_tensor(d / f"flow_{i:03d}.aat")) for i in range(1, n)]
    try:
        return CineSequence(frames, spacing, ed, truth_masks=masks, truth_flows=flows,
                            cine_id=m.get("cine_id", d.name))
    except ValueError as exc:
        raise FormatError(f"{d}: {exc}") from exc
