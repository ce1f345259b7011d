"""Region (J) and contour (F) accuracy, sequence reports and threshold sweeps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import EvalError, ShapeError

_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    p = getattr(pred, "data", pred)
    g = getattr(gt, "data", gt)
    p = np.asarray(p, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs ground truth {g.shape}")
    return p, g


def default_tolerance(shape) -> int:
    """0.8% of the image diagonal, rounded up."""
    h, w = shape[:2]
    return int(math.ceil(0.008 * math.hypot(h, w)))


def j_measure(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def boundary(mask) -> np.ndarray:
    """Mask pixels removed by a 3x3 cross erosion; outside the image counts as background."""
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def _matched_fraction(src: np.ndarray, dst: np.ndarray, tol: float) -> float:
    """Fraction of ``src`` pixels within Euclidean distance ``tol`` of a ``dst`` pixel."""
    dist = ndimage.distance_transform_edt(~dst)
    return np.count_nonzero(dist[src] <= tol) / np.count_nonzero(src)


def boundary_precision_recall(pred, gt, tolerance=None) -> tuple[float, float]:
    p, g = _pair(pred, gt)
    tol = default_tolerance(p.shape) if tolerance is None else tolerance
    bp, bg = boundary(p), boundary(g)
    if not bp.any() or not bg.any():
        both = not bp.any() and not bg.any()
        return float(both), float(both)
    return _matched_fraction(bp, bg, tol), _matched_fraction(bg, bp, tol)


def f_measure(pred, gt, tolerance=None) -> float:
    """Harmonic mean of boundary precision and recall within ``tolerance`` pixels."""
    prec, rec = boundary_precision_recall(pred, gt, tolerance)
    if prec + rec == 0:
        return 0.0
    return 2 * prec * rec / (prec + rec)


def jf(pred, gt, tolerance=None) -> float:
    return (j_measure(pred, gt) + f_measure(pred, gt, tolerance)) / 2


@dataclass
class SegmentationReport:
    sequence: str
    frames: list[int]
    per_frame: dict[int, dict[int, tuple[float, float]]]   # object -> frame -> (J, F)
    j_per_object: dict[int, float]
    f_per_object: dict[int, float]
    J_M: float
    F_M: float
    JF: float
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_frame"] = {
            str(obj): {str(fr): {"J": j, "F": f} for fr, (j, f) in frames.items()}
            for obj, frames in self.per_frame.items()}
        d["j_per_object"] = {str(k): v for k, v in self.j_per_object.items()}
        d["f_per_object"] = {str(k): v for k, v in self.f_per_object.items()}
        d["J&F"] = d.pop("JF")
        return d

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def summary(self) -> str:
        return f"J: {self.J_M:.4f}  F: {self.F_M:.4f}  J&F: {self.JF:.4f}"


def _pred_lookup(preds) -> dict[int, np.ndarray]:
    if isinstance(preds, dict):
        return {int(k): np.asarray(v) for k, v in preds.items()}
    return {i: np.asarray(v) for i, v in enumerate(preds)}


def evaluate_sequence(preds, dataset, tolerance=None, config: dict | None = None,
                      ) -> SegmentationReport:
    """Per-object J/F over every annotated frame after the first.

    ``preds`` maps frame index to a label raster (or is a list indexed by
    position in the dataset).
    """
    lookup = _pred_lookup(preds) if isinstance(preds, dict) else {
        f.index: np.asarray(p) for f, p in zip(dataset.frames, preds)}
    objects = dataset.object_ids
    per_frame = {k: {} for k in objects}
    frames = []
    for fr in dataset.frames[1:]:
        gt = fr.gt_mask
        if gt is None:
            continue
        if fr.index not in lookup:
            raise EvalError(fr.index)
        pred = lookup[fr.index]
        if pred.shape != gt.shape:
            raise ShapeError(f"frame {fr.index}: prediction {pred.shape} vs gt {gt.shape}")
        frames.append(fr.index)
        tol = default_tolerance(gt.shape) if tolerance is None else tolerance
        for k in objects:
            per_frame[k][fr.index] = (j_measure(pred == k, gt == k),
                                      f_measure(pred == k, gt == k, tol))
    if not frames:
        raise EvalError(-1, "no annotated frames beyond frame 0")
    j_obj = {k: float(np.mean([v[0] for v in per_frame[k].values()])) for k in objects}
    f_obj = {k: float(np.mean([v[1] for v in per_frame[k].values()])) for k in objects}
    j_m = float(np.mean(list(j_obj.values())))
    f_m = float(np.mean(list(f_obj.values())))
    return SegmentationReport(dataset.name, frames, per_frame, j_obj, f_obj,
                              j_m, f_m, (j_m + f_m) / 2, dict(config or {}))


DEFAULT_SHIFTS = (300, 500, 700)
DEFAULT_ENTROPIES = (4, 6, 8)


@dataclass
class SweepTable:
    shifts: tuple
    entropies: tuple
    scores: np.ndarray      # len(shifts) x len(entropies) J&F

    def rows(self):
        for i, m in enumerate(self.shifts):
            for j, e in enumerate(self.entropies):
                yield m, e, float(self.scores[i, j])

    def format(self) -> str:
        head = "M \\ E | " + " | ".join(f"{e:>6g}" for e in self.entropies)
        lines = [head, "-" * len(head)]
        for i, m in enumerate(self.shifts):
            cells = " | ".join(f"{self.scores[i, j]:.4f}" for j in range(len(self.entropies)))
            lines.append(f"{m:>5g} | {cells}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"M": list(self.shifts), "E": list(self.entropies),
                "cells": [{"M": m, "E": e, "J&F": s} for m, e, s in self.rows()]}


def sweep(dataset, run, shifts=DEFAULT_SHIFTS, entropies=DEFAULT_ENTROPIES) -> SweepTable:
    """J&F for every (shift threshold, entropy threshold) cell.

    ``run(dataset, shift, entropy)`` must return a SegmentationReport.
    """
    shifts, entropies = tuple(shifts), tuple(entropies)
    if not shifts or not entropies:
        raise ValueError("sweep grid must be non-empty")
    scores = np.zeros((len(shifts), len(entropies)))
    for i, m in enumerate(shifts):
        for j, e in enumerate(entropies):
            scores[i, j] = run(dataset, m, e).JF
    return SweepTable(shifts, entropies, scores)
