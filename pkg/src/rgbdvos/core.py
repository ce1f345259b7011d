"""Domain types, mask geometry and sequence ingestion."""

from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import AnnotationError, EmptyMaskError, IngestError, ShapeError

FOREGROUND = 1
BACKGROUND = 0

# Frame indices whose ground truth was read while auditing is active.
_gt_audit: list[list[int]] = []


@contextlib.contextmanager
def audit_gt_access() -> Iterator[list[int]]:
    """Record every ``RGBDFrame.gt_mask`` read inside the block."""
    log: list[int] = []
    _gt_audit.append(log)
    try:
        yield log
    finally:
        _gt_audit.remove(log)


class RGBDFrame:
    """One timestep: aligned color image, depth map in mm, optional labels."""

    __slots__ = ("index", "rgb", "depth", "_gt_mask")

    def __init__(self, index: int, rgb: np.ndarray, depth: np.ndarray,
                 gt_mask: np.ndarray | None = None):
        rgb = np.asarray(rgb)
        depth = np.asarray(depth)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ShapeError(f"rgb must be HxWx3, got {rgb.shape}")
        if depth.shape != rgb.shape[:2]:
            raise ShapeError(f"depth {depth.shape} does not match rgb {rgb.shape[:2]}")
        if gt_mask is not None:
            gt_mask = np.asarray(gt_mask)
            if gt_mask.shape != depth.shape:
                raise ShapeError(f"mask {gt_mask.shape} does not match rgb {rgb.shape[:2]}")
            gt_mask = _readonly(gt_mask.astype(np.uint8, copy=False))
        if np.any(depth < 0):
            raise ValueError("depth values must be non-negative")
        self.index = int(index)
        self.rgb = _readonly(rgb.astype(np.uint8, copy=False))
        self.depth = _readonly(depth.astype(np.uint16, copy=False))
        self._gt_mask = gt_mask

    @property
    def gt_mask(self) -> np.ndarray | None:
        for log in _gt_audit:
            log.append(self.index)
        return self._gt_mask

    @property
    def has_gt(self) -> bool:
        return self._gt_mask is not None

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def __repr__(self):
        return f"RGBDFrame(index={self.index}, shape={self.shape}, gt={self.has_gt})"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BinaryMask:
    data: np.ndarray
    object_id: int = 1

    def __post_init__(self):
        object.__setattr__(self, "data", np.asarray(self.data, dtype=bool))
        if self.data.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got {self.data.shape}")
        if self.object_id < 1:
            raise ValueError("object_id must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __bool__(self):
        return bool(self.data.any())


class BoundingBox(NamedTuple):
    """Inclusive pixel box."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return max(self.width, 0) * max(self.height, 0)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def clip(self, height: int, width: int) -> "BoundingBox":
        return BoundingBox(max(self.x_min, 0), max(self.y_min, 0),
                           min(self.x_max, width - 1), min(self.y_max, height - 1))

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


class PromptPoint(NamedTuple):
    x: int
    y: int
    label: int = FOREGROUND


@dataclass(frozen=True)
class MixedPrompt:
    """A box plus labeled points in pixel coordinates.

    ``point_source`` and ``box_source`` record whether each part came from
    the current mask or from the mask memory.
    """

    box: BoundingBox
    points: tuple[PromptPoint, ...]
    point_source: str = "current"
    box_source: str = "current"

    def __post_init__(self):
        if not self.points:
            raise ValueError("a mixed prompt needs at least one point")
        if self.box.area < 1:
            raise ValueError(f"degenerate prompt box {self.box}")
        for p in self.points:
            if p.label not in (FOREGROUND, BACKGROUND):
                raise ValueError(f"bad point label {p.label}")

    def translate(self, dx: int, dy: int) -> "MixedPrompt":
        b = self.box
        return MixedPrompt(
            BoundingBox(b.x_min + dx, b.y_min + dy, b.x_max + dx, b.y_max + dy),
            tuple(PromptPoint(p.x + dx, p.y + dy, p.label) for p in self.points),
            self.point_source, self.box_source)


@dataclass
class SequenceDataset:
    frames: list[RGBDFrame]
    first_frame_annotation: np.ndarray
    object_count: int
    name: str = "sequence"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = [f.index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError("frame indices must be strictly increasing")
        ann = np.asarray(self.first_frame_annotation)
        if not (ann > 0).any():
            raise AnnotationError("first-frame annotation has no object")
        self.first_frame_annotation = _readonly(ann.astype(np.uint8, copy=False))

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i) -> RGBDFrame:
        return self.frames[i]

    @property
    def object_ids(self) -> list[int]:
        return list(range(1, self.object_count + 1))

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames[0].shape


def labels_to_masks(labels: np.ndarray, object_count: int | None = None) -> list[BinaryMask]:
    labels = np.asarray(labels)
    n = int(labels.max()) if object_count is None else object_count
    return [BinaryMask(labels == k, k) for k in range(1, n + 1)]


def masks_to_labels(masks, shape=None) -> np.ndarray:
    """Collapse per-object masks into one label raster; higher ids win overlaps."""
    masks = list(masks)
    if shape is None:
        shape = masks[0].shape
    out = np.zeros(shape, dtype=np.uint8)
    for m in sorted(masks, key=lambda m: m.object_id):
        out[m.data] = m.object_id
    return out


def _as_bool(mask) -> np.ndarray:
    return mask.data if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)


def mask_area(mask) -> int:
    return int(np.count_nonzero(_as_bool(mask)))


def largest_component(mask) -> np.ndarray:
    """Largest 4-connected component; ties go to the first in raster order."""
    data = _as_bool(mask)
    labels, n = ndimage.label(data)
    if n == 0:
        raise EmptyMaskError("mask has no true pixels")
    if n == 1:
        return labels == 1
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def mask_centroid(mask, mode: str = "component") -> tuple[float, float]:
    """Mean (x, y) of the largest 4-connected component, or of all pixels
    when ``mode="all"``."""
    data = _as_bool(mask)
    if not data.any():
        raise EmptyMaskError("centroid of an empty mask")
    if mode == "component":
        data = largest_component(data)
    elif mode != "all":
        raise ValueError(f"unknown centroid mode {mode!r}")
    ys, xs = np.nonzero(data)
    return float(xs.mean()), float(ys.mean())


def mask_bbox(mask) -> BoundingBox:
    data = _as_bool(mask)
    if not data.any():
        raise EmptyMaskError("bbox of an empty mask")
    rows = np.flatnonzero(data.any(axis=1))
    cols = np.flatnonzero(data.any(axis=0))
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def anchor_point(mask, mode: str = "component") -> PromptPoint:
    """Pixel on the mask closest to its centroid.

    The raw centroid of a concave blob can fall outside the blob; prompts
    need a point on the object.
    """
    data = _as_bool(mask)
    region = largest_component(data) if mode == "component" else data
    cx, cy = mask_centroid(region, mode="all")
    ys, xs = np.nonzero(region)
    d2 = (xs - cx) ** 2 + (ys - cy) ** 2
    i = int(np.argmin(d2))
    return PromptPoint(int(xs[i]), int(ys[i]), FOREGROUND)


# --- ingestion -----------------------------------------------------------

def _frame_files(directory: str) -> dict[int, str]:
    out = {}
    if not os.path.isdir(directory):
        return out
    for name in os.listdir(directory):
        stem, ext = os.path.splitext(name)
        if ext.lower() == ".png" and stem.isdigit():
            out[int(stem)] = os.path.join(directory, name)
    return out


def read_label_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L", "I", "I;16", "1"):
            im = im.convert("L")
        return np.array(im).astype(np.uint8)


def write_label_png(path: str, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    im = Image.fromarray(labels, mode="P")
    im.putpalette(davis_palette())
    im.save(path)


def davis_palette() -> list[int]:
    pal = []
    for i in range(256):
        c = [0, 0, 0]
        v = i
        for j in range(8):
            for ch in range(3):
                c[ch] |= ((v >> ch) & 1) << (7 - j)
            v >>= 3
        pal.extend(c)
    return pal


def read_depth_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        a = np.array(im)
    if a.ndim != 2:
        raise ShapeError(f"depth image {path} is not single-channel")
    return a.astype(np.uint16)


def write_depth_png(path: str, depth: np.ndarray) -> None:
    Image.fromarray(np.asarray(depth, dtype=np.uint16)).save(path)


def read_rgb_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.array(im.convert("RGB"))


def load_sequence(root_path: str) -> SequenceDataset:
    """Load ``rgb/``, ``depth/`` and ``masks/`` PNG folders under ``root_path``."""
    rgb_files = _frame_files(os.path.join(root_path, "rgb"))
    depth_files = _frame_files(os.path.join(root_path, "depth"))
    mask_files = _frame_files(os.path.join(root_path, "masks"))
    indices = sorted(set(rgb_files) | set(depth_files))
    for i in indices:
        if i not in rgb_files or i not in depth_files:
            raise IngestError(i)
    if not indices:
        raise IngestError(0, f"no frames found under {root_path}")
    if 0 not in mask_files or indices[0] != 0:
        raise AnnotationError(f"{root_path}: masks/00000.png is required")

    frames = []
    for i in indices:
        rgb = read_rgb_png(rgb_files[i])
        depth = read_depth_png(depth_files[i])
        if depth.shape != rgb.shape[:2]:
            raise ShapeError(f"frame {i}: depth {depth.shape} vs rgb {rgb.shape[:2]}")
        gt = read_label_png(mask_files[i]) if i in mask_files else None
        if gt is not None and gt.shape != depth.shape:
            raise ShapeError(f"frame {i}: mask {gt.shape} vs rgb {rgb.shape[:2]}")
        frames.append(RGBDFrame(i, rgb, depth, gt))

    ann = frames[0]._gt_mask
    labels = np.unique(ann)
    labels = labels[labels > 0]
    if labels.size == 0:
        raise AnnotationError(f"{root_path}: frame-0 annotation is empty")
    return SequenceDataset(frames, ann, int(labels.max()),
                           name=os.path.basename(os.path.normpath(root_path)))


def save_sequence(dataset: SequenceDataset, root_path: str, write_all_masks: bool = True) -> None:
    for sub in ("rgb", "depth", "masks"):
        os.makedirs(os.path.join(root_path, sub), exist_ok=True)
    for f in dataset.frames:
        Image.fromarray(f.rgb).save(os.path.join(root_path, "rgb", f"{f.index:05d}.png"))
        write_depth_png(os.path.join(root_path, "depth", f"{f.index:05d}.png"), f.depth)
        gt = f._gt_mask
        if f.index == 0:
            gt = dataset.first_frame_annotation
        if gt is not None and (write_all_masks or f.index == 0):
            write_label_png(os.path.join(root_path, "masks", f"{f.index:05d}.png"), gt)
