"""Prompt generation, entropy-gated RGB-D image fusion and promptable refiners."""

from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np
from PIL import Image

from .core import (BinaryMask, BoundingBox, MixedPrompt, PromptPoint, RGBDFrame,
                   anchor_point, mask_area, mask_bbox, mask_centroid)
from .errors import (CropError, EmptyHistoryError, EmptyRegionError, RefinerError)

log = logging.getLogger(__name__)

ENDPOINT_ENV = "RGBDVOS_REFINER_ENDPOINT"
TOKEN_ENV = "RGBDVOS_REFINER_TOKEN"


@dataclass(frozen=True)
class RefinementConfig:
    shift_threshold: float = 500.0      # pixels
    entropy_threshold: float = 6.0      # bits
    area_ratio_band: tuple[float, float] = (0.5, 2.0)
    box_expand: float = 1.5
    history_len: int = 5
    centroid_mode: str = "component"
    always_on: bool = True

    def __post_init__(self):
        lo, hi = self.area_ratio_band
        if self.shift_threshold <= 0:
            raise ValueError("shift_threshold must be > 0")
        if self.entropy_threshold < 0:
            raise ValueError("entropy_threshold must be >= 0")
        if not 0 < lo < 1 < hi:
            raise ValueError(f"area band must satisfy 0 < lo < 1 < hi, got {self.area_ratio_band}")
        if self.box_expand < 1:
            raise ValueError("box_expand must be >= 1")
        if self.history_len < 1:
            raise ValueError("history_len must be >= 1")


class HistoryEntry(NamedTuple):
    frame_index: int
    centroid: tuple[float, float]
    area: int
    mask: np.ndarray


class ObjectHistory:
    """Fixed-capacity record of an object's recent masks."""

    def __init__(self, capacity: int = 5, centroid_mode: str = "component"):
        self.capacity = capacity
        self.centroid_mode = centroid_mode
        self.entries: deque[HistoryEntry] = deque(maxlen=capacity)

    def push(self, frame_index: int, mask) -> bool:
        """Record ``mask``; empty masks are skipped. Returns whether stored."""
        data = mask.data if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)
        if not data.any():
            return False
        if self.entries and frame_index <= self.entries[-1].frame_index:
            raise ValueError("history entries must have increasing frame indices")
        self.entries.append(HistoryEntry(frame_index, mask_centroid(data, self.centroid_mode),
                                         mask_area(data), data.copy()))
        return True

    @property
    def mask_memory(self) -> np.ndarray:
        if not self.entries:
            raise EmptyHistoryError("no mask memory yet")
        return self.entries[-1].mask

    def __len__(self):
        return len(self.entries)


def estimate_motion_trend(history: ObjectHistory) -> tuple[float, float]:
    """Constant-velocity prediction from the last two centroids."""
    if not len(history):
        raise EmptyHistoryError("cannot extrapolate an empty history")
    (x1, y1) = history.entries[-1].centroid
    if len(history) == 1:
        return (x1, y1)
    (x0, y0) = history.entries[-2].centroid
    return (x1 + (x1 - x0), y1 + (y1 - y0))


def spatio_temporal_prompt(current_mask, history: ObjectHistory,
                           cfg: RefinementConfig = RefinementConfig()) -> MixedPrompt:
    if not len(history):
        raise EmptyHistoryError("prompt generation needs a mask memory")
    cur = current_mask.data if isinstance(current_mask, BinaryMask) else np.asarray(current_mask, bool)
    memory = history.mask_memory
    mode = history.centroid_mode
    if not cur.any():
        return MixedPrompt(mask_bbox(memory), (anchor_point(memory, mode),), "memory", "memory")

    trend = estimate_motion_trend(history)
    cx, cy = mask_centroid(cur, mode)
    deviation = math.hypot(cx - trend[0], cy - trend[1])
    if deviation > cfg.shift_threshold:
        point, point_src = anchor_point(memory, mode), "memory"
    else:
        point, point_src = anchor_point(cur, mode), "current"

    lo, hi = cfg.area_ratio_band
    ratio = mask_area(cur) / mask_area(memory)
    if lo <= ratio <= hi:
        box, box_src = mask_bbox(cur), "current"
    else:
        box, box_src = mask_bbox(memory), "memory"
    return MixedPrompt(box, (point,), point_src, box_src)


# --- modality embedding ----------------------------------------------------

def normalize_depth(depth) -> np.ndarray:
    """Min-max normalize over valid (> 0) pixels; invalid or constant -> 0."""
    d = np.asarray(depth, dtype=np.float64)
    valid = d > 0
    out = np.zeros_like(d)
    if valid.any():
        lo, hi = d[valid].min(), d[valid].max()
        if hi > lo:
            out[valid] = (d[valid] - lo) / (hi - lo)
    return out


def pseudo_color(depth) -> np.ndarray:
    """Hue ramp from blue (nearest) to red (farthest) at full saturation/value."""
    d = normalize_depth(depth)
    h = ((1.0 - d) * 240.0) / 360.0
    i = (h * 6.0).astype(np.int64)
    f = (h * 6.0) - i
    q = 1.0 - f
    t = 1.0 - (1.0 - f)
    one = np.ones_like(h)
    zero = np.zeros_like(h)
    i = i % 6
    r = np.choose(i, [one, q, zero, zero, t, one])
    g = np.choose(i, [t, one, one, q, zero, zero])
    b = np.choose(i, [zero, zero, t, one, one, q])
    rgb = np.stack([r, g, b], axis=-1)
    return np.floor(255.0 * rgb).astype(np.uint8)


def region_entropy(image) -> float:
    """Shannon entropy in bits of the RGB triple histogram."""
    img = np.asarray(image)
    if img.size == 0:
        raise EmptyRegionError("entropy of an empty region")
    px = img.reshape(-1, img.shape[-1]).astype(np.uint32)
    packed = (px[:, 0] << 16) | (px[:, 1] << 8) | px[:, 2]
    _, counts = np.unique(packed, return_counts=True)
    p = counts / px.shape[0]
    return -math.fsum((p * np.log2(p)).tolist()) + 0.0


def expand_box(box: BoundingBox, factor: float, height: int, width: int) -> BoundingBox:
    """Scale ``box`` about its center and clip to the image."""
    cx, cy = box.center
    new_w = math.ceil(box.width * factor)
    new_h = math.ceil(box.height * factor)
    x0 = math.floor(cx - (new_w - 1) / 2)
    y0 = math.floor(cy - (new_h - 1) / 2)
    out = BoundingBox(x0, y0, x0 + new_w - 1, y0 + new_h - 1).clip(height, width)
    if out.width < 1 or out.height < 1:
        raise CropError(f"box {box} leaves no pixels inside a {height}x{width} image")
    return out


class FusedCrop(NamedTuple):
    image: np.ndarray           # H' x W' x 3 uint8
    crop_box: BoundingBox
    pseudo: np.ndarray          # pseudo-colored depth crop
    entropy: float
    depth_used: bool
    s_rgb: float
    s_d: float


def modality_fuse_image(rgb, depth, weights, box: BoundingBox,
                        cfg: RefinementConfig = RefinementConfig(),
                        pseudo_full: np.ndarray | None = None) -> FusedCrop:
    """Crop around ``box`` and blend the RGB crop with the pseudo-colored depth
    crop when the depth crop's color entropy reaches the threshold.

    ``weights`` is a ModalityWeights or an (s_rgb, s_d) pair of scalars.
    """
    rgb = np.asarray(rgb)
    h, w = rgb.shape[:2]
    crop = expand_box(box, cfg.box_expand, h, w)
    ys = slice(crop.y_min, crop.y_max + 1)
    xs = slice(crop.x_min, crop.x_max + 1)
    rgb_crop = rgb[ys, xs]
    pseudo = pseudo_color(np.asarray(depth)[ys, xs]) if pseudo_full is None else pseudo_full[ys, xs]
    ent = region_entropy(pseudo)

    if hasattr(weights, "scalars"):
        s_rgb, s_d = weights.scalars()
    else:
        s_rgb, s_d = (float(v) for v in weights)
    total = s_rgb + s_d
    s_rgb, s_d = s_rgb / total, s_d / total

    if ent < cfg.entropy_threshold:
        return FusedCrop(rgb_crop.copy(), crop, pseudo, ent, False, s_rgb, s_d)
    mixed = s_rgb * rgb_crop.astype(np.float64) + s_d * pseudo.astype(np.float64)
    out = np.clip(np.floor(mixed + 0.5), 0, 255).astype(np.uint8)
    return FusedCrop(out, crop, pseudo, ent, True, s_rgb, s_d)


# --- refiners ---------------------------------------------------------------

class RefineRequest(NamedTuple):
    image: np.ndarray           # crop, H' x W' x 3 uint8
    prompt: MixedPrompt         # crop coordinates
    crop_box: BoundingBox       # crop position in the frame
    frame_index: int
    object_id: int


class PromptableRefiner(Protocol):
    accepts_box: bool
    accepts_points: bool

    def segment(self, request: RefineRequest) -> np.ndarray:
        """Boolean mask the size of ``request.image``."""


class IdentityRefiner:
    """Returns the interior of the prompt box."""

    accepts_box = True
    accepts_points = False

    def segment(self, request):
        out = np.zeros(request.image.shape[:2], dtype=bool)
        b = request.prompt.box
        out[b.y_min:b.y_max + 1, b.x_min:b.x_max + 1] = True
        return out


class OracleRefiner:
    """Returns the ground-truth crop; for harnesses only."""

    accepts_box = True
    accepts_points = True

    def __init__(self, dataset):
        self._frames = {f.index: f for f in dataset.frames}

    def segment(self, request):
        gt = self._frames[request.frame_index].gt_mask
        if gt is None:
            raise RefinerError(f"no ground truth for frame {request.frame_index}")
        b = request.crop_box
        return gt[b.y_min:b.y_max + 1, b.x_min:b.x_max + 1] == request.object_id


def _png_b64(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def encode_refine_request(request: RefineRequest) -> dict:
    p = request.prompt
    return {
        "image_png": _png_b64(np.ascontiguousarray(request.image, dtype=np.uint8)),
        "box": [p.box.x_min, p.box.y_min, p.box.x_max, p.box.y_max],
        "points": [[pt.x, pt.y, pt.label] for pt in p.points],
    }


def decode_mask_response(payload: dict, shape) -> np.ndarray:
    raw = base64.b64decode(payload["mask_png"])
    with Image.open(io.BytesIO(raw)) as im:
        mask = np.array(im) > 0
    if mask.ndim == 3:
        mask = mask.any(axis=-1)
    if mask.shape != tuple(shape):
        raise RefinerError(f"refiner returned {mask.shape}, expected {tuple(shape)}")
    return mask


class ExternalRefiner:
    """POSTs the crop and prompt as JSON to a remote segmenter.

    Request: ``{"image_png": b64, "box": [x0, y0, x1, y1], "points": [[x, y, label], ...]}``.
    Response: ``{"mask_png": b64}`` holding a single-channel mask, nonzero = object.
    """

    accepts_box = True
    accepts_points = True

    def __init__(self, endpoint: str | None = None, timeout: float = 30.0,
                 token: str | None = None):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ValueError(f"external refiner needs an endpoint (flag or ${ENDPOINT_ENV})")
        self.timeout = timeout
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)

    def segment(self, request):
        body = json.dumps(encode_refine_request(request)).encode()
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        req = urllib.request.Request(self.endpoint, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read())
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise RefinerError(f"refiner call failed: {exc}") from exc
        return decode_mask_response(payload, request.image.shape[:2])


def refine(frame: RGBDFrame, prompt: MixedPrompt, fused_crop: FusedCrop,
           refiner: PromptableRefiner, object_id: int = 1) -> BinaryMask:
    """Run ``refiner`` on the fused crop and paste the result into the frame."""
    b = fused_crop.crop_box
    local = prompt.translate(-b.x_min, -b.y_min)
    req = RefineRequest(fused_crop.image, local, b, frame.index, object_id)
    try:
        crop_mask = np.asarray(refiner.segment(req), dtype=bool)
    except RefinerError:
        raise
    except Exception as exc:
        raise RefinerError(f"refiner raised {type(exc).__name__}: {exc}") from exc
    if crop_mask.shape != fused_crop.image.shape[:2]:
        raise RefinerError(f"refiner returned {crop_mask.shape}, expected {fused_crop.image.shape[:2]}")
    full = np.zeros(frame.shape, dtype=bool)
    full[b.y_min:b.y_max + 1, b.x_min:b.x_max + 1] = crop_mask
    return BinaryMask(full, object_id)


def make_refiner(kind: str, dataset=None, endpoint=None, timeout=30.0):
    if kind in (None, "none"):
        return None
    if kind == "mock-identity":
        return IdentityRefiner()
    if kind == "mock-oracle":
        if dataset is None:
            raise ValueError("mock-oracle refiner needs the dataset")
        return OracleRefiner(dataset)
    if kind == "external":
        return ExternalRefiner(endpoint, timeout)
    raise ValueError(f"unknown refiner {kind!r}")
