"""Dual-stream residual backbone and hierarchical modality selection/fusion.

The fusion block squeezes the sum of both modalities into a channel
descriptor, projects it once, then gives each modality its own sigmoid
head. The two reweighted maps are added.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError

STRIDES = (4, 8, 16)


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple[int, int, int] = (16, 32, 64)
    seed: int = 0
    weight_source: str = "random"   # random | zero | file
    weight_path: str | None = None

    def __post_init__(self):
        if len(self.widths) != 3 or any(int(w) <= 0 for w in self.widths):
            raise ValueError(f"need three positive widths, got {self.widths}")
        if self.weight_source not in ("random", "zero", "file"):
            raise ValueError(f"unknown weight source {self.weight_source!r}")
        if self.weight_source == "file" and not self.weight_path:
            raise ValueError("weight_source='file' needs weight_path")


class FeaturePyramid(NamedTuple):
    f4: torch.Tensor
    f8: torch.Tensor
    f16: torch.Tensor

    def map(self, fn) -> "FeaturePyramid":
        return FeaturePyramid(*(fn(t) for t in self))


@dataclass
class ModalityWeights:
    """Per-channel gates in (0, 1) for the two inputs of one fusion call.

    ``kind`` is "modality" for rgb/depth fusion and "hierarchy" for the
    previous-stage/current-stage fusion, where ``w_rgb`` gates the
    shallower input and ``w_d`` the deeper one.
    """

    w_rgb: torch.Tensor
    w_d: torch.Tensor
    stage: int
    kind: str = "modality"

    def scalars(self) -> tuple[float, float]:
        return float(self.w_rgb.detach().mean()), float(self.w_d.detach().mean())


def _check_same(a: torch.Tensor, b: torch.Tensor, what: str = "inputs"):
    if a.shape != b.shape:
        raise ShapeError(f"{what} differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=2):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.skip = nn.Conv2d(cin, cout, 1, stride)

    def forward(self, x):
        y = self.conv2(F.relu(self.conv1(x)))
        return F.relu(y + self.skip(x))


class ResidualBackbone(nn.Module):
    """Stem at stride 2, then one residual block per output stride 4/8/16."""

    def __init__(self, in_channels=3, widths=(16, 32, 64)):
        super().__init__()
        c4, c8, c16 = widths
        self.widths = tuple(widths)
        self.stem = nn.Conv2d(in_channels, c4, 3, 2, 1)
        self.layer1 = ResidualBlock(c4, c4)
        self.layer2 = ResidualBlock(c4, c8)
        self.layer3 = ResidualBlock(c8, c16)

    def forward(self, x) -> FeaturePyramid:
        if x.dim() != 4:
            raise ShapeError(f"expected NCHW input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 16 or w % 16:
            raise ShapeError(f"input {h}x{w} is not a multiple of 16")
        f4 = self.layer1(F.relu(self.stem(x)))
        f8 = self.layer2(f4)
        f16 = self.layer3(f8)
        return FeaturePyramid(f4, f8, f16)


def as_nchw(image) -> torch.Tensor:
    """HxWx3 array/tensor (or already NCHW) to a float NCHW tensor."""
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(np.ascontiguousarray(image))
    if image.dim() == 3 and image.shape[-1] in (1, 3, 4) and image.shape[0] not in (1, 3, 4):
        image = image.permute(2, 0, 1)
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if not image.is_floating_point():
        image = image.float()
    return image


def extract_features(image, backbone: ResidualBackbone) -> FeaturePyramid:
    return backbone(as_nchw(image))


class ModalitySelectFuse(nn.Module):
    """Channel-level selection and additive fusion of two same-shape maps."""

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.shared = nn.Linear(channels, channels)
        self.head_rgb = nn.Linear(channels, channels)
        self.head_d = nn.Linear(channels, channels)

    def gates(self, f_rgb, f_d):
        _check_same(f_rgb, f_d)
        if f_rgb.dim() != 4 or f_rgb.shape[1] != self.channels:
            raise ShapeError(f"expected N x {self.channels} x H x W, got {tuple(f_rgb.shape)}")
        g = self.shared((f_rgb + f_d).mean(dim=(2, 3)))
        return torch.sigmoid(self.head_rgb(g)), torch.sigmoid(self.head_d(g))

    def forward(self, f_rgb, f_d):
        w_rgb, w_d = self.gates(f_rgb, f_d)
        fused = f_rgb * w_rgb[:, :, None, None] + f_d * w_d[:, :, None, None]
        return fused, w_rgb, w_d


def select_fuse(block: ModalitySelectFuse, f_rgb, f_d, stage: int = 16,
                kind: str = "modality"):
    """Fuse two maps with ``block``; returns (fused, ModalityWeights)."""
    fused, w_rgb, w_d = block(f_rgb, f_d)
    return fused, ModalityWeights(w_rgb, w_d, stage, kind)


class Downsample(nn.Module):
    """2x average pool, then a 1x1 projection to the next stage width."""

    def __init__(self, cin, cout):
        super().__init__()
        self.proj = nn.Conv2d(cin, cout, 1)

    def forward(self, x):
        return self.proj(F.avg_pool2d(x, 2))


class HMSF(nn.Module):
    """Per-stage modality fusion, then top-down fusion of each stage's
    output into the next coarser stage with the same block type."""

    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        c4, c8, c16 = widths
        self.widths = tuple(widths)
        self.modal = nn.ModuleList([ModalitySelectFuse(c) for c in widths])
        self.down = nn.ModuleList([Downsample(c4, c8), Downsample(c8, c16)])
        self.hier = nn.ModuleList([ModalitySelectFuse(c8), ModalitySelectFuse(c16)])

    def forward(self, rgb_pyr: FeaturePyramid, d_pyr: FeaturePyramid):
        weights = []
        deep = []
        for i, s in enumerate(STRIDES):
            _check_same(rgb_pyr[i], d_pyr[i], f"stride-{s} features")
            out, w = select_fuse(self.modal[i], rgb_pyr[i], d_pyr[i], s, "modality")
            deep.append(out)
            weights.append(w)
        fused = [deep[0]]
        for i, s in enumerate(STRIDES[1:]):
            prev = self.down[i](fused[-1])
            _check_same(prev, deep[i + 1], f"stride-{s} hierarchy inputs")
            out, w = select_fuse(self.hier[i], prev, deep[i + 1], s, "hierarchy")
            fused.append(out)
            weights.append(w)
        return FeaturePyramid(*fused), weights


def hmsf(rgb_pyr, d_pyr, module: HMSF):
    return module(rgb_pyr, d_pyr)


def stage_weights(weights, stage=16, kind="modality") -> ModalityWeights:
    for w in weights:
        if w.stage == stage and w.kind == kind:
            return w
    raise KeyError(f"no {kind} weights for stage {stage}")


def zero_parameters(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


class DualStreamEncoder(nn.Module):
    """RGB and depth backbones plus HMSF: the query-side feature path."""

    def __init__(self, widths=(16, 32, 64)):
        super().__init__()
        self.rgb = ResidualBackbone(3, widths)
        self.depth = ResidualBackbone(3, widths)
        self.hmsf = HMSF(widths)

    def forward(self, rgb, depth3):
        return self.hmsf(self.rgb(rgb), self.depth(depth3))
