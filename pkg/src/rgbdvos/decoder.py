"""Mask decoder: memory readout + fused pyramid + sensory state -> probabilities."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import BinaryMask
from .errors import ShapeError


class UpBlock(nn.Module):
    """Nearest 2x upsample, 3x3 conv, plus a 1x1 projected skip feature."""

    def __init__(self, cin, skip_c, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)
        self.skip = nn.Conv2d(skip_c, cout, 1)

    def forward(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return F.relu(self.conv(x) + self.skip(skip))


class Decoder(nn.Module):
    def __init__(self, value_channels=64, widths=(16, 32, 64), hidden_channels=32,
                 mid_channels=(64, 32, 16)):
        super().__init__()
        c4, c8, c16 = widths
        m16, m8, m4 = mid_channels
        self.hidden_channels = hidden_channels
        self.fuse16 = nn.Conv2d(value_channels + c16 + hidden_channels, m16, 3, padding=1)
        self.hidden_out = nn.Conv2d(m16, hidden_channels, 1)
        self.up8 = UpBlock(m16, c8, m8)
        self.up4 = UpBlock(m8, c4, m4)
        self.head = nn.Conv2d(m4, 1, 3, padding=1)

    def forward(self, readouts, f16, f8, f4, sensory):
        """``readouts``/``sensory`` are N x C x h x w (one row per object);
        the pyramid levels are 1 x C x h x w. Returns (N x H x W logits,
        N x Ch x h x w hidden)."""
        n = readouts.shape[0]
        if sensory.shape[0] != n:
            raise ShapeError(f"{n} readouts but {sensory.shape[0]} sensory states")
        if readouts.shape[-2:] != f16.shape[-2:] or sensory.shape[-2:] != f16.shape[-2:]:
            raise ShapeError("readout/sensory must be at stride 16")
        if f8.shape[-2:] != tuple(2 * s for s in f16.shape[-2:]) or \
                f4.shape[-2:] != tuple(4 * s for s in f16.shape[-2:]):
            raise ShapeError("pyramid levels are not at strides 4/8/16")
        x = torch.cat([readouts, f16.expand(n, -1, -1, -1), sensory], 1)
        g16 = F.relu(self.fuse16(x))
        hidden = self.hidden_out(g16)
        g8 = self.up8(g16, f8.expand(n, -1, -1, -1))
        g4 = self.up4(g8, f4.expand(n, -1, -1, -1))
        logits = self.head(g4)
        logits = F.interpolate(logits, scale_factor=4, mode="bilinear", align_corners=False)
        return logits[:, 0], hidden


def aggregate(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over a fixed zero background logit and one logit per object."""
    bg = torch.zeros_like(logits[:1])
    return torch.softmax(torch.cat([bg, logits], 0), dim=0)


def decode(readouts, f16, f8, f4, sensory, decoder: Decoder, return_hidden: bool = False):
    """(N+1) x H x W probabilities for background and N objects."""
    logits, hidden = decoder(readouts, f16, f8, f4, sensory)
    probs = aggregate(logits)
    return (probs, hidden) if return_hidden else probs


def hard_masks(prob_maps) -> list[BinaryMask]:
    """Per-pixel argmax; ties go to the lowest label, so background first."""
    if isinstance(prob_maps, torch.Tensor):
        prob_maps = prob_maps.detach().cpu().numpy()
    prob_maps = np.asarray(prob_maps)
    labels = np.argmax(prob_maps, axis=0)
    return [BinaryMask(labels == k, k) for k in range(1, prob_maps.shape[0])]


def hard_labels(prob_maps) -> np.ndarray:
    if isinstance(prob_maps, torch.Tensor):
        prob_maps = prob_maps.detach().cpu().numpy()
    return np.argmax(np.asarray(prob_maps), axis=0).astype(np.uint8)
