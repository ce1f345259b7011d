"""Multi-store feature memory: sensory state, working store, long-term prototypes.

Keys come from the query path (fused stride-16 features through a 1x1
projection) and are shared by every object of a frame; values are encoded
per object from the image pair and that object's mask. Each object owns
one :class:`MultiStoreMemory`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import Downsample, ModalitySelectFuse, ResidualBackbone, select_fuse
from .errors import EmptyMemoryError, ShapeError


@dataclass(frozen=True)
class MemoryConfig:
    insert_every: int = 5
    working_capacity: int = 10
    prototype_count: int = 64
    neighbors: int = 8
    key_channels: int = 32
    value_channels: int = 64
    hidden_channels: int = 32

    def __post_init__(self):
        if self.insert_every < 1:
            raise ValueError("insert_every must be >= 1")
        if self.working_capacity < 1:
            raise ValueError("working_capacity must be >= 1")
        if self.prototype_count < 1 or self.neighbors < 1:
            raise ValueError("prototype_count and neighbors must be >= 1")


@dataclass
class MemoryKey:
    k: torch.Tensor  # Ck x h x w

    def __post_init__(self):
        if self.k.dim() != 3:
            raise ShapeError(f"key must be C x h x w, got {tuple(self.k.shape)}")


@dataclass
class MemoryValue:
    v: torch.Tensor  # Cv x h x w
    frame_index: int = 0
    object_id: int = 1

    def __post_init__(self):
        if self.v.dim() != 3:
            raise ShapeError(f"value must be C x h x w, got {tuple(self.v.shape)}")


@dataclass
class WorkingEntry:
    key: MemoryKey
    value: MemoryValue
    usage: np.ndarray  # one counter per spatial position

    @property
    def frame_index(self) -> int:
        return self.value.frame_index


@dataclass
class MultiStoreMemory:
    config: MemoryConfig = field(default_factory=MemoryConfig)
    object_id: int = 1
    sensory: torch.Tensor | None = None
    working: list[WorkingEntry] = field(default_factory=list)
    lt_keys: torch.Tensor | None = None     # P_total x Ck
    lt_values: torch.Tensor | None = None   # P_total x Cv
    lt_usage: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    lt_frames: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    consolidations: int = 0

    @property
    def longterm_size(self) -> int:
        return 0 if self.lt_keys is None else int(self.lt_keys.shape[0])

    @property
    def is_empty(self) -> bool:
        return not self.working and self.longterm_size == 0

    def reset_sensory(self, shape, dtype=torch.float32):
        self.sensory = torch.zeros(shape, dtype=dtype)

    def candidates(self):
        """All stored positions as (keys Nx Ck, values N x Cv, owner list)."""
        keys, values, owners = [], [], []
        for i, e in enumerate(self.working):
            ck, cv = e.key.k.shape[0], e.value.v.shape[0]
            keys.append(e.key.k.reshape(ck, -1).T)
            values.append(e.value.v.reshape(cv, -1).T)
            owners.append(("working", i, e.key.k[0].numel()))
        if self.longterm_size:
            keys.append(self.lt_keys)
            values.append(self.lt_values)
            owners.append(("longterm", 0, self.longterm_size))
        return torch.cat(keys), torch.cat(values), owners

    def snapshot(self) -> dict:
        """Plain numpy arrays for dumping/inspection."""
        out = {"object_id": np.array(self.object_id)}
        for i, e in enumerate(self.working):
            out[f"working.{i}.key"] = e.key.k.detach().cpu().numpy()
            out[f"working.{i}.value"] = e.value.v.detach().cpu().numpy()
            out[f"working.{i}.usage"] = e.usage.copy()
            out[f"working.{i}.frame"] = np.array(e.frame_index)
        if self.longterm_size:
            out["longterm.keys"] = self.lt_keys.detach().cpu().numpy()
            out["longterm.values"] = self.lt_values.detach().cpu().numpy()
            out["longterm.usage"] = self.lt_usage.copy()
            out["longterm.frames"] = self.lt_frames.copy()
        if self.sensory is not None:
            out["sensory"] = self.sensory.detach().cpu().numpy()
        return out


def pairwise_sq_dist(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """||a_i - b_j||^2 for a: N x C, b: M x C."""
    return (a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None, :]


def readout(query: MemoryKey, mem: MultiStoreMemory, *, track_usage: bool = True,
            return_weights: bool = False):
    """Softmax(-squared distance) blend of all stored values per query position."""
    if mem.is_empty:
        raise EmptyMemoryError("readout from an empty memory")
    ck, h, w = query.k.shape
    keys, values, owners = mem.candidates()
    if keys.shape[1] != ck:
        raise ShapeError(f"query has {ck} channels, memory keys have {keys.shape[1]}")
    q = query.k.reshape(ck, -1).T
    affinity = -pairwise_sq_dist(keys, q)          # N_mem x HW
    weights = torch.softmax(affinity, dim=0)
    out = (values.T @ weights).reshape(values.shape[1], h, w)
    if track_usage:
        top = affinity.detach().argmax(dim=0).cpu().numpy()
        counts = np.bincount(top, minlength=keys.shape[0])
        start = 0
        for kind, i, n in owners:
            if kind == "working":
                mem.working[i].usage += counts[start:start + n]
            else:
                mem.lt_usage += counts[start:start + n]
            start += n
    if return_weights:
        return out, weights
    return out


def insert_working(mem: MultiStoreMemory, key: MemoryKey, value: MemoryValue) -> MultiStoreMemory:
    if key.k.shape[1:] != value.v.shape[1:]:
        raise ShapeError(f"key {tuple(key.k.shape)} and value {tuple(value.v.shape)} sizes differ")
    usage = np.zeros(key.k[0].numel(), dtype=np.int64)
    mem.working.append(WorkingEntry(key, value, usage))
    if len(mem.working) > mem.config.working_capacity:
        consolidate(mem)
    return mem


def consolidate(mem: MultiStoreMemory) -> MultiStoreMemory:
    """Move the oldest working entries into long-term prototypes.

    The most-used positions of the evicted entries become prototype keys;
    each prototype value is a softmax(-squared distance) average over the
    ``neighbors`` evicted positions nearest to it in key space.
    """
    cfg = mem.config
    n_remove = len(mem.working) - cfg.working_capacity + 1
    if n_remove <= 0:
        return mem
    removed, mem.working = mem.working[:n_remove], mem.working[n_remove:]

    keys = torch.cat([e.key.k.reshape(e.key.k.shape[0], -1).T for e in removed])
    values = torch.cat([e.value.v.reshape(e.value.v.shape[0], -1).T for e in removed])
    usage = np.concatenate([e.usage for e in removed])
    frames = np.concatenate([np.full(e.usage.size, e.frame_index, np.int64) for e in removed])

    p = min(cfg.prototype_count, usage.size)
    chosen = np.argsort(-usage, kind="stable")[:p]
    proto_keys = keys[torch.from_numpy(chosen)]
    d2 = pairwise_sq_dist(proto_keys, keys)                       # P x N
    k = min(cfg.neighbors, keys.shape[0])
    order = np.argsort(d2.detach().cpu().numpy(), axis=1, kind="stable")[:, :k]
    idx = torch.from_numpy(order)
    wts = torch.softmax(-torch.gather(d2, 1, idx), dim=1)       # P x k
    proto_values = (wts[:, :, None] * values[idx]).sum(1)

    if mem.lt_keys is None:
        mem.lt_keys, mem.lt_values = proto_keys, proto_values
    else:
        mem.lt_keys = torch.cat([mem.lt_keys, proto_keys])
        mem.lt_values = torch.cat([mem.lt_values, proto_values])
    mem.lt_usage = np.concatenate([mem.lt_usage, np.zeros(p, np.int64)])
    mem.lt_frames = np.concatenate([mem.lt_frames, frames[chosen]])
    mem.consolidations += 1
    return mem


class KeyProjection(nn.Module):
    def __init__(self, in_channels, key_channels):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, key_channels, 1)

    def forward(self, f16):
        return self.proj(f16)


def encode_key(f16: torch.Tensor, proj: KeyProjection) -> MemoryKey:
    """Key for a single frame; ``f16`` is C x h x w or 1 x C x h x w."""
    if f16.dim() == 3:
        f16 = f16.unsqueeze(0)
    if f16.dim() != 4 or f16.shape[0] != 1 or f16.shape[1] != proj.proj.in_channels:
        raise ShapeError(f"bad stride-16 feature shape {tuple(f16.shape)}")
    return MemoryKey(proj(f16)[0])


class MemoryEncoder(nn.Module):
    """Two mask-conditioned residual streams fused at strides 8 and 16."""

    def __init__(self, value_channels=64, widths=(16, 32)):
        super().__init__()
        c4, c8 = widths
        self.rgb = ResidualBackbone(4, (c4, c8, value_channels))
        self.depth = ResidualBackbone(4, (c4, c8, value_channels))
        self.shallow_down = Downsample(c8, value_channels)
        self.deep_fuse = ModalitySelectFuse(value_channels)
        self.out_fuse = ModalitySelectFuse(value_channels)

    def forward(self, rgb, depth3, mask):
        if mask.dim() == 3:
            mask = mask.unsqueeze(1)
        n = mask.shape[0]
        if rgb.shape[-2:] != mask.shape[-2:] or depth3.shape[-2:] != mask.shape[-2:]:
            raise ShapeError("image and mask sizes differ")
        rgb = rgb.expand(n, -1, -1, -1)
        depth3 = depth3.expand(n, -1, -1, -1)
        _, rgb2, rgb3 = self.rgb(torch.cat([rgb, mask], 1))
        _, d2, d3 = self.depth(torch.cat([depth3, mask], 1))
        shallow = self.shallow_down(rgb2 + d2)
        deep, _ = select_fuse(self.deep_fuse, rgb3, d3, 16)
        value, _ = select_fuse(self.out_fuse, shallow, deep, 16, "hierarchy")
        return value


def encode_memory(rgb, depth3, refined_mask, encoder: MemoryEncoder,
                  frame_index: int = 0, object_id: int = 1) -> MemoryValue:
    """Value map for one object. Images are 1x3xHxW, mask HxW or 1x1xHxW."""
    mask = torch.as_tensor(refined_mask)
    if not mask.is_floating_point():
        mask = mask.to(rgb.dtype)
    while mask.dim() < 4:
        mask = mask.unsqueeze(0)
    return MemoryValue(encoder(rgb, depth3, mask)[0], frame_index, object_id)


class SensoryUpdater(nn.Module):
    """Convolutional gated update without a reset gate."""

    def __init__(self, input_channels, hidden_channels, kernel_size=3):
        super().__init__()
        pad = kernel_size // 2
        self.hidden_channels = hidden_channels
        self.gate = nn.Conv2d(input_channels + hidden_channels, hidden_channels, kernel_size, padding=pad)
        self.candidate = nn.Conv2d(input_channels + hidden_channels, hidden_channels, kernel_size, padding=pad)

    def forward(self, h, x):
        if h.shape[0] != x.shape[0] or h.shape[-2:] != x.shape[-2:]:
            raise ShapeError(f"hidden {tuple(h.shape)} and input {tuple(x.shape)} do not align")
        hx = torch.cat([h, x], 1)
        z = torch.sigmoid(self.gate(hx))
        cand = torch.tanh(self.candidate(hx))
        return (1 - z) * h + z * cand


def update_sensory(mem: MultiStoreMemory, fused_f16, decoded_hidden,
                   updater: SensoryUpdater) -> torch.Tensor:
    """Advance ``mem.sensory`` one step; inputs are C x h x w or 1 x C x h x w."""
    if fused_f16.dim() == 3:
        fused_f16 = fused_f16.unsqueeze(0)
    if decoded_hidden.dim() == 3:
        decoded_hidden = decoded_hidden.unsqueeze(0)
    if fused_f16.shape[-2:] != decoded_hidden.shape[-2:]:
        raise ShapeError("stride-16 features and decoder hidden differ in size")
    if mem.sensory is None:
        mem.reset_sensory((updater.hidden_channels,) + tuple(fused_f16.shape[-2:]), fused_f16.dtype)
    x = torch.cat([fused_f16, decoded_hidden], 1)
    mem.sensory = updater(mem.sensory.unsqueeze(0), x)[0]
    return mem.sensory

