"""Per-frame segmentation loop and pipeline configuration."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneConfig, stage_weights
from .core import (RGBDFrame, SequenceDataset, audit_gt_access,
                   masks_to_labels, write_label_png)
from .decoder import aggregate, hard_masks
from .errors import ConfigError, RefinerError
from .evaluation import SegmentationReport, evaluate_sequence
from .memory import (MemoryConfig, MemoryValue, MultiStoreMemory, encode_key,
                     insert_working, readout)
from .model import ModelConfig, VOSModel, build_model, load_model
from .refinement import (FusedCrop, ObjectHistory, RefinementConfig, make_refiner,
                         modality_fuse_image, pseudo_color, refine,
                         spatio_temporal_prompt)

log = logging.getLogger(__name__)

REFINERS = ("none", "mock-identity", "mock-oracle", "external")


@dataclass(frozen=True)
class PipelineConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    refiner: str = "none"
    endpoint: str | None = None
    refiner_timeout: float = 30.0
    checkpoint: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.refiner not in REFINERS:
            raise ConfigError(f"refiner must be one of {REFINERS}, got {self.refiner!r}")
        if self.refiner == "external" and not (self.endpoint or os.environ.get("RGBDVOS_REFINER_ENDPOINT")):
            raise ConfigError("refiner=external requires an endpoint")

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.memory)

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("endpoint", None)
        return d

    def replace(self, **changes) -> "PipelineConfig":
        return apply_overrides(self, changes)


# --- flat key=value config files ------------------------------------------

def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        parts = [p for p in value.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(type(current[0])(p.strip()) for p in parts)
    if current is None:
        return value.strip() or None
    return value.strip()


def apply_overrides(cfg, overrides: dict):
    """Apply dotted-key overrides such as ``{"memory.insert_every": "3"}``."""
    nested: dict[str, dict] = {}
    flat = {}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            flat[head] = value
    names = {f.name for f in dataclasses.fields(cfg)}
    changes = {}
    for key, value in flat.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        cur = getattr(cfg, key)
        changes[key] = _coerce(value, cur) if isinstance(value, str) else value
    for key, sub in nested.items():
        if key not in names or not dataclasses.is_dataclass(getattr(cfg, key)):
            raise ConfigError(f"unknown config section {key!r}")
        changes[key] = apply_overrides(getattr(cfg, key), sub)
    try:
        return dataclasses.replace(cfg, **changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    values = {}
    if path:
        with open(path) as fh:
            values.update(parse_config_text(fh.read()))
    values.update(overrides or {})
    return apply_overrides(cfg, values)


def dump_config(cfg, prefix="") -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            lines.append(dump_config(v, f"{prefix}{f.name}."))
        elif v is not None:
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{prefix}{f.name} = {v}")
    return "\n".join(lines)


# --- tensors ----------------------------------------------------------------

class FrameTensors(NamedTuple):
    rgb: torch.Tensor       # 1 x 3 x Hp x Wp in [0, 1]
    depth3: torch.Tensor    # 1 x 3 x Hp x Wp, pseudo-colored depth in [0, 1]
    size: tuple[int, int]
    pseudo: np.ndarray      # H x W x 3 uint8 pseudo-colored depth


def pad_to_16(x: torch.Tensor, mode="replicate") -> torch.Tensor:
    h, w = x.shape[-2:]
    ph, pw = (-h) % 16, (-w) % 16
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph), mode=mode)


def _chw(img: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(img.astype(np.float64) / 255.0).permute(2, 0, 1)[None]


def prepare_frame(frame: RGBDFrame, dtype=torch.float32) -> FrameTensors:
    """Both encoder streams take 3-channel images: RGB and pseudo-colored depth."""
    pseudo = pseudo_color(frame.depth)
    return FrameTensors(pad_to_16(_chw(frame.rgb).to(dtype)),
                        pad_to_16(_chw(pseudo).to(dtype).contiguous()), frame.shape, pseudo)


def pad_masks(masks: torch.Tensor) -> torch.Tensor:
    """N x H x W -> N x 1 x Hp x Wp, zero padded."""
    return pad_to_16(masks[:, None], mode="constant")


class FrameState(NamedTuple):
    pyramid: tuple
    weights: list
    key: object


def encode_query(model: VOSModel, ft: FrameTensors) -> FrameState:
    pyr, weights = model.encoder(ft.rgb, ft.depth3)
    return FrameState(pyr, weights, encode_key(pyr.f16, model.key_proj))


def memorize(model, ft, state: FrameState, masks: torch.Tensor, memories, frame_index):
    """Encode one value per object from ``masks`` (N x H x W) and insert it."""
    values = model.mem_encoder(ft.rgb, ft.depth3, pad_masks(masks.to(ft.rgb.dtype)))
    for mem, v in zip(memories, values):
        insert_working(mem, state.key, MemoryValue(v, frame_index, mem.object_id))


def init_memories(model, ft, masks, cfg: MemoryConfig, object_ids):
    state = encode_query(model, ft)
    mems = [MultiStoreMemory(cfg, k) for k in object_ids]
    f16 = state.pyramid.f16
    for m in mems:
        m.reset_sensory((cfg.hidden_channels,) + tuple(f16.shape[-2:]), f16.dtype)
    memorize(model, ft, state, masks, mems, 0)
    return mems, state


def predict(model, ft, state: FrameState, memories, track_usage=True):
    """Returns ((N+1) x H x W probabilities, N x Ch x h x w decoder hidden)."""
    reads = torch.stack([readout(state.key, m, track_usage=track_usage) for m in memories])
    sensory = torch.stack([m.sensory for m in memories])
    pyr = state.pyramid
    logits, hidden = model.decoder(reads, pyr.f16, pyr.f8, pyr.f4, sensory)
    h, w = ft.size
    return aggregate(logits[:, :h, :w]), hidden


def advance_sensory(model, state: FrameState, hidden, memories):
    h = torch.stack([m.sensory for m in memories])
    x = torch.cat([state.pyramid.f16.expand(len(memories), -1, -1, -1), hidden], 1)
    new = model.sensory(h, x)
    for m, s in zip(memories, new):
        m.sensory = s


# --- inference loop ---------------------------------------------------------

@dataclass
class FusionRecord:
    frame_index: int
    object_id: int
    fused: FusedCrop
    prompt: object


@dataclass
class RunResult:
    masks: list[np.ndarray]                 # label raster per frame
    frame_indices: list[int]
    report: SegmentationReport | None = None
    trace: list[dict] = field(default_factory=list)
    gt_reads: list[int] = field(default_factory=list)
    memories: list[MultiStoreMemory] = field(default_factory=list)
    fusions: list[FusionRecord] = field(default_factory=list)
    unrefined: list[np.ndarray] = field(default_factory=list)

    def as_dict(self) -> dict[int, np.ndarray]:
        return dict(zip(self.frame_indices, self.masks))


def _refine_objects(frame, ft_weights, decoder_masks, histories, cfg, refiner, result,
                    pseudo_full):
    refined = []
    for m in decoder_masks:
        hist = histories[m.object_id]
        prompt = spatio_temporal_prompt(m, hist, cfg.refinement)
        event = {"frame": frame.index, "object": m.object_id, "event": "refine",
                 "point_from": prompt.point_source, "box_from": prompt.box_source}
        try:
            fused = modality_fuse_image(frame.rgb, frame.depth, ft_weights, prompt.box,
                                        cfg.refinement, pseudo_full)
            result.fusions.append(FusionRecord(frame.index, m.object_id, fused, prompt))
            out = refine(frame, prompt, fused, refiner, m.object_id)
            event.update(entropy=fused.entropy, depth_used=fused.depth_used)
        except RefinerError as exc:
            log.warning("frame %d object %d: refinement failed (%s); keeping decoder mask",
                        frame.index, m.object_id, exc)
            event.update(error=str(exc))
            out = m
        result.trace.append(event)
        refined.append(out)
    return refined


def run_sequence(dataset: SequenceDataset, cfg: PipelineConfig = PipelineConfig(),
                 model: VOSModel | None = None, refiner=None, evaluate: bool = True,
                 on_frame: Callable | None = None) -> RunResult:
    """Segment every frame after the first, starting from the frame-0 annotation."""
    if model is None:
        model = load_model(cfg.checkpoint) if cfg.checkpoint else build_model(cfg.model_config())
    if refiner is None and cfg.refiner != "none":
        refiner = make_refiner(cfg.refiner, dataset, cfg.endpoint, cfg.refiner_timeout)
    mcfg = model.cfg.memory
    if (mcfg.insert_every, mcfg.working_capacity, mcfg.prototype_count) != \
            (cfg.memory.insert_every, cfg.memory.working_capacity, cfg.memory.prototype_count):
        mcfg = dataclasses.replace(mcfg, insert_every=cfg.memory.insert_every,
                                   working_capacity=cfg.memory.working_capacity,
                                   prototype_count=cfg.memory.prototype_count,
                                   neighbors=cfg.memory.neighbors)
    dtype = next(model.parameters()).dtype
    objects = dataset.object_ids
    result = RunResult([], [])

    ann = dataset.first_frame_annotation
    first = dataset.frames[0]
    with torch.no_grad(), audit_gt_access() as reads:
        ft = prepare_frame(first, dtype)
        gt_masks = torch.stack([torch.from_numpy(ann == k) for k in objects]).to(dtype)
        memories, _ = init_memories(model, ft, gt_masks, mcfg, objects)
        histories = {k: ObjectHistory(cfg.refinement.history_len, cfg.refinement.centroid_mode)
                     for k in objects}
        for k in objects:
            histories[k].push(first.index, ann == k)
        result.masks.append(np.asarray(ann, dtype=np.uint8).copy())
        result.frame_indices.append(first.index)
        result.unrefined.append(result.masks[0])
        result.trace.append({"frame": first.index, "event": "init", "objects": objects})

        for n, frame in enumerate(dataset.frames[1:], start=1):
            ft = prepare_frame(frame, dtype)
            state = encode_query(model, ft)
            probs, hidden = predict(model, ft, state, memories)
            decoded = hard_masks(probs)
            result.unrefined.append(masks_to_labels(decoded, frame.shape))
            final = decoded
            if refiner is not None and cfg.refinement.always_on:
                w16 = stage_weights(state.weights, 16, "modality")
                final = _refine_objects(frame, w16, decoded, histories, cfg, refiner,
                                        result, ft.pseudo)
            for m in final:
                histories[m.object_id].push(frame.index, m)
            labels = masks_to_labels(final, frame.shape)
            result.masks.append(labels)
            result.frame_indices.append(frame.index)
            inserted = frame.index % mcfg.insert_every == 0
            if inserted:
                mask_t = torch.stack([torch.from_numpy(labels == k) for k in objects]).to(dtype)
                memorize(model, ft, state, mask_t, memories, frame.index)
            advance_sensory(model, state, hidden, memories)
            result.trace.append({"frame": frame.index, "event": "segment", "inserted": inserted,
                                 "working": len(memories[0].working),
                                 "longterm": memories[0].longterm_size,
                                 "areas": {int(k): int((labels == k).sum()) for k in objects}})
            if on_frame is not None:
                on_frame(frame, state, probs, final)
    result.gt_reads = list(reads)
    result.memories = memories
    if evaluate and any(f.has_gt for f in dataset.frames[1:]):
        result.report = evaluate_sequence(result.as_dict(), dataset, config=cfg.snapshot())
    return result


def write_outputs(result: RunResult, out_dir: str) -> None:
    os.makedirs(os.path.join(out_dir, "masks"), exist_ok=True)
    for idx, labels in zip(result.frame_indices, result.masks):
        write_label_png(os.path.join(out_dir, "masks", f"{idx:05d}.png"), labels)
    with open(os.path.join(out_dir, "trace.log"), "w") as fh:
        for event in result.trace:
            fh.write(json.dumps(event) + "\n")
    if result.report is not None:
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(result.report.to_json(indent=2))


def dump_memory(memories, path: str) -> None:
    arrays = {}
    for m in memories:
        for k, v in m.snapshot().items():
            arrays[f"object{m.object_id}.{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def sweep_runner(cfg: PipelineConfig, model: VOSModel | None = None):
    """Adapter for :func:`evaluation.sweep` that rebuilds the refinement config per cell."""
    if model is None:
        model = load_model(cfg.checkpoint) if cfg.checkpoint else build_model(cfg.model_config())

    def run(dataset, shift, entropy):
        cell = cfg.replace(**{"refinement.shift_threshold": float(shift),
                              "refinement.entropy_threshold": float(entropy)})
        return run_sequence(dataset, cell, model).report

    return run
