"""Network bundle and flat ``.npz`` checkpoints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, DualStreamEncoder, zero_parameters
from .decoder import Decoder
from .errors import ShapeError
from .memory import KeyProjection, MemoryConfig, MemoryEncoder, SensoryUpdater

CONFIG_KEY = "__config__"


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    memory_widths: tuple[int, int] = (16, 32)


class VOSModel(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.cfg = cfg
        widths = tuple(cfg.backbone.widths)
        m = cfg.memory
        self.encoder = DualStreamEncoder(widths)
        self.key_proj = KeyProjection(widths[2], m.key_channels)
        self.mem_encoder = MemoryEncoder(m.value_channels, cfg.memory_widths)
        self.decoder = Decoder(m.value_channels, widths, m.hidden_channels)
        self.sensory = SensoryUpdater(widths[2] + m.hidden_channels, m.hidden_channels)


def build_model(cfg: ModelConfig = ModelConfig(), dtype=torch.float32) -> VOSModel:
    """Seeded construction; honours ``cfg.backbone.weight_source``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.backbone.seed)
        model = VOSModel(cfg)
    model = model.to(dtype)
    src = cfg.backbone.weight_source
    if src == "zero":
        zero_parameters(model)
    elif src == "file":
        load_state(model, cfg.backbone.weight_path)
    return model.eval()


def save_checkpoint(model: VOSModel, path: str) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    cfg = asdict(model.cfg)
    arrays[CONFIG_KEY] = np.array(json.dumps(cfg))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_config(path: str) -> ModelConfig:
    with np.load(path) as z:
        raw = json.loads(str(z[CONFIG_KEY]))
    b = raw["backbone"]
    return ModelConfig(
        BackboneConfig(tuple(b["widths"]), b["seed"], "file", path),
        MemoryConfig(**raw["memory"]),
        tuple(raw["memory_widths"]))


def load_state(model: nn.Module, path: str, strict: bool = True) -> nn.Module:
    """Load a flat key->array archive, checking every declared shape."""
    own = model.state_dict()
    with np.load(path) as z:
        keys = [k for k in z.files if k != CONFIG_KEY]
        missing = sorted(set(own) - set(keys))
        extra = sorted(set(keys) - set(own))
        if strict and (missing or extra):
            raise KeyError(f"checkpoint mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        state = {}
        for k in keys:
            if k not in own:
                continue
            arr = z[k]
            if tuple(arr.shape) != tuple(own[k].shape):
                raise ShapeError(f"{k}: checkpoint {arr.shape} vs model {tuple(own[k].shape)}")
            state[k] = torch.from_numpy(arr).to(own[k].dtype)
    model.load_state_dict(state, strict=False)
    return model


def load_model(path: str) -> VOSModel:
    return build_model(read_checkpoint_config(path))
