"""Desk-scale training loop over whole synthetic sequences."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import TrainingDivergedError
from .losses import LossConfig, loss_terms
from .memory import MemoryConfig
from .model import ModelConfig, VOSModel, build_model
from .pipeline import advance_sensory, encode_query, init_memories, memorize, predict, prepare_frame


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float | None = 1.0


@dataclass
class LossRecord:
    step: int
    L_bce: float
    L_d: float
    L_total: float


@dataclass
class TrainResult:
    model: VOSModel
    trace: list[LossRecord] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [r.L_total for r in self.trace]


def write_loss_trace(trace, path: str) -> None:
    with open(path, "w") as fh:
        for r in trace:
            fh.write(json.dumps(dataclasses.asdict(r)) + "\n")


def _cache(dataset, dtype):
    fts = [prepare_frame(f, dtype) for f in dataset.frames]
    gts = [torch.from_numpy(f.gt_mask.astype(np.int64)) for f in dataset.frames]
    return fts, gts


def unroll(model: VOSModel, fts, gts, object_ids, mcfg: MemoryConfig, frame_indices):
    """Differentiable pass over one sequence; soft masks are fed to memory."""
    first = torch.stack([(gts[0] == k) for k in object_ids]).to(fts[0].rgb.dtype)
    memories, _ = init_memories(model, fts[0], first, mcfg, object_ids)
    outputs = []
    for ft, idx in zip(fts[1:], frame_indices[1:]):
        state = encode_query(model, ft)
        probs, hidden = predict(model, ft, state, memories)
        outputs.append(probs)
        if idx % mcfg.insert_every == 0:
            memorize(model, ft, state, probs[1:], memories, idx)
        advance_sensory(model, state, hidden, memories)
    return outputs


def fit_toy(datasets, steps: int = 200, optimizer: OptimizerConfig = OptimizerConfig(),
            loss_cfg: LossConfig = LossConfig(), model: VOSModel | None = None,
            model_cfg: ModelConfig | None = None) -> TrainResult:
    """Train on one or more fully annotated sequences, one sequence per step.

    Raises TrainingDivergedError when a loss turns non-finite.
    """
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    if model is None:
        model = build_model(model_cfg or ModelConfig())
    dtype = next(model.parameters()).dtype
    mcfg = model.cfg.memory
    cached = [(_cache(d, dtype), d.object_ids, [f.index for f in d.frames]) for d in datasets]
    opt = torch.optim.AdamW(model.parameters(), lr=optimizer.lr, betas=optimizer.betas,
                            weight_decay=optimizer.weight_decay)
    result = TrainResult(model)
    model.train()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(loss_cfg.seed)
        for step in range(steps):
            (fts, gts), objects, indices = cached[step % len(cached)]
            eta = loss_cfg.threshold_at(step)
            outputs = unroll(model, fts, gts, objects, mcfg, indices)
            bce, dice = [], []
            for probs, gt in zip(outputs, gts[1:]):
                b, d = loss_terms(probs, gt, eta)
                bce.append(b)
                dice.append(d)
            l_bce = torch.stack(bce).mean()
            l_d = torch.stack(dice).mean()
            loss = l_bce + l_d
            if not math.isfinite(float(loss.detach())):
                raise TrainingDivergedError(step)
            opt.zero_grad()
            loss.backward()
            if optimizer.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), optimizer.grad_clip)
            opt.step()
            result.trace.append(LossRecord(step, float(l_bce.detach()), float(l_d.detach()),
                                          float(loss.detach())))
    model.eval()
    return result
