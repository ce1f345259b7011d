"""Bootstrapped cross-entropy, soft dice, and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError

EPS = 1e-8


@dataclass(frozen=True)
class LossConfig:
    bootstrap_threshold: float = 0.7
    bootstrap_warmup: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.bootstrap_threshold <= 1:
            raise ValueError("bootstrap_threshold must lie in (0, 1]")
        if self.bootstrap_warmup < 0:
            raise ValueError("bootstrap_warmup must be >= 0")

    def threshold_at(self, step: int) -> float:
        return 1.0 if step < self.bootstrap_warmup else self.bootstrap_threshold


def _as_labels(gt, like: torch.Tensor) -> torch.Tensor:
    gt = torch.as_tensor(gt, device=like.device).long()
    if gt.shape != like.shape[1:]:
        raise ShapeError(f"labels {tuple(gt.shape)} vs probabilities {tuple(like.shape)}")
    return gt


def selected_pixels(probs, gt, eta: float) -> torch.Tensor:
    """Pixels whose true-class probability is below ``eta``."""
    gt = _as_labels(gt, probs)
    p_true = probs.gather(0, gt[None])[0]
    return p_true < eta


def bootstrapped_ce(probs: torch.Tensor, gt, eta: float = 1.0) -> torch.Tensor:
    """Mean cross-entropy over pixels whose true-class probability is below ``eta``.

    ``probs`` is (K, H, W), normalized over K; ``gt`` holds labels in [0, K).
    """
    gt = _as_labels(gt, probs)
    p_true = probs.gather(0, gt[None])[0]
    sel = p_true < eta
    if not bool(sel.any()):
        return probs.sum() * 0.0
    return -torch.log(p_true[sel].clamp_min(EPS)).mean()


def dice_loss(mask_probs: torch.Tensor, gt) -> torch.Tensor:
    """1 - 2 sum(p g) / (sum p + sum g); both empty counts as perfect."""
    g = torch.as_tensor(gt, device=mask_probs.device).to(mask_probs.dtype)
    if g.shape != mask_probs.shape:
        raise ShapeError(f"mask {tuple(g.shape)} vs probabilities {tuple(mask_probs.shape)}")
    denom = mask_probs.sum() + g.sum()
    if float(denom.detach()) == 0.0:
        return mask_probs.sum() * 0.0
    return 1 - 2 * (mask_probs * g).sum() / denom


def loss_terms(probs, gt, eta: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    gt = _as_labels(gt, probs)
    l_bce = bootstrapped_ce(probs, gt, eta)
    n_obj = probs.shape[0] - 1
    if n_obj < 1:
        raise ShapeError("need at least one object channel")
    l_d = sum(dice_loss(probs[k], gt == k) for k in range(1, n_obj + 1)) / n_obj
    return l_bce, l_d


def total_loss(probs, gt, cfg: LossConfig | float = LossConfig(), step: int | None = None):
    """Bootstrapped CE plus dice averaged over objects.

    ``cfg`` may be a LossConfig (threshold chosen by ``step``; no step means
    the configured threshold) or a bare threshold.
    """
    if isinstance(cfg, LossConfig):
        eta = cfg.bootstrap_threshold if step is None else cfg.threshold_at(step)
    else:
        eta = float(cfg)
    l_bce, l_d = loss_terms(probs, gt, eta)
    return l_bce + l_d
