import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from rgbdvos.errors import ShapeError, TrainingDivergedError
from rgbdvos.losses import (LossConfig, bootstrapped_ce, dice_loss, loss_terms, selected_pixels,
                            total_loss)
from rgbdvos.model import ModelConfig, build_model
from rgbdvos.synthetic import moving_squares
from rgbdvos.training import OptimizerConfig, fit_toy, write_loss_trace


def two_class(p_fg):
    """Stack (1-p, p) as K=2 probabilities."""
    p = torch.tensor(p_fg, dtype=torch.float64)
    return torch.stack([1 - p, p])


def random_probs(k, h, w, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.softmax(torch.randn(k, h, w, generator=g, dtype=torch.float64) * 2, 0)


# --- bootstrapped CE -----------------------------------------------------------

def test_eta_one_is_plain_mean_ce():
    probs = two_class([[0.9, 0.3], [0.6, 0.2]])
    gt = torch.tensor([[1, 0], [1, 1]])
    p_true = [0.9, 0.7, 0.6, 0.2]
    want = sum(-math.log(p) for p in p_true) / 4
    assert float(bootstrapped_ce(probs, gt, 1.0)) == pytest.approx(want, abs=1e-12)


def test_perfect_predictions_give_zero():
    gt = torch.tensor([[0, 1], [2, 1]])
    probs = torch.nn.functional.one_hot(gt, 3).permute(2, 0, 1).double()
    for eta in (0.1, 0.7, 1.0):
        assert float(bootstrapped_ce(probs, gt, eta)) == 0.0
    assert float(total_loss(probs, gt, 1.0)) == 0.0


def test_hand_case_eta_half():
    probs = two_class([[0.9, 0.4], [0.2, 0.45]])
    gt = torch.tensor([[1, 1], [1, 0]])
    # true-class probabilities 0.9, 0.4, 0.2, 0.55 -> selected {0.4, 0.2}
    want = -(math.log(0.4) + math.log(0.2)) / 2
    assert float(bootstrapped_ce(probs, gt, 0.5)) == pytest.approx(want, abs=1e-12)


def test_ce_loop_oracle(rng):
    probs = random_probs(3, 5, 4, 3)
    gt = torch.from_numpy(rng.integers(0, 3, (5, 4)))
    eta = 0.4
    vals = []
    for y in range(5):
        for x in range(4):
            p = float(probs[gt[y, x], y, x])
            if p < eta:
                vals.append(-math.log(p))
    assert float(bootstrapped_ce(probs, gt, eta)) == pytest.approx(sum(vals) / len(vals), abs=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        bootstrapped_ce(torch.ones(2, 3, 3) / 2, torch.zeros(3, 4, dtype=torch.long))
    with pytest.raises(ShapeError):
        dice_loss(torch.ones(3, 3), torch.ones(3, 4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_selection_set_inclusion(seed, a, b):
    lo, hi = min(a, b), max(a, b)
    probs = random_probs(3, 6, 6, seed)
    gt = torch.from_numpy(np.random.default_rng(seed).integers(0, 3, (6, 6)))
    s_lo, s_hi = selected_pixels(probs, gt, lo), selected_pixels(probs, gt, hi)
    assert bool(torch.all(s_hi | ~s_lo))


# --- dice ---------------------------------------------------------------------

def test_dice_examples():
    g = torch.zeros(4, 4)
    g[:2, :2] = 1
    assert float(dice_loss(g.clone(), g)) == 0.0
    other = torch.zeros(4, 4)
    other[2:, 2:] = 1
    assert float(dice_loss(other, g)) == 1.0
    half = torch.zeros(4, 4)
    half[:2, 1:3] = 1                             # overlap 2, sizes 4 and 4
    assert float(dice_loss(half, g)) == 0.5
    assert float(dice_loss(torch.zeros(3, 3), torch.zeros(3, 3))) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_dice_in_unit_interval(seed, density):
    g = np.random.default_rng(seed)
    p = torch.from_numpy(g.random((5, 5)))
    m = torch.from_numpy(g.random((5, 5)) < density)
    assert 0.0 <= float(dice_loss(p, m)) <= 1.0


# --- total ----------------------------------------------------------------------

def test_total_is_sum(rng):
    probs = random_probs(3, 8, 8, 5)
    gt = torch.from_numpy(rng.integers(0, 3, (8, 8)))
    want = bootstrapped_ce(probs, gt, 0.7) + (dice_loss(probs[1], gt == 1)
                                              + dice_loss(probs[2], gt == 2)) / 2
    assert float(total_loss(probs, gt, LossConfig(0.7))) == float(want)
    assert loss_terms(probs, gt, 0.7)[0] == bootstrapped_ce(probs, gt, 0.7)


def test_warmup_schedule():
    cfg = LossConfig(0.7, bootstrap_warmup=50)
    assert cfg.threshold_at(0) == cfg.threshold_at(49) == 1.0
    assert cfg.threshold_at(50) == 0.7
    with pytest.raises(ValueError):
        LossConfig(0.0)


def test_total_loss_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(3, 8, 8, generator=g, dtype=torch.float64, requires_grad=True)
    gt = torch.from_numpy(np.random.default_rng(2).integers(0, 3, (8, 8)))

    def fn():
        return total_loss(torch.softmax(logits, 0), gt, 0.7)

    assert oracles.finite_diff_check(fn, [logits], step=1e-3) <= 1e-3


# --- toy training -------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy():
    return moving_squares(8, 64, seed=1)


def test_zero_lr_trace_constant(toy):
    res = fit_toy(toy, 4, OptimizerConfig(lr=0.0))
    assert len(set(res.losses)) == 1


def test_same_seed_same_trace(toy):
    a = fit_toy(toy, 4, OptimizerConfig(lr=1e-3)).losses
    b = fit_toy(toy, 4, OptimizerConfig(lr=1e-3)).losses
    assert a == b


def test_nan_raises_diverged(toy):
    model = build_model(ModelConfig())
    with torch.no_grad():
        next(model.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as exc:
        fit_toy(toy, 3, model=model)
    assert exc.value.step == 0


def test_loss_trace_lines(toy, tmp_path):
    res = fit_toy(toy, 2, OptimizerConfig(lr=1e-3))
    path = tmp_path / "loss.jsonl"
    write_loss_trace(res.trace, str(path))
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1]
    for r, rec in zip(rows, res.trace):
        assert set(r) == {"step", "L_bce", "L_d", "L_total"}
        assert r["L_total"] == pytest.approx(r["L_bce"] + r["L_d"], abs=1e-6)
