"""
Train a toy model and segment a held-out scene
==============================================

Fits the full network on four synthetic moving-square sequences, then
tracks a square it has never seen, first from memory alone and then
with a ground-truth stand-in for the promptable refiner.
"""

import os
import sys

from rgbdvos.model import save_checkpoint
from rgbdvos.pipeline import PipelineConfig, run_sequence, write_outputs
from rgbdvos.synthetic import moving_squares
from rgbdvos.training import OptimizerConfig, fit_toy, write_loss_trace

out_dir = sys.argv[1] if len(sys.argv) > 1 else "demo_output"
os.makedirs(out_dir, exist_ok=True)

############################################################
# Training data: every frame of these sequences is annotated.

train = [moving_squares(8, 64, seed=s) for s in range(1, 5)]
result = fit_toy(train, steps=300, optimizer=OptimizerConfig(lr=1e-3))
losses = result.losses
for step in (0, 49, 50, 100, 200, 299):
    print(f"step {step:3d}  loss {losses[step]:.4f}")
write_loss_trace(result.trace, os.path.join(out_dir, "loss.jsonl"))
save_checkpoint(result.model, os.path.join(out_dir, "toy.npz"))

############################################################
# The jump at step 50 is the bootstrap threshold switching on: before
# it every pixel counts, afterwards only the uncertain ones do.
#
# Held-out scene, memory only.

scene = moving_squares(8, 64, seed=100)
plain = run_sequence(scene, PipelineConfig(), result.model)
print("memory only:     ", plain.report.summary())

############################################################
# Same scene with the oracle refiner, which returns the true mask inside
# the crop it is given. Frame-by-frame J never goes down.

refined = run_sequence(scene, PipelineConfig(refiner="mock-oracle"), result.model)
print("oracle refiner:  ", refined.report.summary())
for event in refined.trace:
    if event["event"] == "refine":
        print(f"  frame {event['frame']}: point from {event['point_from']}, "
              f"box from {event['box_from']}, depth blended {event['depth_used']}")
write_outputs(plain, os.path.join(out_dir, "held_out"))
