"""RGB-D video object segmentation with multi-store feature memory.

Subpackages by role:

- ``core``: frames, masks, boxes, prompts, sequence I/O
- ``backbone``: residual feature extractor and modality selection/fusion
- ``memory``: key/value encoding, readout, working and long-term stores
- ``decoder``: mask decoding and hard label assignment
- ``refinement``: prompt generation, entropy-gated image fusion, refiners
- ``losses`` / ``training``: objectives and a toy training loop
- ``evaluation``: J, F, J&F, reports, threshold sweeps
- ``pipeline`` / ``cli``: the frame loop and command line
"""

from .core import (BinaryMask, BoundingBox, MixedPrompt, PromptPoint, RGBDFrame,
                   SequenceDataset, load_sequence, mask_area, mask_bbox, mask_centroid)
from .evaluation import evaluate_sequence, f_measure, j_measure, jf, sweep
from .pipeline import PipelineConfig, run_sequence

__version__ = "0.1.0"

__all__ = [
    "BinaryMask", "BoundingBox", "MixedPrompt", "PromptPoint", "RGBDFrame",
    "SequenceDataset", "load_sequence", "mask_area", "mask_bbox", "mask_centroid",
    "evaluate_sequence", "f_measure", "j_measure", "jf", "sweep",
    "PipelineConfig", "run_sequence",
]
