"""
Working memory, long-term prototypes and readout
================================================

A per-object memory keeps a handful of recent frames at full resolution
and compresses older ones into prototypes. This script fills one up,
watches it consolidate, and reads from it.
"""

import torch

from rgbdvos.memory import (MemoryConfig, MemoryKey, MemoryValue, MultiStoreMemory,
                            insert_working, readout)

torch.manual_seed(0)

############################################################
# Three frames of capacity, four prototypes per consolidation. Each
# "frame" here is a 2-channel key and 3-channel value on a 2x2 grid.

mem = MultiStoreMemory(MemoryConfig(working_capacity=3, prototype_count=4, neighbors=3))


def frame(t):
    key = torch.randn(2, 2, 2, dtype=torch.float64) + t
    value = torch.full((3, 2, 2), float(t), dtype=torch.float64)
    return MemoryKey(key), MemoryValue(value, frame_index=t)


for t in range(6):
    k, v = frame(t)
    insert_working(mem, k, v)
    frames = [e.frame_index for e in mem.working]
    print(f"after frame {t}: working {frames}, long-term {mem.longterm_size} prototypes")

############################################################
# Reading with a query close to frame 5's keys pulls mostly frame 5's
# values; the weights over all stored positions sum to one.

query = MemoryKey(torch.full((2, 1, 1), 5.0, dtype=torch.float64))
out, w = readout(query, mem, return_weights=True)
print("readout:", out.flatten().tolist())
print("weights sum to %.12f over %d positions" % (float(w.sum()), w.shape[0]))

############################################################
# Every readout credits the single best-matching working position;
# those counts decide which positions survive as prototypes later.

for e in mem.working:
    print(f"frame {e.frame_index} usage {e.usage.tolist()}")
print("prototype source frames:", mem.lt_frames.tolist())
