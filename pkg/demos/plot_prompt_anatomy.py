"""
Where the prompts live
======================

Three kinds of speaker prompt attach to a frozen recognizer: a frame-sized
image added to every input frame, learnable rings that replace zero padding
in the convolutions, and a few extra rows prepended to the feature sequence.
"""

import numpy as np

from vsprompt.autodiff import no_grad
from vsprompt.layers import border_indices, pad_region_size
from vsprompt.model import build, forward, grid_tiny, parameter_count
from vsprompt.prompts import COMBINATIONS, init_prompts

cfg = grid_tiny()
model = build(cfg, seed=0).freeze()
print(f"{cfg.name}: {parameter_count(model)['total']} parameters")

# %%
# Each padded conv layer gets a ring of S cells per input channel.
for layer, (S, C) in model.pad_shapes().items():
    print(f"conv{layer}: ring {S} x {C}")

# a 4x5 map with one column left, two right and one row on top
print(pad_region_size(4, 5, 1, 2, 1, 0), len(border_indices(4, 5, 1, 2, 1, 0)))

# %%
# Prompt sizes per combination, next to the full model.
for combo in COMBINATIONS:
    counts = parameter_count(model, init_prompts(cfg, combo, seed=0))
    print(f"{combo:6s} {counts['prompt_total']:5d}  {100 * counts['ratio']:.3f}%")

# %%
# Freshly initialised addition and padding prompts are zero, so they start
# exactly at the unadapted model. Cat rows are small random vectors and do not.
rng = np.random.default_rng(0)
video = rng.uniform(0, 1, (8, cfg.frames, cfg.height, cfg.width, 1))
with no_grad():
    base = forward(model, video).data
    for combo in ("A", "P", "A+P", "C"):
        out = forward(model, video, init_prompts(cfg, combo, seed=0)).data
        print(combo, float(np.abs(out - base).max()))

# %%
# The cat rows sit in front of the frames during attention and are cut off
# afterwards, so the CTC output still has one row per frame.
with no_grad():
    out = forward(model, video, init_prompts(cfg, "C", seed=0, cat_length=9))
print(out.shape)
