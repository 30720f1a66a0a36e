"""A short desk-scale training run followed by inference and evaluation.

Run: python demos/05_train_and_infer.py [steps] [variant]
The default 300 U-Net steps take about a minute on one core and only start to close
gaps; a few thousand steps are needed for the results reported in the README.
"""
import sys

import torch

from thin_inpaint.gap_synth import corrupt_image
from thin_inpaint.mask_data import SynthConfig, generate_structure
from thin_inpaint.metrics import evaluate
from thin_inpaint.training import desk_config, infer, init_state, schedule_step

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
variant = sys.argv[2] if len(sys.argv) > 2 else "unet"
torch.set_num_threads(1)

masks = [generate_structure(SynthConfig(seed=i, canvas=(256, 256), min_length=120)) for i in range(40)]
train_masks, held_out = masks[:32], masks[32:]
cfg = desk_config(variant=variant, steps=steps)
state = init_state(cfg)
while state.step < steps:
    schedule_step(state, cfg, train_masks)
    if state.step % 50 == 0:
        terms = {k: v for k, v in state.last.items() if v == v}  # unused terms are logged as nan
        print(f"step {state.step:5d}  " + "  ".join(f"{k} {v:.4f}" for k, v in terms.items()))

pairs = [corrupt_image(m, cfg.gap, cfg.patch_size, seed=100 + j) for j, m in enumerate(held_out)]
xs, gaps = [p[0] for p in pairs], [p[1] for p in pairs]
xhs = [infer(state.G, x, cfg.patch_size)[0] for x in xs]
model = evaluate(held_out, xs, xhs, gaps)
baseline = evaluate(held_out, xs, xs, gaps)
print(f"mse within gaps: model {model.mse_within_gaps:.4f}  do-nothing {baseline.mse_within_gaps:.4f}")
print(f"relative component improvement {model.rel_comp_diff:.3f}")
print(f"components: gt {model.mean['components_gt']:.1f}, corrupted {model.mean['components_before']:.1f}, "
      f"inpainted {model.mean['components_after']:.1f}")
