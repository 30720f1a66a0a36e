"""Cutting artificial gaps into a mask and moving between images and patches.

Run: python demos/02_gaps_and_patches.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from thin_inpaint.gap_synth import GAP_KINDS, GapConfig, corrupt_image, desk_gap_config
from thin_inpaint.mask_data import SynthConfig, generate_structure, save_mask
from thin_inpaint.metrics import connected_components
from thin_inpaint.patching import extract_patches, partial_recompose, recompose

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/gaps")
out.mkdir(parents=True, exist_ok=True)
mask = generate_structure(SynthConfig(seed=1))

# One corruption per gap kind, using the 256-pixel tile defaults.
for kind in GAP_KINDS:
    x, gaps = corrupt_image(mask, GapConfig(kind=kind), patch_size=256, seed=0)
    save_mask(x, out / f"{kind}_corrupt.png")
    save_mask(gaps, out / f"{kind}_gaps.png")
    lost = (mask & gaps).sum()
    print(f"{kind:6s}: gap area {gaps.mean():5.1%}, foreground removed {lost:5d} px, "
          f"components {connected_components(mask)} -> {connected_components(x)}")

# Desk-scale runs use 64-pixel patches with proportionally smaller gaps.
x, gaps = corrupt_image(mask, desk_gap_config(64), patch_size=64, seed=0)
print(f"desk gaps on 64 px tiles: components 1 -> {connected_components(x)}")

# Patches are taken row-major from a zero-padded grid, and recompose crops the padding.
odd = mask[:300, :470]
patches, layout = extract_patches(odd, 64)
print(f"300x470 mask -> {len(patches)} patches on a {layout.grid} grid, padded to {layout.padded_shape}")
assert np.array_equal(recompose(patches, layout), odd)

# partial_recompose swaps only chosen patch slots into an existing image.
blank = [np.zeros_like(p) for p in patches]
erased = partial_recompose(odd, [blank[0], blank[5]], [0, 5], layout)
print(f"erasing patches 0 and 5 removes {(odd & ~erased).sum()} foreground px")
