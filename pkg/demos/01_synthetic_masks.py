"""Synthetic thin-structure masks, their skeletons and the traits measured on them.

Run: python demos/01_synthetic_masks.py [out_dir]
"""
import sys
from pathlib import Path

from thin_inpaint.mask_data import SynthConfig, generate_structure, save_mask, skeletonize
from thin_inpaint.metrics import connected_components, root_traits

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/synthetic")
out.mkdir(parents=True, exist_ok=True)

# Each seed gives a different branching structure. Thickness and branching are
# config fields; the defaults look roughly like a root system on a 512 canvas.
for seed in range(3):
    mask = generate_structure(SynthConfig(seed=seed))
    save_mask(mask, out / f"root_{seed}.png")
    save_mask(skeletonize(mask), out / f"root_{seed}_skeleton.png")
    t = root_traits(mask)
    print(f"seed {seed}: {mask.sum():6d} fg px, {connected_components(mask)} component, "
          f"length {t.length:7.1f}, tips {t.tips:2d}, hull area {t.hull_area:8.1f}")

# A thinner, bushier variant on a smaller canvas.
bushy = generate_structure(SynthConfig(seed=7, canvas=(256, 256), thickness=1, branch_prob=0.05,
                                       min_length=150))
save_mask(bushy, out / "bushy.png")
print("bushy:", root_traits(bushy))
print(f"wrote PNGs to {out}")
