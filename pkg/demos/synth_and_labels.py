"""
Synthetic pairs and their training targets
==========================================

Generate one pair per difficulty level, rasterize the region and kernel
labels of the target, and save a strip of images for a quick look.
"""
import sys
from pathlib import Path

import numpy as np

from roimatch.data import LEVELS, synth_pair, write_image
from roimatch.labelgen import generate_targets

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/synth")
out.mkdir(parents=True, exist_ok=True)

for level in LEVELS:
    s = synth_pair(level, seed=3, size=256)
    h, w = s.target_image.shape[:2]
    t = generate_targets(s.target_polygons, h, w)
    print(f"level {level}: {len(t.instance_ids)} instances, "
          f"region {t.region.mean():.1%} of pixels, kernel {t.kernel.mean():.1%}")

    # reference with prompt tint | target | region (grey) + kernel (white)
    ref = s.reference_image.copy()
    ref[s.reference_mask > 0] = (0.5 * ref[s.reference_mask > 0] + [0, 127, 0]).astype(np.uint8)
    labels = np.repeat((t.region * 120 + t.kernel * 135)[..., None], 3, axis=2).astype(np.uint8)
    write_image(out / f"level_{level}.png", np.concatenate([ref, s.target_image, labels], axis=1))

print("wrote", out)
