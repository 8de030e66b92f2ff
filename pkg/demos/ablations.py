"""
Ablations and compute
=====================

Compare the full objective against plain BCE+dice, and mask fusion before
versus after the encoder. Every arm sees the same data, budget and seed.
Finishes with the forward FLOPs saved by grid sampling at 640x640.

    python demos/ablations.py [seeds]

Each arm takes about 4 minutes on one CPU core; skip with seeds=0.
"""
import sys
from dataclasses import replace

from roimatch.experiments import (TOY_CONFIG, AblationSetup, ablation_data, grid_sampling_saving,
                                  train_and_test)
from roimatch.loss import LossConfig

seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 1
setup = AblationSetup()
train_set, test_set = ablation_data(setup)

arms = {
    "full loss, pre-fusion": (TOY_CONFIG, LossConfig()),
    "bce+dice, pre-fusion": (TOY_CONFIG, LossConfig(loss_mode="ce_dice")),
    "full loss, post-fusion": (replace(TOY_CONFIG, mask_fusion="post"), LossConfig()),
}
for seed in range(seeds):
    for name, (mcfg, lcfg) in arms.items():
        rep = train_and_test(mcfg, lcfg, train_set, test_set, setup, seed)
        print(f"seed {seed}  {name:24s}  mIoU {rep.miou:.3f}  F {rep.f_measure:.3f}")

on, off = grid_sampling_saving(640)[:2]
print(f"forward GFLOPs at 640x640: {on / 1e9:.1f} with grid sampling, {off / 1e9:.1f} without "
      f"({1 - on / off:.1%} saved)")
