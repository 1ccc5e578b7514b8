"""
Training a small network from scratch
=====================================

One block of five dilated layers (16, 8, 4, 2, 1) with eight channels learns
to segment bright balls from a dim shell and noise.  Everything runs in
float64 numpy: soft Dice loss, hand-written reverse mode, Adam and a cyclic
one-cycle schedule.

Pass a step count to train longer, e.g. ``python 05_train_toy.py 500``.
"""

import sys

import numpy as np

from brainmask.meshnet import count_params, preset
from brainmask.traintoy import NoisySpheres, TrainConfig, evaluate_dice, onecycle_lr, train_toy

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 100
spec = preset("toy-block")
print(f"{spec.name}: {len(spec.layers)} layers, {count_params(spec)} parameters")

cfg = TrainConfig(total_steps=steps, cycles=max(1, steps * TrainConfig().cycles // 500))
print("learning rate over the first cycle:",
      " ".join(f"{onecycle_lr(s, cfg.cycle_len, cfg):.4f}" for s in range(0, cfg.cycle_len, 10)))

history = []
weights = train_toy(spec, cfg, log=history.append)
for start in range(0, steps, max(1, steps // 5)):
    chunk = history[start:start + max(1, steps // 5)]
    print(f"steps {start:4d}+  loss {np.mean([h['loss'] for h in chunk]):.3f}"
          f"  dice {np.mean([h['dice'] for h in chunk]):.3f}")

fresh = NoisySpheres().batch(np.random.default_rng(2024), 8)
print("Dice on 8 fresh samples:", round(evaluate_dice(spec, weights, fresh), 4))
