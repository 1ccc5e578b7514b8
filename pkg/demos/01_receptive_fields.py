"""
Receptive fields and kernel spectra
===================================

How far a stack of dilated 3x3x3 layers can see, and what dilation does to a
kernel's frequency response.
"""

import numpy as np

from brainmask.meshnet import DilationSchedule
from brainmask.spectral import (
    YU_KOLTUN,
    effective_kernel_size,
    kernel_spectrum,
    receptive_field,
    schedule_report,
)

# A single tap spacing of 16 turns a 3-wide kernel into a 33-wide one with
# the same three weights.
for d in (1, 2, 4, 8, 16):
    print(f"dilation {d:2d}: effective kernel {effective_kernel_size(3, d)}")

# The classic context module used for 2D scene parsing.
print("context module:", receptive_field(YU_KOLTUN).rf)

# Blocks are written as glyphs: > is 16,8,4,2,1 and < is 1,2,4,8,16.
for glyphs in ("><", "<>", ">>", ">>>>>"):
    sched = DilationSchedule.from_glyphs(glyphs)
    print(f"{glyphs:6s} {len(sched):2d} layers  rf={receptive_field(sched).rf}")

# The same numbers as a CSV table, including the published block layouts
# and whether each computed value agrees with the quoted one.  Here the
# outward-inward pair shares its middle layer, giving 9 layers instead of 10.
print(schedule_report(include_published=True))

# Dilating a smoothing kernel by d compresses its spectrum d times, so it
# repeats d times across the band.
taps = [0.25, 0.5, 0.25]
for d in (1, 2, 4):
    mag = kernel_spectrum(taps, d, 32).magnitudes
    print(f"d={d}: " + " ".join(f"{v:.2f}" for v in mag[:17]))

# Index m at dilation d equals index d*m (mod N) at dilation 1.
n, d = 128, 8
base = kernel_spectrum(taps, 1, n).magnitudes
wide = kernel_spectrum(taps, d, n).magnitudes
print("aliasing identity holds:", np.allclose(wide, base[(d * np.arange(n)) % n]))
