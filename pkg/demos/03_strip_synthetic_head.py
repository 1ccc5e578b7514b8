"""
Stripping a synthetic head
==========================

Run the full pipeline on a phantom, with and without the head-tight crop,
and look at where the memory goes.  A one-layer intensity threshold stands
in for trained weights so the result is easy to predict.
"""

import tempfile
from pathlib import Path

import numpy as np

from brainmask import niftio
from brainmask.meshnet import MINDGRAB, activation_bound_bytes, init_weights, write_model
from brainmask.pipeline import StripRequest, bench, run_strip, threshold_weights
from brainmask.volume import Volume

tmp = Path(tempfile.mkdtemp())

# Phantom: bright "brain" ball inside a dimmer "skull" shell, 2 mm voxels.
n = 100
affine = np.diag([2.0, 2.0, 2.0, 1.0])
affine[:3, 3] = -99.0
r = np.linalg.norm(np.indices((n, n, n)) * 2.0 - 99.0, axis=0)  # mm from the centre
head = np.where(r < 60, 1.0, 0.0) + np.where((r > 64) & (r < 72), 0.3, 0.0)
niftio.write_nifti(Volume(head.astype(np.float32), affine), tmp / "head.nii.gz")

weights_json, _ = write_model(threshold_weights(0.5), tmp / "threshold.json")

# Outputs land on the input's own grid: brain image plus a _mask file.
result = run_strip(StripRequest(str(tmp / "head.nii.gz"), str(tmp / "brain.nii.gz"),
                                weights_json, crop=True))
mask = niftio.read_nifti(tmp / "brain_mask.nii.gz")
print("mask grid", mask.voxels.shape, "voxels in mask", int(mask.voxels.sum()))
print("crop box on the conformed grid", result.bbox)
print("timings", {k: round(v, 2) for k, v in result.timings.items()})

# Bench both paths; the activation peak scales with the grid the network sees.
for rec in bench([str(tmp / "head.nii.gz")], weights_json, compare_crop=True):
    print(f"{rec.mode:4s} grid {rec.shape:12s} activations {rec.peak_activation_bytes / 2**20:7.1f} MiB"
          f"  wall {rec.wall_seconds:.1f} s")

# For the full 26-layer network the two ping-pong buffers dominate memory.
for grid in ((256, 256, 256), (180, 180, 180)):
    mib = activation_bound_bytes(MINDGRAB, grid) / 2**20
    print(f"MINDGRAB on {grid[0]}^3: at most {mib:.0f} MiB of activations")
print("MINDGRAB weights:", init_weights(MINDGRAB).nbytes, "bytes")
