"""
Reading, conforming and writing NIfTI volumes
=============================================

Build an oblique, anisotropic scan in memory, resample it onto the 256^3
1 mm grid the network expects, and map a mask back again.
"""

import tempfile
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from brainmask import niftio
from brainmask.volume import Mask, Volume, conform, mask_to_native, normalize_percentile

# A 1.2 x 1.2 x 3 mm acquisition tilted by a few degrees.
affine = np.eye(4)
affine[:3, :3] = Rotation.from_euler("xyz", [5, -8, 12], degrees=True).as_matrix() * [1.2, 1.2, 3.0]
affine[:3, 3] = [-90, -100, -70]
shape = (150, 160, 60)
ijk = np.indices(shape).reshape(3, -1).T
world = ijk @ affine[:3, :3].T + affine[:3, 3]
centre = world.mean(axis=0)
radius = np.linalg.norm(world - centre, axis=1).reshape(shape)
data = np.where(radius < 70, 100.0, 0.0) + np.where((radius > 74) & (radius < 80), 40.0, 0.0)
scan = Volume(data.astype(np.float32), affine)

# Write as gzipped NIfTI-1 and read it back; geometry survives the trip.
tmp = Path(tempfile.mkdtemp())
niftio.write_nifti(scan, tmp / "scan.nii.gz")
raw = niftio.read_nifti(tmp / "scan.nii.gz")
print("header dims", raw.header.shape, "datatype", raw.header.datatype_code)
print("affine recovered:", np.allclose(raw.affine, affine, atol=1e-4))

# Conform: 256^3 voxels of 1 mm, axes aligned with RAS, centred on the scan.
conformed, transform = conform(raw.to_volume())
print("conformed", conformed.shape, "spacing", conformed.spacing)

# Intensities are mapped so the 2nd and 98th percentiles land on 0 and 1.
normed = normalize_percentile(conformed)
print("normalised range", float(normed.data.min()), float(normed.data.max()))

# Any mask computed on the conformed grid can be taken back to the scan's
# own voxels with nearest-neighbour lookup.
conformed_mask = Mask((normed.data > 0.5).astype(np.uint8), normed.affine)
native = mask_to_native(conformed_mask, transform)
truth = radius < 70
agree = 2 * np.count_nonzero(native.data.astype(bool) & truth) / (native.data.sum() + truth.sum())
print("native mask shape", native.shape, "Dice vs analytic ball", round(agree, 4))
