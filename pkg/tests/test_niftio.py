import gzip
import os

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from brainmask import niftio
from brainmask.errors import (
    BadMagic,
    NiftiError,
    NonFiniteVoxel,
    Truncated,
    UnrepresentableValue,
    UnsupportedDatatype,
    UnsupportedFormat,
)
from brainmask.volume import Mask, Volume

from niftibytes import raw_nifti


def test_scaling_applied_to_f32_voxels():
    data = np.zeros((2, 2, 2), np.float32)
    data[1, 0, 1] = 3.0
    img = niftio.read_nifti(raw_nifti(data, 16, slope=2.0, inter=1.0))
    assert img.voxels.dtype == np.float32
    assert img.voxels[1, 0, 1] == 7.0
    assert img.voxels[0, 0, 0] == 1.0


def test_zero_slope_means_unscaled():
    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    img = niftio.read_nifti(raw_nifti(data, 4, slope=0.0, inter=5.0))
    np.testing.assert_array_equal(img.voxels, data.astype(np.float32))


def test_bad_magic():
    blob = raw_nifti(np.zeros((2, 2, 2), np.float32), 16, magic=b"abcd")
    with pytest.raises(BadMagic):
        niftio.read_nifti(blob)


def test_nifti2_reported_as_unsupported():
    blob = raw_nifti(np.zeros((2, 2, 2), np.float32), 16, sizeof_hdr=540)
    with pytest.raises(UnsupportedFormat):
        niftio.read_nifti(blob)


@pytest.mark.parametrize("code,dtype", [
    (2, np.uint8), (4, np.int16), (8, np.int32), (16, np.float32), (64, np.float64),
    (256, np.int8), (512, np.uint16), (768, np.uint32),
])
def test_every_supported_datatype(code, dtype, rng):
    info = np.iinfo(dtype) if np.issubdtype(dtype, np.integer) else None
    if info is not None:
        data = rng.integers(max(info.min, -1000), min(info.max, 1000), (3, 4, 5)).astype(dtype)
    else:
        data = rng.normal(size=(3, 4, 5)).astype(dtype)
    img = niftio.read_nifti(raw_nifti(data, code))
    np.testing.assert_array_equal(img.voxels, data.astype(np.float32))


def test_unsupported_datatype():
    blob = raw_nifti(np.zeros((2, 2, 2), np.complex64), 32)
    with pytest.raises(UnsupportedDatatype):
        niftio.read_nifti(blob)


def test_truncated_payload():
    blob = raw_nifti(np.zeros((4, 4, 4), np.float32), 16)
    with pytest.raises(Truncated):
        niftio.read_nifti(blob[:-10])
    with pytest.raises(Truncated):
        niftio.read_nifti(blob[:100])


def test_non_finite_voxel_rejected():
    data = np.zeros((2, 2, 2), np.float32)
    data[0, 1, 0] = np.nan
    with pytest.raises(NonFiniteVoxel):
        niftio.read_nifti(raw_nifti(data, 16))


def test_small_vox_offset_rejected():
    blob = bytearray(raw_nifti(np.zeros((2, 2, 2), np.float32), 16))
    import struct
    struct.pack_into("<f", blob, 108, 300.0)
    with pytest.raises(NiftiError):
        niftio.read_nifti(bytes(blob))


def test_big_endian_file():
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    img = niftio.read_nifti(raw_nifti(data, 16, endian=">"))
    np.testing.assert_array_equal(img.voxels, data)


def test_gzip_transparency(tmp_path):
    data = np.random.default_rng(0).normal(size=(5, 6, 7)).astype(np.float32)
    blob = raw_nifti(data, 16)
    (tmp_path / "a.nii").write_bytes(blob)
    (tmp_path / "a.nii.gz").write_bytes(gzip.compress(blob))
    a = niftio.read_nifti(tmp_path / "a.nii")
    b = niftio.read_nifti(tmp_path / "a.nii.gz")
    np.testing.assert_array_equal(a.voxels, b.voxels)
    np.testing.assert_array_equal(a.affine, b.affine)


def test_sform_beats_qform():
    sform = [[2.0, 0, 0, -10], [0, 3.0, 0, 5], [0, 0, 4.0, 7]]
    blob = raw_nifti(np.zeros((2, 2, 2), np.float32), 16, sform=sform, sform_code=1,
                     qform_code=1, quatern=(0.0, 0.0, 1.0), qoffset=(1.0, 2.0, 3.0))
    img = niftio.read_nifti(blob)
    np.testing.assert_array_equal(img.affine[:3], np.array(sform, dtype=np.float32))


def test_qform_matches_rotation_oracle():
    rot = Rotation.from_euler("xyz", [20, -35, 50], degrees=True)
    x, y, z, w = rot.as_quat()
    if w < 0:
        x, y, z, w = -x, -y, -z, -w
    pix = (1.0, 1.5, 2.0, 2.5)
    blob = raw_nifti(np.zeros((2, 2, 2), np.float32), 16, qform_code=1, quatern=(x, y, z),
                     qoffset=(-3.0, 4.0, 10.0), pixdim=pix)
    aff = niftio.read_nifti(blob).affine
    expected = rot.as_matrix() * np.array(pix[1:])
    np.testing.assert_allclose(aff[:3, :3], expected, atol=1e-6)
    np.testing.assert_allclose(aff[:3, 3], [-3, 4, 10], atol=1e-6)


def test_qfac_flips_third_axis():
    blob = raw_nifti(np.zeros((2, 2, 2), np.float32), 16, qform_code=1,
                     pixdim=(-1.0, 1.0, 1.0, 2.0))
    aff = niftio.read_nifti(blob).affine
    np.testing.assert_allclose(np.diag(aff), [1, 1, -2, 1])


def test_pixdim_fallback():
    blob = raw_nifti(np.zeros((2, 2, 2), np.float32), 16, pixdim=(1.0, 0.5, 0.7, 3.0))
    np.testing.assert_allclose(np.diag(niftio.read_nifti(blob).affine), [0.5, 0.7, 3.0, 1],
                               rtol=1e-6)


def test_roundtrip_preserves_voxels_and_geometry(tmp_path, rng):
    aff = np.array([[0, -1.2, 0, 30], [0.9, 0, 0, -20], [0, 0, 2.0, 5], [0, 0, 0, 1]])
    vol = Volume(rng.normal(size=(7, 8, 9)).astype(np.float32), aff)
    path = tmp_path / "v.nii"
    niftio.write_nifti(vol, path)
    back = niftio.read_nifti(path)
    np.testing.assert_array_equal(back.voxels, vol.data)
    np.testing.assert_allclose(back.affine, aff, atol=1e-5)
    niftio.write_nifti(back.to_volume(), tmp_path / "w.nii.gz")
    again = niftio.read_nifti(tmp_path / "w.nii.gz")
    np.testing.assert_array_equal(again.voxels, back.voxels)
    np.testing.assert_array_equal(again.affine, back.affine)
    assert again.header.shape == back.header.shape


def test_mask_roundtrip_u8(tmp_path, rng):
    m = Mask(rng.integers(0, 2, (6, 5, 4)).astype(np.uint8))
    niftio.write_nifti(m, tmp_path / "m.nii.gz")
    back = niftio.read_nifti(tmp_path / "m.nii.gz")
    assert back.header.datatype_code == 2
    np.testing.assert_array_equal(back.voxels, m.data)


def test_non_binary_u8_mask_rejected(tmp_path):
    vol = Volume(np.array([0, 1, 2, 1], np.float32).reshape(2, 2, 1))
    with pytest.raises(UnrepresentableValue):
        niftio.write_nifti(vol, tmp_path / "bad.nii", "uint8")


def test_full_grid_file_size(tmp_path):
    vol = Volume(np.zeros((256, 256, 256), np.float32))
    path = tmp_path / "big.nii"
    niftio.write_nifti(vol, path)
    assert os.path.getsize(path) == 352 + 4 * 256 ** 3


def test_template_copies_geometry_bit_exactly(tmp_path):
    rot = Rotation.from_euler("z", 33, degrees=True)
    x, y, z, w = rot.as_quat()
    blob = raw_nifti(np.ones((3, 3, 3), np.float32), 16, qform_code=1, quatern=(x, y, z),
                     qoffset=(1.0, 2.0, 3.0), pixdim=(1.0, 1.1, 1.2, 1.3))
    src = niftio.read_nifti(blob)
    niftio.write_nifti(Mask(np.ones((3, 3, 3), np.uint8), src.affine), tmp_path / "m.nii",
                       template=src.header)
    out = niftio.read_nifti(tmp_path / "m.nii")
    assert np.array_equal(out.affine, src.affine)
