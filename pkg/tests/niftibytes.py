import struct

import numpy as np


def raw_nifti(data, datatype, *, slope=0.0, inter=0.0, magic=b"n+1\x00", vox_offset=352.0,
              sform=None, sform_code=0, qform_code=0, quatern=(0.0, 0.0, 0.0),
              qoffset=(0.0, 0.0, 0.0), pixdim=(1.0, 1.0, 1.0, 1.0), endian="<",
              sizeof_hdr=348):
    """Byte-level NIfTI-1 writer used as a fixture; independent of the package code."""
    data = np.asarray(data)
    hdr = bytearray(int(vox_offset))
    e = endian
    struct.pack_into(e + "i", hdr, 0, sizeof_hdr)
    dims = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into(e + "8h", hdr, 40, *dims)
    struct.pack_into(e + "h", hdr, 70, datatype)
    struct.pack_into(e + "h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into(e + "8f", hdr, 76, *(list(pixdim) + [1.0] * (8 - len(pixdim))))
    struct.pack_into(e + "f", hdr, 108, vox_offset)
    struct.pack_into(e + "f", hdr, 112, slope)
    struct.pack_into(e + "f", hdr, 116, inter)
    struct.pack_into(e + "h", hdr, 252, qform_code)
    struct.pack_into(e + "h", hdr, 254, sform_code)
    struct.pack_into(e + "3f", hdr, 256, *quatern)
    struct.pack_into(e + "3f", hdr, 268, *qoffset)
    if sform is not None:
        for row in range(3):
            struct.pack_into(e + "4f", hdr, 280 + 16 * row, *sform[row])
    hdr[344:348] = magic
    payload = data.astype(data.dtype.newbyteorder(e)).tobytes(order="F")
    return bytes(hdr) + payload
