"""NIfTI-1 reader/writer (single-file ``.nii`` and gzipped ``.nii.gz``).

Layout handled here: a 348-byte header, a 4-byte extension flag, then voxel
data at ``vox_offset`` stored x-fastest.  All voxel data is decoded to
float32 with ``scl_slope``/``scl_inter`` applied.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import (
    BadMagic,
    NiftiError,
    NonFiniteVoxel,
    Truncated,
    UnrepresentableValue,
    UnsupportedDatatype,
    UnsupportedFormat,
)
from .volume import Mask, Volume

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
}
OUTPUT_CODES = {"uint8": 2, "float32": 16}

# (name, struct code, byte offset) for the fields we interpret
_FIELDS = [
    ("sizeof_hdr", "i", 0),
    ("dim_info", "B", 39),
    ("dim", "8h", 40),
    ("intent_p", "3f", 56),
    ("intent_code", "h", 68),
    ("datatype", "h", 70),
    ("bitpix", "h", 72),
    ("slice_start", "h", 74),
    ("pixdim", "8f", 76),
    ("vox_offset", "f", 108),
    ("scl_slope", "f", 112),
    ("scl_inter", "f", 116),
    ("slice_end", "h", 120),
    ("slice_code", "B", 122),
    ("xyzt_units", "B", 123),
    ("cal_max", "f", 124),
    ("cal_min", "f", 128),
    ("descrip", "80s", 148),
    ("qform_code", "h", 252),
    ("sform_code", "h", 254),
    ("quatern", "3f", 256),
    ("qoffset", "3f", 268),
    ("srow_x", "4f", 280),
    ("srow_y", "4f", 296),
    ("srow_z", "4f", 312),
    ("magic", "4s", 344),
]


@dataclass
class NiftiHeader:
    dims: list
    datatype_code: int
    pixdim: list
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0, 0.0, 0.0)
    qoffset: tuple = (0.0, 0.0, 0.0)
    srow: np.ndarray = field(default_factory=lambda: np.eye(4, dtype=np.float32)[:3])
    vox_offset: float = float(SINGLE_FILE_OFFSET)
    magic: bytes = b"n+1\x00"
    xyzt_units: int = 10  # mm + s
    descrip: bytes = b""
    endian: str = "<"

    @property
    def shape(self):
        return tuple(int(d) for d in self.dims[1:1 + self.dims[0]])

    @property
    def qfac(self):
        return -1.0 if self.pixdim[0] < 0 else 1.0

    def qform_affine(self):
        b, c, d = (float(v) for v in self.quatern)
        a = 1.0 - (b * b + c * c + d * d)
        if a < 1e-7:
            # nearly 180 degree rotation; renormalise (b, c, d)
            norm = np.sqrt(b * b + c * c + d * d)
            b, c, d = b / norm, c / norm, d / norm
            a = 0.0
        else:
            a = np.sqrt(a)
        r = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ])
        zooms = [float(self.pixdim[i]) if self.pixdim[i] > 0 else 1.0 for i in (1, 2, 3)]
        zooms[2] *= self.qfac
        out = np.eye(4)
        out[:3, :3] = r * zooms
        out[:3, 3] = [float(v) for v in self.qoffset]
        return out

    def sform_affine(self):
        out = np.eye(4)
        out[:3] = np.asarray(self.srow, dtype=np.float64)
        return out

    def affine(self):
        """Voxel-to-world affine; sform beats qform beats the pixdim diagonal."""
        if self.sform_code > 0:
            return self.sform_affine()
        if self.qform_code > 0:
            return self.qform_affine()
        zooms = [float(self.pixdim[i]) if self.pixdim[i] > 0 else 1.0 for i in (1, 2, 3)]
        return np.diag(zooms + [1.0])


@dataclass
class RawImage:
    header: NiftiHeader
    voxels: np.ndarray  # float32, indexed [x, y, z, ...]

    @property
    def affine(self):
        return self.header.affine()

    def to_volume(self) -> Volume:
        data = self.voxels
        while data.ndim > 3 and data.shape[-1] == 1:
            data = data[..., 0]
        if data.ndim > 3:
            raise UnsupportedFormat(f"expected a 3D image, got shape {self.voxels.shape}")
        while data.ndim < 3:
            data = data[..., np.newaxis]
        spacing = [float(p) if p > 0 else 1.0 for p in self.header.pixdim[1:4]]
        return Volume(data, self.affine, None if self.header.sform_code or self.header.qform_code
                      else spacing)


def _read_source(source) -> tuple[bytes, Optional[str]]:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source), None
    path = os.fspath(source)
    with open(path, "rb") as fh:
        return fh.read(), path


def _maybe_gunzip(buf: bytes) -> bytes:
    if buf[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(buf)
        except (EOFError, OSError) as exc:
            raise Truncated(f"corrupt gzip stream: {exc}") from exc
    return buf


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise Truncated(f"header needs {HEADER_SIZE} bytes, got {len(buf)}")
    (le_size,) = struct.unpack_from("<i", buf, 0)
    (be_size,) = struct.unpack_from(">i", buf, 0)
    if le_size == HEADER_SIZE:
        endian = "<"
    elif be_size == HEADER_SIZE:
        endian = ">"
    elif le_size == 540 or be_size == 540:
        raise UnsupportedFormat("NIfTI-2 files are not supported")
    else:
        raise BadMagic(f"sizeof_hdr is {le_size}, expected 348")

    raw = {name: struct.unpack_from(endian + code, buf, off) for name, code, off in _FIELDS}
    magic = raw["magic"][0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagic(f"bad magic {magic!r}")
    dims = list(raw["dim"])
    if not 1 <= dims[0] <= 7:
        raise NiftiError(f"dim[0] = {dims[0]} outside 1..7")
    if any(d < 1 for d in dims[1:1 + dims[0]]):
        raise NiftiError(f"non-positive extent in {dims}")
    vox_offset = raw["vox_offset"][0]
    if magic == b"n+1\x00" and vox_offset < SINGLE_FILE_OFFSET:
        raise NiftiError(f"vox_offset {vox_offset} < {SINGLE_FILE_OFFSET}")
    return NiftiHeader(
        dims=dims,
        datatype_code=raw["datatype"][0],
        pixdim=list(raw["pixdim"]),
        scl_slope=raw["scl_slope"][0],
        scl_inter=raw["scl_inter"][0],
        qform_code=raw["qform_code"][0],
        sform_code=raw["sform_code"][0],
        quatern=raw["quatern"],
        qoffset=raw["qoffset"],
        srow=np.array([raw["srow_x"], raw["srow_y"], raw["srow_z"]], dtype=np.float32),
        vox_offset=vox_offset,
        magic=magic,
        xyzt_units=raw["xyzt_units"][0],
        descrip=raw["descrip"][0].rstrip(b"\x00"),
        endian=endian,
    )


def _decode(header: NiftiHeader, buf: bytes, offset: int) -> np.ndarray:
    try:
        dtype = DATATYPES[header.datatype_code].newbyteorder(header.endian)
    except KeyError:
        raise UnsupportedDatatype(f"datatype code {header.datatype_code}") from None
    shape = header.shape
    count = int(np.prod(shape))
    need = offset + count * dtype.itemsize
    if len(buf) < need:
        raise Truncated(f"data needs {need} bytes, buffer has {len(buf)}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")
    slope, inter = float(header.scl_slope), float(header.scl_inter)
    scaled = np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0)
    if scaled:
        out = (arr.astype(np.float64) * slope + inter).astype(np.float32)
    else:
        out = arr.astype(np.float32)
    if not np.isfinite(out).all():
        raise NonFiniteVoxel(f"{int((~np.isfinite(out)).sum())} non-finite voxel(s)")
    return out


def read_nifti(source: Union[str, os.PathLike, bytes]) -> RawImage:
    """Parse a NIfTI-1 image from a path or an in-memory byte string.

    Gzip compression is detected from the stream itself, not the file name.
    """
    buf, path = _read_source(source)
    buf = _maybe_gunzip(buf)
    header = parse_header(buf)
    if header.magic == b"ni1\x00":
        if path is None:
            raise UnsupportedFormat("header/image pair cannot be read from bytes")
        stem = path[:-3] if path.endswith(".gz") else path
        img_path = os.path.splitext(stem)[0] + ".img"
        data_buf, _ = _read_source(img_path)
        return RawImage(header, _decode(header, _maybe_gunzip(data_buf), int(header.vox_offset)))
    return RawImage(header, _decode(header, buf, int(header.vox_offset)))


def load_volume(source) -> Volume:
    return read_nifti(source).to_volume()


def _pack_header(h: NiftiHeader, bitpix: int) -> bytes:
    buf = bytearray(SINGLE_FILE_OFFSET)
    values = {
        "sizeof_hdr": (HEADER_SIZE,),
        "dim_info": (0,),
        "dim": tuple(h.dims),
        "intent_p": (0.0, 0.0, 0.0),
        "intent_code": (0,),
        "datatype": (h.datatype_code,),
        "bitpix": (bitpix,),
        "slice_start": (0,),
        "pixdim": tuple(h.pixdim),
        "vox_offset": (float(SINGLE_FILE_OFFSET),),
        "scl_slope": (h.scl_slope,),
        "scl_inter": (h.scl_inter,),
        "slice_end": (0,),
        "slice_code": (0,),
        "xyzt_units": (h.xyzt_units,),
        "cal_max": (0.0,),
        "cal_min": (0.0,),
        "descrip": (h.descrip[:79],),
        "qform_code": (h.qform_code,),
        "sform_code": (h.sform_code,),
        "quatern": tuple(h.quatern),
        "qoffset": tuple(h.qoffset),
        "srow_x": tuple(h.srow[0]),
        "srow_y": tuple(h.srow[1]),
        "srow_z": tuple(h.srow[2]),
        "magic": (b"n+1\x00",),
    }
    for name, code, off in _FIELDS:
        struct.pack_into("<" + code, buf, off, *values[name])
    # bytes 348..351: extension flag, left zero
    return bytes(buf)


def header_for(volume: Volume, datatype: str = "float32",
               template: Optional[NiftiHeader] = None) -> NiftiHeader:
    """Build an output header for ``volume``.

    With ``template``, geometry fields (qform, sform, pixdim) are copied
    verbatim so the re-read affine matches the template's bit for bit.
    """
    if datatype not in OUTPUT_CODES:
        raise UnsupportedDatatype(f"output datatype must be one of {sorted(OUTPUT_CODES)}")
    x, y, z = volume.shape
    dims = [3, x, y, z, 1, 1, 1, 1]
    if template is not None:
        if template.shape[:3] != tuple(volume.shape) and template.shape != tuple(volume.shape):
            raise UnrepresentableValue("template grid differs from the volume grid")
        if not np.allclose(template.affine(), volume.affine, atol=1e-5):
            raise UnrepresentableValue("template affine differs from the volume affine")
        return NiftiHeader(
            dims=dims, datatype_code=OUTPUT_CODES[datatype],
            pixdim=[template.pixdim[0]] + list(template.pixdim[1:4]) + [1.0] * 4,
            qform_code=template.qform_code, sform_code=template.sform_code,
            quatern=tuple(template.quatern), qoffset=tuple(template.qoffset),
            srow=np.array(template.srow, dtype=np.float32), xyzt_units=template.xyzt_units,
        )
    return NiftiHeader(
        dims=dims, datatype_code=OUTPUT_CODES[datatype],
        pixdim=[1.0] + list(volume.spacing) + [1.0] * 4,
        sform_code=1, srow=np.asarray(volume.affine[:3], dtype=np.float32),
    )


def nifti_bytes(volume: Volume, datatype: str = "float32",
                template: Optional[NiftiHeader] = None) -> bytes:
    header = header_for(volume, datatype, template)
    data = np.asarray(volume.data)
    if datatype == "uint8":
        if not np.isin(data, (0, 1)).all():
            raise UnrepresentableValue("uint8 output is reserved for binary masks")
        payload = data.astype("<u1")
    else:
        if not np.isfinite(data).all():
            raise UnrepresentableValue("non-finite voxel values")
        payload = data.astype("<f4")
    return _pack_header(header, payload.dtype.itemsize * 8) + payload.tobytes(order="F")


def write_nifti(volume: Volume, path, datatype: Optional[str] = None,
                template: Optional[NiftiHeader] = None) -> None:
    """Write ``volume`` to ``path``; a ``.gz`` suffix selects gzip compression.

    ``datatype`` defaults to ``"uint8"`` for :class:`Mask` and ``"float32"``
    otherwise.
    """
    if datatype is None:
        datatype = "uint8" if isinstance(volume, Mask) else "float32"
    blob = nifti_bytes(volume, datatype, template)
    path = os.fspath(path)
    if path.endswith(".gz"):
        blob = gzip.compress(blob, compresslevel=6, mtime=0)
    with open(path, "wb") as fh:
        fh.write(blob)
