"""Minimal NIfTI-1 single-file codec (.nii and .nii.gz).

Supports uint8, int16, float32 and float64 payloads, 3-D volumes and 4-D
volumes whose fourth axis holds channels. Files are written little-endian
with the s-form set from the grid affine and no intensity scaling; both byte
orders are read.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatError
from .volume import GridSpec, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag
_FMT = "i10s18sihcB8h3fhhhh8f3fhBB4f2i80s24s2h3f3f4f4f4f16s4s"
_FIELDS = [
    "sizeof_hdr", "data_type", "db_name", "extents", "session_error", "regular", "dim_info",
    "dim", "intent_p", "intent_code", "datatype", "bitpix", "slice_start", "pixdim",
    "vox_offset", "scl_slope", "scl_inter", "slice_end", "slice_code", "xyzt_units",
    "cal_max", "cal_min", "slice_duration", "toffset", "glmax", "glmin", "descrip",
    "aux_file", "qform_code", "sform_code", "quatern", "qoffset", "srow_x", "srow_y",
    "srow_z", "intent_name", "magic",
]
_WIDTH = {"dim": 8, "intent_p": 3, "pixdim": 8, "quatern": 3, "qoffset": 3,
          "srow_x": 4, "srow_y": 4, "srow_z": 4}

DTYPES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32), 64: np.dtype(np.float64)}
CODES = {v: k for k, v in DTYPES.items()}

assert struct.calcsize("<" + _FMT) == HEADER_SIZE


@dataclass
class NiftiHeader:
    dims: tuple
    datatype: int
    pixdim: tuple
    affine: np.ndarray
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    vox_offset: int = VOX_OFFSET
    byteorder: str = "<"

    @property
    def dtype(self):
        return DTYPES[self.datatype].newbyteorder(self.byteorder)


def _unpack(raw, order):
    vals = struct.unpack(order + _FMT, raw[:HEADER_SIZE])
    out, i = {}, 0
    for name in _FIELDS:
        n = _WIDTH.get(name, 1)
        out[name] = vals[i] if n == 1 else vals[i:i + n]
        i += n
    return out


def quaternion_affine(h):
    """q-form affine from the quaternion fields (NIfTI-1 convention)."""
    b, c, d = h["quatern"]
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if h["pixdim"][0] < 0 else 1.0
    zooms = np.array([h["pixdim"][1], h["pixdim"][2], qfac * h["pixdim"][3]])
    out = np.eye(4)
    out[:3, :3] = R * zooms
    out[:3, 3] = h["qoffset"]
    return out


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise CorruptFileError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for order in "<>":
        if struct.unpack(order + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise FormatError("not a NIfTI-1 file (bad header size)")
    h = _unpack(raw, order)
    if h["magic"] != b"n+1\x00":
        raise FormatError(f"unsupported NIfTI magic {h['magic']!r}; only single-file n+1 is read")
    if h["datatype"] not in DTYPES:
        raise FormatError(f"unsupported NIfTI datatype code {h['datatype']}")
    ndim = h["dim"][0]
    if not 1 <= ndim <= 7:
        raise CorruptFileError(f"invalid dim[0] = {ndim}")
    dims = tuple(int(n) for n in h["dim"][1:ndim + 1])
    if any(n < 1 for n in dims):
        raise CorruptFileError(f"invalid dimensions {dims}")
    pix = tuple(float(p) for p in h["pixdim"])
    if h["sform_code"] > 0:
        affine = np.vstack([h["srow_x"], h["srow_y"], h["srow_z"], [0.0, 0.0, 0.0, 1.0]]).astype(float)
    elif h["qform_code"] > 0:
        affine = quaternion_affine(h)
    else:
        affine = np.diag([abs(p) if p else 1.0 for p in pix[1:4]] + [1.0])
    return NiftiHeader(dims, int(h["datatype"]), pix, affine, float(h["scl_slope"]),
                       float(h["scl_inter"]), int(h["vox_offset"]), order)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise CorruptFileError(f"{path}: damaged gzip stream") from exc
    return raw


def read_nifti(path) -> Volume:
    """Read a volume; 4-D (and higher) axes are flattened into channels."""
    raw = _read_bytes(path)
    hdr = parse_header(raw)
    spatial = (hdr.dims + (1, 1, 1))[:3]
    channels = int(np.prod(hdr.dims[3:])) if len(hdr.dims) > 3 else 1
    count = int(np.prod(spatial)) * channels
    start = max(hdr.vox_offset, HEADER_SIZE)
    nbytes = count * hdr.dtype.itemsize
    if len(raw) < start + nbytes:
        raise CorruptFileError(f"{path}: truncated payload ({len(raw) - start} of {nbytes} bytes)")
    data = np.frombuffer(raw, dtype=hdr.dtype, count=count, offset=start)
    data = data.reshape(spatial + (channels,), order="F").astype(hdr.dtype.newbyteorder("="))
    if hdr.scl_slope != 0.0 and (hdr.scl_slope != 1.0 or hdr.scl_inter != 0.0):
        data = data * hdr.scl_slope + hdr.scl_inter
    return Volume(GridSpec(spatial, hdr.affine), data)


def _pack_header(vol: Volume, datatype: int) -> bytes:
    nx, ny, nz = vol.grid.dims
    C = vol.channels
    dim = (4, nx, ny, nz, C, 1, 1, 1) if C > 1 else (3, nx, ny, nz, 1, 1, 1, 1)
    aff = vol.grid.affine
    zooms = vol.grid.spacing
    h = dict(
        sizeof_hdr=HEADER_SIZE, data_type=b"", db_name=b"", extents=0, session_error=0,
        regular=b"r", dim_info=0, dim=dim, intent_p=(0.0, 0.0, 0.0), intent_code=0,
        datatype=datatype, bitpix=DTYPES[datatype].itemsize * 8, slice_start=0,
        pixdim=(1.0, *zooms, 1.0, 1.0, 1.0, 1.0), vox_offset=float(VOX_OFFSET),
        scl_slope=1.0, scl_inter=0.0, slice_end=0, slice_code=0, xyzt_units=2,
        cal_max=0.0, cal_min=0.0, slice_duration=0.0, toffset=0.0, glmax=0, glmin=0,
        descrip=b"jointseg", aux_file=b"", qform_code=0, sform_code=2,
        quatern=(0.0, 0.0, 0.0), qoffset=tuple(aff[:3, 3]),
        srow_x=tuple(aff[0]), srow_y=tuple(aff[1]), srow_z=tuple(aff[2]),
        intent_name=b"", magic=b"n+1\x00",
    )
    flat = []
    for name in _FIELDS:
        v = h[name]
        flat.extend(v if name in _WIDTH else [v])
    return struct.pack("<" + _FMT, *flat)


def write_nifti(vol: Volume, path, datatype=None):
    """Write ``vol`` as little-endian NIfTI-1; gzip when the name ends in .gz.

    ``datatype`` is a numpy dtype or NIfTI code; defaults to the data's own
    type when supported, else float32. Values are cast without scaling.
    """
    if datatype is None:
        datatype = CODES.get(vol.data.dtype, 16)
    elif not isinstance(datatype, int):
        datatype = CODES.get(np.dtype(datatype))
    if datatype not in DTYPES:
        raise FormatError(f"unsupported NIfTI datatype {datatype}")
    dtype = DTYPES[datatype]
    data = vol.data
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        if np.any(data < info.min) or np.any(data > info.max) or np.any(data != np.round(data)):
            raise FormatError(f"values do not fit {dtype.name} exactly")
    body = np.asarray(data, dtype=dtype.newbyteorder("<")).reshape(-1, order="F").tobytes()
    blob = _pack_header(vol, datatype) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + body
    path = Path(path)
    if path.name.endswith(".gz"):
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)
