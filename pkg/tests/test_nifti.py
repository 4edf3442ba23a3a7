import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from jointseg.errors import CorruptFileError, FormatError
from jointseg.nifti import read_nifti, write_nifti
from jointseg.volume import GridSpec, Volume

# byte offsets of the NIfTI-1 header fields, written out independently of the reader
OFF = dict(sizeof_hdr=0, dim=40, datatype=70, bitpix=72, pixdim=76, vox_offset=108, scl_slope=112,
           scl_inter=116, qform_code=252, sform_code=254, quatern=256, qoffset=268, srow_x=280,
           srow_y=296, srow_z=312, magic=344)


def handmade(order, dims, datatype, payload, pixdim=(1.0, 1.0, 1.0), slope=0.0, inter=0.0,
             sform=None, qform=None, magic=b"n+1\x00"):
    """A single-file NIfTI-1 image assembled byte by byte."""
    hdr = bytearray(348)
    struct.pack_into(order + "i", hdr, OFF["sizeof_hdr"], 348)
    dim = [len(dims)] + list(dims) + [1] * (7 - len(dims))
    struct.pack_into(order + "8h", hdr, OFF["dim"], *dim)
    bits = {2: 8, 4: 16, 16: 32, 64: 64, 512: 16}[datatype]
    struct.pack_into(order + "hh", hdr, OFF["datatype"], datatype, bits)
    struct.pack_into(order + "8f", hdr, OFF["pixdim"], 1.0, *pixdim, 1, 1, 1, 1)
    struct.pack_into(order + "fff", hdr, OFF["vox_offset"], 352.0, slope, inter)
    if qform is not None:
        struct.pack_into(order + "h", hdr, OFF["qform_code"], 1)
        struct.pack_into(order + "3f", hdr, OFF["quatern"], *qform[0])
        struct.pack_into(order + "3f", hdr, OFF["qoffset"], *qform[1])
    if sform is not None:
        struct.pack_into(order + "h", hdr, OFF["sform_code"], 2)
        for k, row in enumerate(("srow_x", "srow_y", "srow_z")):
            struct.pack_into(order + "4f", hdr, OFF[row], *sform[k])
    hdr[OFF["magic"]:OFF["magic"] + 4] = magic
    return bytes(hdr) + b"\x00" * 4 + payload


DTYPE_CASES = [(np.uint8, 2), (np.int16, 4), (np.float32, 16), (np.float64, 64)]


@pytest.mark.parametrize("dtype,code", DTYPE_CASES)
@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_roundtrip_bitwise(tmp_path, rng, dtype, code, suffix):
    aff = np.array([[0.0, -1.5, 0.1, 10.0], [2.0, 0.0, 0.0, -4.25], [0.0, 0.0, 0.75, 3.5], [0, 0, 0, 1]])
    g = GridSpec((5, 6, 7), aff.astype(np.float32).astype(float))
    if np.dtype(dtype).kind == "f":
        data = rng.standard_normal((5, 6, 7, 3)).astype(dtype)
    else:
        info = np.iinfo(dtype)
        data = rng.integers(info.min, info.max, (5, 6, 7, 3), endpoint=True).astype(dtype)
    path = tmp_path / f"v{suffix}"
    write_nifti(Volume(g, data), path, dtype)
    back = read_nifti(path)
    assert back.data.dtype == np.dtype(dtype)
    assert back.data.tobytes() == data.tobytes()
    assert back.grid.affine.tobytes() == g.affine.tobytes()


@settings(max_examples=20)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("p") / "x.nii"
    write_nifti(Volume(GridSpec.from_spacing(data.shape), data), path)
    assert read_nifti(path).data[..., 0].tobytes() == data.tobytes()


def test_single_voxel_layout(tmp_path):
    path = tmp_path / "one.nii"
    write_nifti(Volume(GridSpec.from_spacing((1, 1, 1)), np.array([[[5.0]]], np.float32)), path)
    raw = path.read_bytes()
    assert len(raw) == 348 + 4 + 4
    assert struct.unpack("<i", raw[:4])[0] == 348
    assert raw[344:348] == b"n+1\x00"
    assert raw[352:] == struct.pack("<f", 5.0)
    assert struct.unpack("<f", raw[108:112])[0] == 352.0


def test_dim_field_for_multichannel(tmp_path):
    path = tmp_path / "m.nii"
    write_nifti(Volume(GridSpec.from_spacing((10, 11, 12)), np.zeros((10, 11, 12, 3), np.float32)), path)
    assert struct.unpack("<8h", path.read_bytes()[40:56]) == (4, 10, 11, 12, 3, 1, 1, 1)


def test_slope_and_intercept(tmp_path):
    path = tmp_path / "s.nii"
    path.write_bytes(handmade("<", (1, 1, 1), 4, struct.pack("<h", 3), slope=2.0, inter=1.0))
    assert read_nifti(path).data[0, 0, 0, 0] == 7.0


def test_big_endian_and_qform_fallback(tmp_path):
    data = np.arange(24, dtype=">f4").reshape((2, 3, 4), order="F")
    # quaternion (0, 0, sin 45deg): 90 degree rotation about z
    q = ((0.0, 0.0, np.sqrt(0.5)), (1.0, 2.0, 3.0))
    path = tmp_path / "be.nii"
    path.write_bytes(handmade(">", (2, 3, 4), 16, data.tobytes(order="F"), (2.0, 2.0, 2.0), qform=q))
    vol = read_nifti(path)
    np.testing.assert_array_equal(vol.data[..., 0], data.astype(np.float32))
    expected = np.array([[0, -2.0, 0, 1], [2.0, 0, 0, 2], [0, 0, 2.0, 3], [0, 0, 0, 1]])
    np.testing.assert_allclose(vol.grid.affine, expected, atol=1e-6)


def test_pixdim_fallback_and_sform_priority(tmp_path):
    path = tmp_path / "p.nii"
    path.write_bytes(handmade("<", (2, 2, 2), 2, bytes(8), (1.5, 2.5, 3.5)))
    np.testing.assert_allclose(read_nifti(path).grid.affine, np.diag([1.5, 2.5, 3.5, 1.0]))
    sform = ((1, 0, 0, 5), (0, 1, 0, 6), (0, 0, 1, 7))
    path.write_bytes(handmade("<", (2, 2, 2), 2, bytes(8), sform=sform,
                              qform=((0, 0, 1.0), (0, 0, 0))))
    np.testing.assert_allclose(read_nifti(path).grid.affine[:3], sform)


def test_gzip_matches_plain(tmp_path, rng):
    blob = handmade("<", (3, 3, 3), 16, rng.random(27).astype("<f4").tobytes())
    (tmp_path / "a.nii").write_bytes(blob)
    (tmp_path / "a.nii.gz").write_bytes(gzip.compress(blob))
    a, b = read_nifti(tmp_path / "a.nii"), read_nifti(tmp_path / "a.nii.gz")
    assert a.data.tobytes() == b.data.tobytes()
    np.testing.assert_array_equal(a.grid.affine, b.grid.affine)


def test_errors(tmp_path):
    bad = tmp_path / "bad.nii"
    bad.write_bytes(handmade("<", (2, 2, 2), 512, bytes(16)))
    with pytest.raises(FormatError, match="512"):
        read_nifti(bad)
    bad.write_bytes(handmade("<", (4, 4, 4), 16, bytes(100)))
    with pytest.raises(CorruptFileError):
        read_nifti(bad)
    bad.write_bytes(handmade("<", (1, 1, 1), 16, bytes(4), magic=b"ni1\x00"))
    with pytest.raises(FormatError):
        read_nifti(bad)
    bad.write_bytes(b"\x00" * 100)
    with pytest.raises(CorruptFileError):
        read_nifti(bad)
    with pytest.raises(FormatError):
        write_nifti(Volume(GridSpec.from_spacing((1, 1, 1)), np.array([[[40000.0]]])), bad, np.int16)
    with pytest.raises(OSError):
        write_nifti(Volume(GridSpec.from_spacing((1, 1, 1)), np.zeros((1, 1, 1))),
                    tmp_path / "missing" / "x.nii")
