"""CMPR container round trips and format details."""

import struct
from collections import OrderedDict

import numpy as np
import pytest

from cmpr import arrayio
from cmpr.errors import ContractError


def test_array_round_trip_f64(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4, 2))
    path = tmp_path / "a.cmpr"
    arrayio.write_array(path, arr, dtype="f64")
    back = arrayio.read_array(path)
    np.testing.assert_array_equal(back, arr)


def test_array_round_trip_f32(tmp_path):
    arr = np.random.default_rng(1).standard_normal((5, 5))
    path = tmp_path / "a.cmpr"
    arrayio.write_array(path, arr, dtype="f32")
    back = arrayio.read_array(path)
    np.testing.assert_array_equal(back, arr.astype(np.float32).astype(np.float64))


def test_envelope_layout(tmp_path):
    path = tmp_path / "a.cmpr"
    arrayio.write_array(path, np.zeros((2, 2)), dtype="f64")
    blob = path.read_bytes()
    assert blob[:4] == b"CMPR"
    version, hlen = struct.unpack("<II", blob[4:12])
    assert version == 1
    header = blob[12 : 12 + hlen].decode("utf-8")
    assert '"shape":[2,2]' in header
    assert '"dtype":"f64"' in header
    assert len(blob) == 12 + hlen + 4 * 8


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.cmpr"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ContractError):
        arrayio.read_array(path)


def test_write_is_deterministic(tmp_path):
    arr = np.random.default_rng(2).standard_normal((4, 4))
    p1, p2 = tmp_path / "x1.cmpr", tmp_path / "x2.cmpr"
    arrayio.write_array(p1, arr)
    arrayio.write_array(p2, arr)
    assert p1.read_bytes() == p2.read_bytes()


def test_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    arrays = OrderedDict(
        [("enc.w", rng.standard_normal((3, 4))), ("enc.b", rng.standard_normal(4))]
    )
    manifest = {"step": 12, "note": {"k": [1, 2]}}
    path = tmp_path / "ckpt.cmpr"
    arrayio.write_bundle(path, manifest, arrays)
    m2, a2 = arrayio.read_bundle(path)
    assert m2 == manifest
    assert list(a2) == ["enc.w", "enc.b"]
    for k in arrays:
        np.testing.assert_array_equal(a2[k], arrays[k])


def test_bundle_vs_array_headers_are_distinguished(tmp_path):
    path = tmp_path / "a.cmpr"
    arrayio.write_array(path, np.zeros(3))
    with pytest.raises(ContractError):
        arrayio.read_bundle(path)
    path2 = tmp_path / "b.cmpr"
    arrayio.write_bundle(path2, {}, OrderedDict([("x", np.zeros(3))]))
    with pytest.raises(ContractError):
        arrayio.read_array(path2)
