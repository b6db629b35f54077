import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dpseg.container import MAGIC, load_container, read_manifest, save_container
from dpseg.errors import ContainerCorruptionError, ContainerFormatError


def test_zero_tensor_roundtrip(tmp_path):
    save_container({"x": np.zeros((2, 3))}, tmp_path / "a.dpec")
    out = load_container(tmp_path / "a.dpec")
    assert out["x"].shape == (2, 3)
    assert out["x"].dtype == np.float32
    assert np.array_equal(out["x"], np.zeros((2, 3)))


def test_layout(tmp_path):
    path = tmp_path / "a.dpec"
    save_container({"x": np.arange(4, dtype=np.float32)}, path, provenance="unit test")
    raw = path.read_bytes()
    assert raw[:5] == b"DPEC1"
    (hlen,) = struct.unpack("<Q", raw[5:13])
    payload = raw[13 + hlen:]
    assert payload == np.arange(4, dtype="<f4").tobytes()
    assert read_manifest(path)["provenance"] == "unit test"


def test_bad_magic(tmp_path):
    path = tmp_path / "a.dpec"
    save_container({"x": np.zeros(3)}, path)
    raw = bytearray(path.read_bytes())
    raw[:5] = b"NOPE!"
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerFormatError):
        load_container(path)


def _forge(path, shape, n_floats):
    import json
    manifest = {"format": "DPEC1", "provenance": "", "meta": {},
                "arrays": [{"name": "x", "shape": list(shape), "dtype": "float32-le",
                            "offset": 0, "nbytes": int(np.prod(shape)) * 4}]}
    header = json.dumps(manifest).encode()
    path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header
                     + np.zeros(n_floats, "<f4").tobytes())


def test_manifest_overruns_payload(tmp_path):
    path = tmp_path / "a.dpec"
    _forge(path, (4, 6), 20)
    with pytest.raises(ContainerCorruptionError):
        load_container(path)


def test_trailing_bytes_are_corruption(tmp_path):
    path = tmp_path / "a.dpec"
    _forge(path, (2, 2), 5)
    with pytest.raises(ContainerCorruptionError):
        load_container(path)


def test_rejects_non_finite(tmp_path):
    with pytest.raises(ValueError):
        save_container({"x": np.array([1.0, np.nan])}, tmp_path / "a.dpec")


def test_meta_roundtrip(tmp_path):
    save_container({"a": np.ones(2), "b": np.ones((1, 1, 2))}, tmp_path / "a.dpec", meta={"k": [1, 2]})
    arrays, manifest = load_container(tmp_path / "a.dpec", with_meta=True)
    assert list(arrays) == ["a", "b"]
    assert manifest["meta"] == {"k": [1, 2]}


_arrays = st.dictionaries(
    st.text(alphabet="abcxyz_.0123", min_size=1, max_size=8),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
               elements=st.floats(-1e6, 1e6, width=32)),
    max_size=4)


@settings(max_examples=50, deadline=None)
@given(_arrays)
def test_roundtrip_property(tmp_path_factory, arrays):
    path = tmp_path_factory.mktemp("c") / "a.dpec"
    save_container(arrays, path)
    out = load_container(path)
    assert list(out) == list(arrays)
    for name, arr in arrays.items():
        assert out[name].shape == arr.shape
        assert out[name].tobytes() == arr.tobytes()
