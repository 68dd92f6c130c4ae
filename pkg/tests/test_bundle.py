import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from macx.bundle import BundleError, decode_bundle, encode_bundle, read_bundle, write_bundle
from macx.data import QADataset

from conftest import small_spec
from macx.synthdata import generate_dataset


def test_empty_bundle_is_twelve_exact_bytes():
    assert encode_bundle({}) == b"MACX\x01\x00\x00\x00\x00\x00\x00\x00"
    assert decode_bundle(b"MACX\x01\x00\x00\x00\x00\x00\x00\x00") == {}


def test_single_array_layout():
    raw = encode_bundle({"a": np.array([1.5], np.float32)})
    expected = (b"MACX" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"a"
                + struct.pack("<BI", 0, 1) + struct.pack("<Q", 1) + np.float32(1.5).tobytes())
    assert raw == expected


arrays_strategy = st.dictionaries(
    st.text(min_size=0, max_size=8),
    st.one_of(
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)),
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, min_side=0, max_side=4)),
    ),
    max_size=5,
)


@given(arrays_strategy)
def test_round_trip_is_identity(arrays):
    raw = encode_bundle(arrays)
    back = decode_bundle(raw)
    assert list(back) == list(arrays)
    for name, arr in arrays.items():
        assert back[name].dtype == arr.dtype and back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()  # bitwise, NaN payloads included
    assert encode_bundle(back) == raw


def test_dataset_round_trip_through_file(tmp_path):
    data = generate_dataset(small_spec())
    path = tmp_path / "d.macx"
    write_bundle(data.to_arrays(), path)
    raw = path.read_bytes()
    back = QADataset.from_arrays(read_bundle(path))
    write_bundle(back.to_arrays(), tmp_path / "again.macx")
    assert (tmp_path / "again.macx").read_bytes() == raw


@pytest.mark.parametrize("raw,match", [
    (b"XCAM\x01\x00\x00\x00\x00\x00\x00\x00", "not a MACX"),
    (b"MAC", "not a MACX"),
    (b"MACX\x02\x00\x00\x00\x00\x00\x00\x00", "version 2"),
    (b"MACX\x01\x00\x00\x00\x01\x00\x00\x00", "truncated"),
    (b"MACX\x01\x00\x00\x00\x00\x00\x00\x00\x00", "trailing"),
])
def test_malformed_headers(raw, match):
    with pytest.raises(BundleError, match=match):
        decode_bundle(raw)


def test_truncated_payload_and_bad_dtype():
    raw = encode_bundle({"x": np.arange(4.0)})
    for cut in range(12, len(raw)):
        with pytest.raises(BundleError, match="truncated"):
            decode_bundle(raw[:cut])
    bad = bytearray(raw)
    bad[12 + 4 + 1] = 7
    with pytest.raises(BundleError, match="dtype code 7"):
        decode_bundle(bytes(bad))


def test_duplicate_names_rejected_on_read():
    one = encode_bundle({"x": np.zeros(1)})
    body = one[12:]
    raw = b"MACX" + struct.pack("<II", 1, 2) + body + body
    with pytest.raises(BundleError, match="duplicate"):
        decode_bundle(raw)


def test_unsupported_dtype_rejected_on_write():
    with pytest.raises(BundleError, match="unsupported dtype"):
        encode_bundle({"i": np.arange(3)})


def test_failed_write_leaves_target_untouched(tmp_path):
    path = tmp_path / "keep.macx"
    write_bundle({"a": np.ones(2)}, path)
    before = path.read_bytes()
    with pytest.raises(BundleError):
        write_bundle({"a": np.ones(2), "b": np.arange(2)}, path)
    assert path.read_bytes() == before
    assert os.listdir(tmp_path) == ["keep.macx"]


def test_rejects_bad_file(tmp_path):
    path = tmp_path / "junk.macx"
    path.write_bytes(b"hello world!")
    with pytest.raises(BundleError):
        read_bundle(path)


def test_interrupted_rename_cleans_up(tmp_path, monkeypatch):
    path = tmp_path / "keep.macx"
    write_bundle({"a": np.ones(2)}, path)

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError, match="disk full"):
        write_bundle({"a": np.zeros(3)}, path)
    assert os.listdir(tmp_path) == ["keep.macx"]
    assert read_bundle(path)["a"].tolist() == [1.0, 1.0]
