import json
import struct

import numpy as np
import pytest

from lora_forensics.container import TensorRecord, decode, encode, read_container, write_container
from lora_forensics.errors import IoFailure, MalformedHeader, OverlappingOffsets


def raw_container(header: dict, buffer: bytes) -> bytes:
    text = json.dumps(header).encode()
    return struct.pack("<Q", len(text)) + text + buffer


def test_layout_is_length_prefix_json_then_buffer():
    rec = TensorRecord.from_array("w", np.array([[1.0, 2.0]]), "F32")
    blob = encode([rec], {"k": "v"})
    (n,) = struct.unpack("<Q", blob[:8])
    assert n % 8 == 0
    header = json.loads(blob[8 : 8 + n])
    assert header == {"__metadata__": {"k": "v"}, "w": {"dtype": "F32", "shape": [1, 2], "data_offsets": [0, 8]}}
    assert blob[8 + n :] == struct.pack("<2f", 1.0, 2.0)


def test_names_sorted_and_offsets_contiguous():
    recs = [TensorRecord.from_array(name, np.ones((2, 3)), "F32") for name in ("zeta", "alpha", "mid")]
    blob = encode(recs)
    (n,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8 : 8 + n])
    assert list(header) == ["alpha", "mid", "zeta"]
    assert [header[k]["data_offsets"] for k in header] == [[0, 24], [24, 48], [48, 72]]


def test_decode_accepts_foreign_byte_order():
    buf = struct.pack("<4f", 1, 2, 3, 4) + struct.pack("<2e", 0.5, -2.0)
    header = {
        "b": {"dtype": "F16", "shape": [1, 2], "data_offsets": [16, 20]},
        "a": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]},
    }
    records, meta = decode(raw_container(header, buf))
    assert meta == {}
    np.testing.assert_array_equal(records["a"].to_float64(), [[1, 2], [3, 4]])
    np.testing.assert_array_equal(records["b"].to_float64(), [[0.5, -2.0]])


@pytest.mark.parametrize("dtype", ["F16", "BF16", "F32", "F64"])
def test_dtype_round_trip(dtype):
    values = np.array([[0.0, 1.0, -2.5], [0.125, 3.0, -0.75]])
    rec = TensorRecord.from_array("t", values, dtype)
    back = decode(encode([rec]))[0]["t"]
    assert back.dtype == dtype
    np.testing.assert_array_equal(back.to_float64(), values)


def test_bf16_rounds_to_nearest_even():
    # 1 + 2^-8 sits halfway between bf16 neighbours 1 and 1 + 2^-7; ties go to the even mantissa
    values = np.array([1.0 + 2.0**-8, 1.0 + 3 * 2.0**-8, 1.0 + 2.0**-9])
    rec = TensorRecord.from_array("t", values, "BF16")
    np.testing.assert_array_equal(rec.to_float64(), [1.0, 1.0 + 2.0**-6, 1.0])


def test_overlapping_offsets():
    header = {
        "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
        "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
    }
    with pytest.raises(OverlappingOffsets):
        decode(raw_container(header, bytes(12)))


@pytest.mark.parametrize(
    "blob",
    [
        b"\x01\x02",
        struct.pack("<Q", 1000) + b"{}",
        struct.pack("<Q", 3) + b"{x}",
        struct.pack("<Q", 2) + b"[]",
        raw_container({"a": {"dtype": "Q8", "shape": [1], "data_offsets": [0, 1]}}, b"\0"),
        raw_container({"a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 4]}}, bytes(4)),
        raw_container({"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 8]}}, bytes(4)),
        raw_container({"a": {"dtype": "F32", "shape": [-1], "data_offsets": [0, 0]}}, b""),
        raw_container({"__metadata__": {"k": 1}}, b""),
    ],
    ids=["short", "length-overrun", "bad-json", "not-object", "dtype", "size", "offsets-past-end", "neg-shape", "meta"],
)
def test_malformed_header(blob):
    with pytest.raises(MalformedHeader):
        decode(blob)


def test_write_is_atomic_and_deterministic(tmp_path):
    rec = TensorRecord.from_array("w", np.arange(6.0).reshape(2, 3), "F64")
    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    write_container(a, [rec], {"x": "1"})
    write_container(b, [rec], {"x": "1"})
    assert a.read_bytes() == b.read_bytes()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.safetensors", "b.safetensors"]
    records, meta = read_container(a)
    assert meta == {"x": "1"}


def test_missing_file_is_io_failure(tmp_path):
    with pytest.raises(IoFailure):
        read_container(tmp_path / "absent.safetensors")


def test_reference_reader_agrees(tmp_path):
    st = pytest.importorskip("safetensors.numpy")
    rng = np.random.default_rng(5)
    tensors = {"x.lora_A.weight": rng.standard_normal((3, 7)).astype(np.float32), "x.lora_B.weight": rng.standard_normal((5, 3)).astype(np.float16)}
    ours = tmp_path / "ours.safetensors"
    write_container(ours, [TensorRecord.from_array(k, v, "F32" if v.dtype == np.float32 else "F16") for k, v in tensors.items()], {"m": "1"})
    loaded = st.load_file(str(ours))
    for k, v in tensors.items():
        np.testing.assert_array_equal(loaded[k], v)

    theirs = tmp_path / "theirs.safetensors"
    st.save_file(tensors, str(theirs), metadata={"m": "1"})
    records, meta = read_container(theirs)
    assert meta == {"m": "1"}
    for k, v in tensors.items():
        np.testing.assert_array_equal(records[k].to_float64(), v.astype(np.float64))
