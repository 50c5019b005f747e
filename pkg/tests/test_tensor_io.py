import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from imtda.tensor_io import (TensorFormatError, decode_archive, decode_tensor, encode_archive,
                             encode_tensor, read_archive, write_archive)


class TestTensorEncoding:
    def test_header_layout(self):
        blob = encode_tensor(np.zeros((3, 2), dtype=np.float32))
        assert blob[:4] == b"IDK1"
        tag, ndim = struct.unpack_from("<BB", blob, 4)
        assert (tag, ndim) == (1, 2)
        assert struct.unpack_from("<2I", blob, 6) == (3, 2)
        assert len(blob) == 6 + 8 + 6 * 4

    def test_payload_is_little_endian(self):
        blob = encode_tensor(np.array([1.0], dtype=">f4"))
        assert blob[-4:] == struct.pack("<f", 1.0)

    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64]),
                      hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)))
    def test_round_trip(self, arr):
        out = decode_tensor(encode_tensor(arr))
        assert out.dtype == arr.dtype and out.shape == arr.shape
        np.testing.assert_array_equal(out, arr)

    @pytest.mark.parametrize("blob", [b"XXXX\x01\x00", b"IDK1\x09\x00", b"IDK1\x01\x01\x02\x00\x00\x00"])
    def test_rejects_malformed(self, blob):
        with pytest.raises(TensorFormatError):
            decode_tensor(blob)

    def test_rejects_unsupported_dtype(self):
        with pytest.raises(TensorFormatError):
            encode_tensor(np.array(["a"]))


class TestArchive:
    def test_round_trip_preserves_names_and_order(self, tmp_path):
        tensors = {"a": np.arange(3.0), "disc/w": np.ones((2, 2), np.float32), "dtm/layers.0": np.zeros(1)}
        write_archive(tmp_path / "x.idka", tensors)
        back = read_archive(tmp_path / "x.idka")
        assert list(back) == list(tensors)
        for k in tensors:
            np.testing.assert_array_equal(back[k], tensors[k])
        assert not (tmp_path / "x.idka.tmp").exists()

    def test_trailing_bytes_rejected(self):
        with pytest.raises(TensorFormatError):
            decode_archive(encode_archive({"a": np.zeros(1)}) + b"\x00")
