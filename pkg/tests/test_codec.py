import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from world_kit.depth import DepthMap
from world_kit.errors import FormatError, InvalidArgument
from world_kit.fixtures import sphere_fixture
from world_kit.mesh.codec import (decode_compact, decode_world, encode_compact, encode_world,
                                  quantization_bound, unzigzag, varint_decode, varint_encode,
                                  zigzag)
from world_kit.mesh.export import export_ply
from world_kit.mesh.primitives import icosphere
from world_kit.sheet_warp import GridMesh, LayeredWorldMesh, warp_layer

# relative slack for floating-point rounding in dequantization (about 1e-13 observed)
FP_SLACK = 1e-9


def _cube():
    P = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    F = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    rng = np.random.default_rng(0)
    return GridMesh(P + rng.uniform(-1e-3, 0, P.shape) * (P == 1), rng.random((8, 2)), rng.random(8), F)


def _sphere_mesh(stride=2):
    pano, depth, mask = sphere_fixture(512, 256, 3.0)
    return warp_layer(pano, DepthMap.from_array(depth), mask, stride=stride)


class TestVarint:
    @settings(max_examples=100, deadline=None)
    @given(arrays(np.int64, st.integers(0, 50), elements=st.integers(-2**40, 2**40)))
    def test_zigzag_varint_round_trip(self, x):
        buf = varint_encode(zigzag(x))
        np.testing.assert_array_equal(unzigzag(varint_decode(buf, len(x))), x)

    def test_small_values_one_byte(self):
        assert varint_encode([0, 1, 127]) == b"\x00\x01\x7f"
        assert varint_encode([128]) == b"\x80\x01"
        np.testing.assert_array_equal(zigzag([0, -1, 1, -2]), [0, 1, 2, 3])

    def test_truncated(self):
        with pytest.raises(FormatError):
            varint_decode(b"\x80", 1)


class TestQuantization:
    def test_unit_cube_bound(self):
        m = _cube()
        bound = quantization_bound(m, 14)
        assert np.all(bound <= 1 / (2 * 16383) + 1e-12)
        d = decode_compact(encode_compact(m, 14, 12))
        err = np.abs(d.positions - m.positions)
        assert np.all(err <= bound * (1 + FP_SLACK))
        assert err.max() <= 3.06e-5

    @pytest.mark.parametrize("bits", [8, 11, 16])
    def test_bound_all_bits(self, bits):
        m = _sphere_mesh(4)
        d = decode_compact(encode_compact(m, bits, 12))
        assert np.all(np.abs(d.positions - m.positions) <= quantization_bound(m, bits) * (1 + FP_SLACK))

    def test_uv_and_alpha(self):
        m = _sphere_mesh(4)
        d = decode_compact(encode_compact(m, 14, 12))
        ext = m.uv.max(0) - m.uv.min(0)
        assert np.all(np.abs(d.uv - m.uv) <= ext / 4095 / 2 * (1 + FP_SLACK))
        assert np.abs(d.alpha - m.alpha).max() <= 0.5 / 255 + 1e-12

    def test_degenerate_axis(self):
        P = np.array([[0, 0, 2.0], [1, 0, 2.0], [0, 1, 2.0], [1, 1, 2.0]])
        m = GridMesh(P, np.zeros((4, 2)), np.ones(4), [[0, 1, 2], [1, 3, 2]])
        blob = encode_compact(m)
        flags = blob[4 + 8 + 48 + 2]
        assert flags & 0b100
        d = decode_compact(blob)
        assert np.all(d.positions[:, 2] == 2.0)
        np.testing.assert_array_equal(d.positions[:, :2], P[:, :2])

    def test_bit_ranges(self):
        with pytest.raises(InvalidArgument):
            encode_compact(_cube(), 7, 12)
        with pytest.raises(InvalidArgument):
            encode_compact(_cube(), 14, 15)


class TestRoundTrip:
    def test_connectivity_lossless(self):
        m = _sphere_mesh()
        d = decode_compact(encode_compact(m))
        assert np.array_equal(d.indices, m.indices)
        assert np.array_equal(d.seam, m.seam)

    def test_deterministic(self):
        m = _sphere_mesh()
        assert encode_compact(m, name="bg") == encode_compact(m, name="bg")

    def test_empty_mesh(self):
        m = GridMesh(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))
        d = decode_compact(encode_compact(m))
        assert d.n_vertices == 0 and d.n_triangles == 0

    def test_shuffled_indices(self, rng):
        m = icosphere(2)
        m.indices = m.indices[rng.permutation(m.n_triangles)]
        d = decode_compact(encode_compact(m))
        assert np.array_equal(d.indices, m.indices)

    def test_compact_size(self):
        m = _sphere_mesh()
        assert len(encode_compact(m)) <= 0.1 * len(export_ply(m))

    def test_world_concatenation(self):
        a = _sphere_mesh(8)
        b = icosphere(1, 20.0)
        w = LayeredWorldMesh([a], ["background"], sky=b)
        parts = decode_world(encode_world(w))
        assert [n for n, _ in parts] == ["sky", "background"]
        assert np.array_equal(parts[1][1].indices, a.indices)
        assert parts[1][1].texture_ref == "background"


class TestCorruption:
    def test_bad_magic(self):
        blob = bytearray(encode_compact(_cube()))
        blob[0:4] = b"XXXX"
        with pytest.raises(FormatError):
            decode_compact(bytes(blob))

    @pytest.mark.parametrize("cut", [3, 40, 100, -1])
    def test_truncated(self, cut):
        blob = encode_compact(_sphere_mesh(8))
        with pytest.raises(FormatError):
            decode_compact(blob[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(FormatError):
            decode_compact(encode_compact(_cube()) + b"\0")

    def test_bad_bits_in_header(self):
        blob = bytearray(encode_compact(_cube()))
        blob[4 + 8 + 48] = 30
        with pytest.raises(FormatError):
            decode_compact(bytes(blob))

    def test_index_out_of_range(self):
        m = _cube()
        blob = encode_compact(m)
        head = struct.calcsize("<4sII6dBBBB4diH")
        name_len = struct.unpack_from("<H", blob, head - 2)[0]
        off = head + name_len
        body = bytearray(zlib.decompress(blob[off + 4:]))
        # shrink the declared vertex count so valid indices point past the end
        bad = bytearray(blob[:off])
        struct.pack_into("<I", bad, 4, 4)
        with pytest.raises(FormatError):
            decode_compact(bytes(bad) + struct.pack("<I", len(zlib.compress(bytes(body)))) + zlib.compress(bytes(body)))

    def test_corrupt_payload(self):
        blob = bytearray(encode_compact(_sphere_mesh(8)))
        blob[-10] ^= 0xFF
        with pytest.raises(FormatError):
            decode_compact(bytes(blob))
