"""LWC compact mesh codec.

A blob is a little-endian header followed by one zlib-compressed payload::

    magic        4s   b"LWC1"
    n_vertices   u32
    n_indices    u32  (3 x triangle count)
    aabb         6f8  position min xyz, max xyz
    pos_bits     u8
    uv_bits      u8
    flags        u8   bit0-2 constant position axis, bit3-4 constant uv axis, bit5 seam bits present
    predictors   u8   low nibble: position delta order, high nibble: uv delta order
    uv_box       4f8  uv min uv, max uv
    layer_id     i4
    name_len     u16
    name         utf-8
    payload_len  u32
    payload      zlib( u32 x 5 section sizes | positions | uvs | indices | alpha | seam )

Positions and UVs are uniformly quantized inside their boxes, delta coded
along vertex order, zigzag mapped and written as LEB128 varints. Triangles
store the first corner as a delta to the previous triangle's first corner and
the other two corners relative to the first. Alpha is one byte per vertex.

Blobs are self-delimiting, so a multi-layer world file is the plain
concatenation of its layer blobs.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from ..errors import FormatError, InvalidArgument
from ..sheet_warp import GridMesh

MAGIC = b"LWC1"
_HEAD = struct.Struct("<4sII6dBBBB4diH")
_U32 = struct.Struct("<I")


def zigzag(x):
    x = np.asarray(x, dtype=np.int64)
    return ((x << 1) ^ (x >> 63)).astype(np.uint64)


def unzigzag(z):
    z = np.asarray(z, dtype=np.uint64)
    return (z >> np.uint64(1)).astype(np.int64) ^ -(z & np.uint64(1)).astype(np.int64)


def varint_encode(values) -> bytes:
    """LEB128 encoding of non-negative integers (vectorized)."""
    v = np.asarray(values, dtype=np.uint64).ravel()
    if v.size == 0:
        return b""
    nbytes = np.ones(v.size, dtype=np.int64)
    t = v >> np.uint64(7)
    while t.any():
        nbytes += t > 0
        t >>= np.uint64(7)
    out = np.zeros(int(nbytes.sum()), dtype=np.uint8)
    start = np.concatenate([[0], np.cumsum(nbytes)[:-1]])
    for k in range(int(nbytes.max())):
        sel = nbytes > k
        byte = (v[sel] >> np.uint64(7 * k)) & np.uint64(0x7F)
        more = (nbytes[sel] > k + 1).astype(np.uint64) << np.uint64(7)
        out[start[sel] + k] = (byte | more).astype(np.uint8)
    return out.tobytes()


def varint_decode(buf: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(buf, dtype=np.uint8)
    ends = np.flatnonzero(b < 0x80)
    if len(ends) != count or (count and ends[-1] != len(b) - 1) or (not count and len(b)):
        raise FormatError("varint stream length does not match its count")
    if count == 0:
        return np.zeros(0, dtype=np.uint64)
    starts = np.concatenate([[0], ends[:-1] + 1])
    lengths = ends - starts + 1
    if lengths.max() > 10:
        raise FormatError("varint longer than 64 bits")
    out = np.zeros(count, dtype=np.uint64)
    for k in range(int(lengths.max())):
        sel = lengths > k
        out[sel] |= (b[starts[sel] + k].astype(np.uint64) & np.uint64(0x7F)) << np.uint64(7 * k)
    return out


def _delta(q, order):
    d = q.astype(np.int64)
    for _ in range(order):
        d = np.diff(d, axis=0, prepend=np.zeros((1,) + d.shape[1:], np.int64))
    return d


def _undelta(d, order):
    q = d
    for _ in range(order):
        q = np.cumsum(q, axis=0)
    return q


def _quantize(x, lo, hi, bits):
    """Uniform quantization per column; constant columns map to 0."""
    levels = (1 << bits) - 1
    ext = hi - lo
    q = np.zeros(x.shape, dtype=np.int64)
    live = ext > 0
    if x.size:
        q[:, live] = np.rint((x[:, live] - lo[live]) / ext[live] * levels).astype(np.int64)
    return np.clip(q, 0, levels), ~live


def _dequantize(q, lo, hi, bits):
    levels = (1 << bits) - 1
    return lo + q.astype(np.float64) * ((hi - lo) / levels)


def _coded_attr(q):
    """Pick the delta order (1 or 2) giving the shorter varint stream."""
    best = None
    for order in (1, 2):
        raw = varint_encode(zigzag(_delta(q, order)).ravel())
        if best is None or len(raw) < len(best[1]):
            best = (order, raw)
    return best


def _encode_indices(t):
    if not len(t):
        return b""
    first = t[:, 0]
    d0 = np.diff(first, prepend=0)
    rel = t[:, 1:] - first[:, None]
    return varint_encode(zigzag(np.column_stack([d0, rel])).ravel())


def _decode_indices(buf, n_idx):
    v = unzigzag(varint_decode(buf, n_idx)).reshape(-1, 3)
    first = np.cumsum(v[:, 0])
    return np.column_stack([first, v[:, 1:] + first[:, None]])


def encode_compact(m: GridMesh, pos_bits: int = 14, uv_bits: int = 12, name: str = "") -> bytes:
    """Quantize and pack a mesh into an LWC blob (deterministic for identical input)."""
    if not 8 <= pos_bits <= 16:
        raise InvalidArgument("pos_bits must be in [8, 16]")
    if not 8 <= uv_bits <= 14:
        raise InvalidArgument("uv_bits must be in [8, 14]")
    P = np.asarray(m.positions, np.float64)
    UV = np.asarray(m.uv, np.float64)
    n_v, n_i = len(P), 3 * m.n_triangles
    if n_v:
        lo, hi = P.min(axis=0), P.max(axis=0)
        ulo, uhi = UV.min(axis=0), UV.max(axis=0)
    else:
        lo = hi = np.zeros(3)
        ulo = uhi = np.zeros(2)
    qp, pconst = _quantize(P, lo, hi, pos_bits)
    qu, uconst = _quantize(UV, ulo, uhi, uv_bits)
    porder, pos_stream = _coded_attr(qp)
    uorder, uv_stream = _coded_attr(qu)
    idx_stream = _encode_indices(m.indices)
    alpha = np.rint(np.clip(m.alpha, 0.0, 1.0) * 255).astype(np.uint8).tobytes()
    has_seam = m.seam is not None and bool(np.any(m.seam))
    seam = np.packbits(m.seam.astype(np.uint8)).tobytes() if has_seam else b""

    flags = 0
    for k in range(3):
        flags |= int(pconst[k]) << k
    for k in range(2):
        flags |= int(uconst[k]) << (3 + k)
    flags |= int(has_seam) << 5
    sections = (pos_stream, uv_stream, idx_stream, alpha, seam)
    body = b"".join(_U32.pack(len(s)) for s in sections) + b"".join(sections)
    payload = zlib.compress(body, 6)
    nm = name.encode("utf-8")
    if len(nm) > 0xFFFF:
        raise InvalidArgument("layer name too long")
    head = _HEAD.pack(MAGIC, n_v, n_i, *lo, *hi, pos_bits, uv_bits, flags,
                      porder | (uorder << 4), *ulo, *uhi, int(m.layer_id), len(nm))
    return head + nm + _U32.pack(len(payload)) + payload


def _read_one(buf: bytes, off: int):
    if len(buf) - off < _HEAD.size:
        raise FormatError("truncated LWC header")
    fields = _HEAD.unpack_from(buf, off)
    if fields[0] != MAGIC:
        raise FormatError(f"bad magic {fields[0]!r}")
    n_v, n_i = fields[1], fields[2]
    lo, hi = np.array(fields[3:6]), np.array(fields[6:9])
    pos_bits, uv_bits, flags, pred = fields[9:13]
    ulo, uhi = np.array(fields[13:15]), np.array(fields[15:17])
    layer_id, name_len = fields[17], fields[18]
    if n_i % 3:
        raise FormatError("index count is not a multiple of 3")
    if not (8 <= pos_bits <= 16 and 8 <= uv_bits <= 14):
        raise FormatError("quantization bits out of range")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)) and np.all(hi >= lo)):
        raise FormatError("invalid bounding box")
    off += _HEAD.size
    if len(buf) - off < name_len + 4:
        raise FormatError("truncated LWC header")
    try:
        name = buf[off:off + name_len].decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("layer name is not utf-8") from e
    off += name_len
    (plen,) = _U32.unpack_from(buf, off)
    off += 4
    if len(buf) - off < plen:
        raise FormatError("truncated LWC payload")
    try:
        body = zlib.decompress(buf[off:off + plen])
    except zlib.error as e:
        raise FormatError(f"corrupt payload: {e}") from e
    off += plen
    if len(body) < 20:
        raise FormatError("payload too short")
    sizes = struct.unpack_from("<5I", body, 0)
    if 20 + sum(sizes) != len(body):
        raise FormatError("payload section sizes do not add up")
    parts, p = [], 20
    for s in sizes:
        parts.append(body[p:p + s])
        p += s
    pos_s, uv_s, idx_s, alpha_s, seam_s = parts

    pconst = np.array([(flags >> k) & 1 for k in range(3)], bool)
    qp = _undelta(unzigzag(varint_decode(pos_s, 3 * n_v)).reshape(n_v, 3), pred & 0xF)
    qu = _undelta(unzigzag(varint_decode(uv_s, 2 * n_v)).reshape(n_v, 2), pred >> 4)
    P = _dequantize(qp, lo, hi, pos_bits)
    P[:, pconst] = lo[pconst]
    UV = _dequantize(qu, ulo, uhi, uv_bits)
    tri = _decode_indices(idx_s, n_i)
    if len(tri) and (tri.min() < 0 or tri.max() >= n_v):
        raise FormatError("triangle index out of range")
    if len(alpha_s) != n_v:
        raise FormatError("alpha section length mismatch")
    alpha = np.frombuffer(alpha_s, np.uint8).astype(np.float64) / 255.0
    seam = None
    if flags & 0x20:
        if len(seam_s) != (n_v + 7) // 8:
            raise FormatError("seam section length mismatch")
        seam = np.unpackbits(np.frombuffer(seam_s, np.uint8))[:n_v].astype(bool)
    mesh = GridMesh(P, UV, alpha, tri, layer_id=layer_id, texture_ref=name, seam=seam)
    return mesh, name, off


def decode_compact(blob: bytes) -> GridMesh:
    """Decode a single LWC blob; trailing bytes are an error."""
    mesh, _, end = _read_one(bytes(blob), 0)
    if end != len(blob):
        raise FormatError("trailing bytes after LWC blob")
    return mesh


def quantization_bound(m: GridMesh, pos_bits: int) -> np.ndarray:
    """Per-axis worst-case reconstruction error for ``m`` at ``pos_bits``."""
    if not m.n_vertices:
        return np.zeros(3)
    ext = m.positions.max(axis=0) - m.positions.min(axis=0)
    return ext / ((1 << pos_bits) - 1) / 2.0


def encode_world(world, pos_bits: int = 14, uv_bits: int = 12) -> bytes:
    """Concatenate one blob per layer (sky first when present, then near to far)."""
    out = []
    if world.sky is not None:
        out.append(encode_compact(world.sky, pos_bits, uv_bits, "sky"))
    for name, mesh in zip(world.names, world.layers):
        out.append(encode_compact(mesh, pos_bits, uv_bits, name))
    return b"".join(out)


def decode_world(buf: bytes) -> list:
    """Split a world file into ``(name, GridMesh)`` pairs."""
    buf = bytes(buf)
    out, off = [], 0
    while off < len(buf):
        mesh, name, off = _read_one(buf, off)
        out.append((name, mesh))
    return out
