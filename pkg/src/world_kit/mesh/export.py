"""Scene export: binary PLY and binary glTF (GLB), plus readers for both."""

from __future__ import annotations

import json
import re
import struct

import numpy as np

from ..errors import ExportError, FormatError
from ..imageio import decode_color_png, encode_color_png
from ..sheet_warp import GridMesh, PlacementTransform

_PLY_VERTEX = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                        ("u", "<f4"), ("v", "<f4"), ("alpha", "u1")])
_PLY_FACE = np.dtype([("n", "u1"), ("i", "<i4", (3,))])


def export_ply(m: GridMesh) -> bytes:
    """Binary little-endian PLY: float32 xyz, float32 uv, uchar alpha, int32 faces."""
    head = ("ply\nformat binary_little_endian 1.0\n"
            f"element vertex {m.n_vertices}\n"
            "property float x\nproperty float y\nproperty float z\n"
            "property float u\nproperty float v\n"
            "property uchar alpha\n"
            f"element face {m.n_triangles}\n"
            "property list uchar int vertex_indices\n"
            "end_header\n").encode("ascii")
    v = np.zeros(m.n_vertices, _PLY_VERTEX)
    if m.n_vertices:
        v["x"], v["y"], v["z"] = m.positions.T
        v["u"], v["v"] = m.uv.T
        v["alpha"] = np.rint(np.clip(m.alpha, 0.0, 1.0) * 255)
    f = np.zeros(m.n_triangles, _PLY_FACE)
    f["n"] = 3
    f["i"] = m.indices
    return head + v.tobytes() + f.tobytes()


def parse_ply(data: bytes) -> GridMesh:
    """Read back a file written by :func:`export_ply`."""
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file")
    header = data[:end].decode("ascii", "replace")
    if "binary_little_endian" not in header:
        raise FormatError("only binary little-endian PLY is supported")
    nv = re.search(r"element vertex (\d+)", header)
    nf = re.search(r"element face (\d+)", header)
    if nv is None or nf is None:
        raise FormatError("PLY header lacks vertex/face counts")
    nv, nf = int(nv.group(1)), int(nf.group(1))
    body = data[end + len(b"end_header\n"):]
    need = nv * _PLY_VERTEX.itemsize + nf * _PLY_FACE.itemsize
    if len(body) != need:
        raise FormatError(f"PLY body has {len(body)} bytes, expected {need}")
    v = np.frombuffer(body, _PLY_VERTEX, nv)
    f = np.frombuffer(body, _PLY_FACE, nf, offset=nv * _PLY_VERTEX.itemsize)
    if nf and np.any(f["n"] != 3):
        raise FormatError("non-triangular face")
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    uv = np.stack([v["u"], v["v"]], axis=1).astype(np.float64)
    return GridMesh(pos, uv, v["alpha"] / 255.0, f["i"].astype(np.int64))


def world_ply_bytes(world) -> int:
    """Total raw PLY size of every mesh in ``world`` (the size baseline)."""
    meshes = list(world.layers) + ([world.sky] if world.sky is not None else [])
    return sum(len(export_ply(m)) for m in meshes)


# -- glTF ------------------------------------------------------------------

_FLOAT, _UINT = 5126, 5125
_ARRAY_BUFFER, _ELEMENT_ARRAY_BUFFER = 34962, 34963
_LINEAR, _REPEAT, _CLAMP = 9729, 10497, 33071


class _Bin:
    def __init__(self):
        self.chunks = []
        self.size = 0
        self.views = []
        self.accessors = []

    def view(self, data: bytes, target=None) -> int:
        pad = (-self.size) % 4
        if pad:
            self.chunks.append(b"\0" * pad)
            self.size += pad
        v = {"buffer": 0, "byteOffset": self.size, "byteLength": len(data)}
        if target is not None:
            v["target"] = target
        self.chunks.append(data)
        self.size += len(data)
        self.views.append(v)
        return len(self.views) - 1

    def accessor(self, arr: np.ndarray, kind: str, target, minmax=False) -> int:
        ctype = _UINT if arr.dtype == np.uint32 else _FLOAT
        acc = {"bufferView": self.view(np.ascontiguousarray(arr).tobytes(), target),
               "componentType": ctype, "count": int(arr.shape[0]), "type": kind}
        if minmax:
            a = arr.reshape(arr.shape[0], -1)
            acc["min"] = [float(x) for x in a.min(axis=0)]
            acc["max"] = [float(x) for x in a.max(axis=0)]
        self.accessors.append(acc)
        return len(self.accessors) - 1


def _check_texture(name, mesh: GridMesh, tex):
    if tex is None:
        raise ExportError(f"layer '{name}' references missing texture '{mesh.texture_ref or name}'")
    tex = np.asarray(tex)
    if tex.ndim not in (2, 3) or tex.shape[0] < 1 or tex.shape[1] < 1:
        raise ExportError(f"texture for layer '{name}' is not an image")
    H, W = tex.shape[:2]
    if W != 2 * H:
        raise ExportError(f"texture for layer '{name}' is {W}x{H}, not a 2:1 panorama")
    if mesh.n_vertices:
        u, v = mesh.uv[:, 0], mesh.uv[:, 1]
        if u.min() < 0 or u.max() > 1.0 + 1.0 / W or v.min() < 0 or v.max() > 1:
            raise ExportError(f"UVs of layer '{name}' fall outside its texture")
        if mesh.grid_ij is not None:
            g = mesh.grid_ij[mesh.grid_ij[:, 0] >= 0]
            if len(g) and (g[:, 0].max() >= W or g[:, 1].max() >= H):
                raise ExportError(f"layer '{name}' was warped on a larger lattice than its texture")


def export_gltf(world, textures: dict) -> bytes:
    """Serialize a layered world as a single GLB.

    ``textures`` maps each mesh's ``texture_ref`` (or layer name when empty)
    to an ERP image. Each layer becomes a node named after the layer; the sky
    dome is named "sky". Placements become mesh-less nodes with TRS.
    """
    entries = []
    if world.sky is not None:
        entries.append(("sky", world.sky))
    entries.extend(zip(world.names, world.layers))
    b = _Bin()
    doc = {"asset": {"version": "2.0", "generator": "world_kit"}, "scene": 0}
    nodes, meshes, materials, images, tex_index = [], [], [], [], {}
    for name, mesh in entries:
        key = mesh.texture_ref or name
        tex = textures.get(key)
        _check_texture(name, mesh, tex)
        if mesh.is_empty():
            continue
        if key not in tex_index:
            png = encode_color_png(np.asarray(tex, np.float64)[..., :3] if np.ndim(tex) == 3
                                   else np.repeat(np.asarray(tex, np.float64)[..., None], 3, 2))
            images.append({"bufferView": b.view(png), "mimeType": "image/png", "name": key})
            tex_index[key] = len(images) - 1
        pos = b.accessor(mesh.positions.astype("<f4"), "VEC3", _ARRAY_BUFFER, minmax=True)
        uv = b.accessor(mesh.uv.astype("<f4"), "VEC2", _ARRAY_BUFFER)
        col = np.ones((mesh.n_vertices, 4), "<f4")
        col[:, 3] = np.clip(mesh.alpha, 0.0, 1.0)
        color = b.accessor(col, "VEC4", _ARRAY_BUFFER)
        idx = b.accessor(mesh.indices.astype("<u4").ravel(), "SCALAR", _ELEMENT_ARRAY_BUFFER)
        materials.append({
            "name": name,
            "pbrMetallicRoughness": {"baseColorTexture": {"index": tex_index[key]},
                                     "metallicFactor": 0.0, "roughnessFactor": 1.0},
            "alphaMode": "BLEND", "doubleSided": True,
            "extensions": {"KHR_materials_unlit": {}},
        })
        meshes.append({"name": name, "primitives": [{
            "attributes": {"POSITION": pos, "TEXCOORD_0": uv, "COLOR_0": color},
            "indices": idx, "material": len(materials) - 1, "mode": 4}]})
        nodes.append({"name": name, "mesh": len(meshes) - 1})
    for p in world.placements:
        node = {"name": p.name or "placement",
                "translation": [float(x) for x in np.asarray(p.translation, np.float64)],
                "rotation": [float(x) for x in p.rotation_quaternion()],
                "scale": [float(p.uniform_scale)] * 3}
        if p.asset:
            node["extras"] = {"asset": p.asset}
        nodes.append(node)

    scene = {"name": "world"}
    if nodes:
        scene["nodes"] = list(range(len(nodes)))
        doc["nodes"] = nodes
    doc["scenes"] = [scene]
    if meshes:
        doc["meshes"] = meshes
        doc["materials"] = materials
        doc["images"] = images
        doc["samplers"] = [{"magFilter": _LINEAR, "minFilter": _LINEAR,
                            "wrapS": _REPEAT, "wrapT": _CLAMP}]
        doc["textures"] = [{"sampler": 0, "source": i} for i in range(len(images))]
        doc["extensionsUsed"] = ["KHR_materials_unlit"]
    if b.size:
        pad = (-b.size) % 4
        b.chunks.append(b"\0" * pad)
        b.size += pad
        doc["buffers"] = [{"byteLength": b.size}]
        doc["bufferViews"] = b.views
        doc["accessors"] = b.accessors
    js = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    js += b" " * ((-len(js)) % 4)
    out = [struct.pack("<I", len(js)), b"JSON", js]
    if b.size:
        out += [struct.pack("<I", b.size), b"BIN\0"] + b.chunks
    body = b"".join(out)
    return struct.pack("<4sII", b"glTF", 2, 12 + len(body)) + body


def read_glb(data: bytes):
    """Split a GLB into its JSON document and binary chunk."""
    if len(data) < 20:
        raise FormatError("truncated GLB")
    magic, version, length = struct.unpack_from("<4sII", data, 0)
    if magic != b"glTF" or version != 2 or length != len(data):
        raise FormatError("not a glTF 2.0 binary")
    jlen, jtype = struct.unpack_from("<I4s", data, 12)
    if jtype != b"JSON":
        raise FormatError("first GLB chunk is not JSON")
    doc = json.loads(data[20:20 + jlen])
    off = 20 + jlen
    binary = b""
    if off < len(data):
        blen, btype = struct.unpack_from("<I4s", data, off)
        if btype != b"BIN\0":
            raise FormatError("second GLB chunk is not BIN")
        binary = data[off + 8: off + 8 + blen]
    return doc, binary


_NCOMP = {"SCALAR": 1, "VEC2": 2, "VEC3": 3, "VEC4": 4}


def _accessor(doc, binary, i):
    acc = doc["accessors"][i]
    view = doc["bufferViews"][acc["bufferView"]]
    dt = "<u4" if acc["componentType"] == _UINT else "<f4"
    n = _NCOMP[acc["type"]]
    arr = np.frombuffer(binary, dt, acc["count"] * n,
                        offset=view.get("byteOffset", 0) + acc.get("byteOffset", 0))
    return arr.reshape(acc["count"], n) if n > 1 else arr


def load_glb(data: bytes):
    """Load a GLB written by :func:`export_gltf`.

    Returns ``(layers, placements)`` where ``layers`` is a list of
    ``(name, GridMesh, texture)`` in node order.
    """
    doc, binary = read_glb(data)
    layers, placements = [], []
    textures = {}
    for node in doc.get("nodes", []):
        if "mesh" not in node:
            q = node.get("rotation", [0, 0, 0, 1])
            placements.append(PlacementTransform(
                np.array(node.get("translation", [0, 0, 0]), np.float64),
                float(node.get("scale", [1, 1, 1])[0]),
                2.0 * float(np.arctan2(q[1], q[3])), node.get("name", ""),
                node.get("extras", {}).get("asset")))
            continue
        prim = doc["meshes"][node["mesh"]]["primitives"][0]
        attr = prim["attributes"]
        pos = _accessor(doc, binary, attr["POSITION"]).astype(np.float64)
        uv = _accessor(doc, binary, attr["TEXCOORD_0"]).astype(np.float64)
        alpha = _accessor(doc, binary, attr["COLOR_0"])[:, 3].astype(np.float64)
        idx = _accessor(doc, binary, prim["indices"]).astype(np.int64).reshape(-1, 3)
        tex_id = doc["materials"][prim["material"]]["pbrMetallicRoughness"]["baseColorTexture"]["index"]
        src = doc["textures"][tex_id]["source"]
        if src not in textures:
            view = doc["bufferViews"][doc["images"][src]["bufferView"]]
            o = view.get("byteOffset", 0)
            textures[src] = decode_color_png(binary[o:o + view["byteLength"]])
        name = node.get("name", "")
        layers.append((name, GridMesh(pos, uv, alpha, idx, texture_ref=name), textures[src]))
    return layers, placements
