import json
import os
import shutil
import subprocess
from pathlib import Path

import numpy as np
import pytest

from world_kit import imageio
from world_kit.depth import DepthMap
from world_kit.errors import ExportError, FormatError
from world_kit.fixtures import sphere_fixture
from world_kit.mesh.export import export_gltf, export_ply, load_glb, parse_ply, read_glb
from world_kit.sheet_warp import GridMesh, LayeredWorldMesh, PlacementTransform, warp_layer


def _layer(radius, W=64, H=32, stride=4, ref=""):
    pano, depth, mask = sphere_fixture(W, H, radius)
    return warp_layer(pano, DepthMap.from_array(depth), mask, stride=stride, texture_ref=ref), pano


def _two_layer_world():
    fg, tex_fg = _layer(2.0, ref="fg_00")
    bg, tex_bg = _layer(5.0, ref="background")
    sky, tex_sky = _layer(6.0, ref="sky")
    world = LayeredWorldMesh([fg, bg], ["fg_00", "background"], sky=sky,
                             placements=[PlacementTransform(np.array([0, 0, -2.0]), 1.5, 0.3, "chair", "chair.glb")])
    return world, {"fg_00": tex_fg, "background": tex_bg, "sky": tex_sky}


def _validator():
    """Node command running the Khronos glTF validator, or None."""
    node = shutil.which("node")
    if node is None:
        return None
    module = os.environ.get("GLTF_VALIDATOR_MODULE")
    if not module:
        npm = shutil.which("npm")
        if npm is None:
            return None
        root = subprocess.run([npm, "root", "-g"], capture_output=True, text=True).stdout.strip()
        module = str(Path(root) / "gltf-validator")
    if not Path(module).exists():
        return None
    script = (f"const v=require({json.dumps(module)});const fs=require('fs');"
              "v.validateBytes(new Uint8Array(fs.readFileSync(process.argv[1])))"
              ".then(r=>console.log(JSON.stringify(r.issues)))"
              ".catch(e=>{console.error(String(e));process.exit(1);});")
    return [node, "-e", script]


class TestPly:
    def test_header_counts(self):
        m, _ = _layer(3.0)
        data = export_ply(m)
        head = data[:data.index(b"end_header")].decode()
        assert f"element vertex {m.n_vertices}" in head
        assert f"element face {m.n_triangles}" in head
        assert "binary_little_endian" in head

    def test_round_trip(self):
        m, _ = _layer(3.0)
        back = parse_ply(export_ply(m))
        np.testing.assert_array_equal(back.positions, m.positions.astype(np.float32))
        np.testing.assert_array_equal(back.uv, m.uv.astype(np.float32))
        np.testing.assert_array_equal(back.indices, m.indices)
        np.testing.assert_allclose(back.alpha, m.alpha, atol=0.5 / 255)

    def test_empty_is_header_only(self):
        m = GridMesh(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)))
        data = export_ply(m)
        assert data.endswith(b"end_header\n")
        assert parse_ply(data).n_vertices == 0

    def test_size_formula(self):
        m, _ = _layer(3.0)
        head = export_ply(m).index(b"end_header\n") + len(b"end_header\n")
        assert len(export_ply(m)) == head + 21 * m.n_vertices + 13 * m.n_triangles

    def test_bad_body(self):
        m, _ = _layer(3.0)
        with pytest.raises(FormatError):
            parse_ply(export_ply(m)[:-1])
        with pytest.raises(FormatError):
            parse_ply(b"not a ply")


class TestGltf:
    def test_empty_world(self):
        data = export_gltf(LayeredWorldMesh([], []), {})
        doc, binary = read_glb(data)
        assert "meshes" not in doc and "nodes" not in doc and binary == b""
        assert doc["scenes"] == [{"name": "world"}]

    def test_node_names(self):
        world, tex = _two_layer_world()
        doc, _ = read_glb(export_gltf(world, tex))
        names = [n["name"] for n in doc["nodes"] if "mesh" in n]
        assert names == ["sky", "fg_00", "background"]
        mat = doc["materials"][0]
        assert mat["alphaMode"] == "BLEND" and mat["doubleSided"] is True
        assert doc["samplers"][0]["wrapS"] == 10497

    def test_two_layer_world(self):
        fg, t1 = _layer(2.0, ref="fg_00")
        bg, t2 = _layer(5.0, ref="background")
        doc, _ = read_glb(export_gltf(LayeredWorldMesh([fg, bg], ["fg_00", "background"]),
                                      {"fg_00": t1, "background": t2}))
        assert [n["name"] for n in doc["nodes"]] == ["fg_00", "background"]

    def test_placement_node(self):
        world, tex = _two_layer_world()
        doc, _ = read_glb(export_gltf(world, tex))
        node = doc["nodes"][-1]
        assert "mesh" not in node and node["name"] == "chair"
        assert node["translation"] == [0.0, 0.0, -2.0] and node["scale"] == [1.5] * 3
        assert node["rotation"][1] == pytest.approx(np.sin(0.15))

    def test_load_round_trip(self):
        world, tex = _two_layer_world()
        layers, placements = load_glb(export_gltf(world, tex))
        assert [n for n, *_ in layers] == ["sky", "fg_00", "background"]
        name, mesh, texture = layers[1]
        np.testing.assert_allclose(mesh.positions, world.layers[0].positions, atol=1e-6)
        np.testing.assert_array_equal(mesh.indices, world.layers[0].indices)
        # textures are stored as 8-bit sRGB: half a code step in encoded space
        enc = imageio.linear_to_srgb
        assert np.abs(enc(texture) - enc(tex["fg_00"])).max() <= 0.5 / 255 + 1e-9
        assert placements[0].yaw == pytest.approx(0.3) and placements[0].asset == "chair.glb"

    def test_deterministic(self):
        world, tex = _two_layer_world()
        assert export_gltf(world, tex) == export_gltf(world, tex)

    def test_missing_texture(self):
        world, tex = _two_layer_world()
        del tex["background"]
        with pytest.raises(ExportError):
            export_gltf(world, tex)

    def test_texture_not_erp(self):
        world, tex = _two_layer_world()
        tex["background"] = np.zeros((32, 32, 3))
        with pytest.raises(ExportError):
            export_gltf(world, tex)

    def test_uv_outside_texture(self):
        world, tex = _two_layer_world()
        world.layers[0].uv[0] = [1.5, 0.5]
        with pytest.raises(ExportError):
            export_gltf(world, tex)

    def test_schema_validator(self, tmp_path):
        cmd = _validator()
        if cmd is None:
            pytest.skip("glTF validator not installed (node + gltf-validator)")
        world, tex = _two_layer_world()
        for name, data in (("world.glb", export_gltf(world, tex)),
                           ("empty.glb", export_gltf(LayeredWorldMesh([], []), {}))):
            path = tmp_path / name
            path.write_bytes(data)
            proc = subprocess.run(cmd + [str(path)], capture_output=True, text=True, timeout=120)
            assert proc.returncode == 0, proc.stderr
            issues = json.loads(proc.stdout)
            assert issues["numErrors"] == 0, issues["messages"][:5]
