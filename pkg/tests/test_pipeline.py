import json
import shutil

import numpy as np
import pytest

from world_kit import imageio
from world_kit.errors import InvalidArgument, StageError
from world_kit.fixtures import write_room_manifest, write_sphere_manifest
from world_kit.mesh.codec import decode_world
from world_kit.mesh.export import load_glb
from world_kit.pipeline import (DEFAULTS, cmd_reconstruct, load_manifest, reconstruct, report_json,
                                worker_count, write_outputs)


def _edit(manifest, fn):
    doc = json.loads(manifest.read_text())
    fn(doc)
    manifest.write_text(json.dumps(doc))
    return manifest


@pytest.fixture
def sphere_copy(sphere_512, tmp_path):
    root = tmp_path / "scene"
    shutil.copytree(sphere_512.parent, root)
    return root / "manifest.json"


class TestManifest:
    def test_missing_depth_names_layer(self, tmp_path):
        m = write_room_manifest(tmp_path / "r", 64, 32)
        _edit(m, lambda d: d["layers"][1].pop("depth"))
        with pytest.raises(StageError) as exc:
            load_manifest(m)
        assert exc.value.layer == "fg_01" and "fg_01" in str(exc.value)

    @pytest.mark.parametrize("edit,needle", [
        (lambda d: d["layers"][0].update(kind="chair"), "unknown layer kind"),
        (lambda d: d["layers"].pop(2), "exactly one background"),
        (lambda d: d["layers"][0].update(order=5), "orders"),
        (lambda d: d["output"].update(strides=3), "unknown output settings"),
        (lambda d: d["layers"][0].update(mask="nope.png"), "not found"),
        (lambda d: d.pop("panorama"), "panorama"),
    ])
    def test_validation(self, tmp_path, edit, needle):
        m = _edit(write_room_manifest(tmp_path / "r", 64, 32), edit)
        with pytest.raises(StageError, match=needle):
            load_manifest(m)

    def test_bad_json_line(self, tmp_path):
        m = tmp_path / "m.json"
        m.write_text('{\n "panorama": "x.png",\n oops\n}')
        with pytest.raises(StageError, match="m.json:3"):
            load_manifest(m)

    def test_depth_size_mismatch(self, sphere_copy):
        imageio.write_depth(sphere_copy.parent / "depth.pfm", np.ones((8, 16)))
        with pytest.raises(StageError) as exc:
            reconstruct(load_manifest(sphere_copy))
        assert exc.value.stage == "load" and exc.value.layer == "background"

    def test_settings_precedence(self, tmp_path):
        m = load_manifest(write_sphere_manifest(tmp_path / "s", 64, 32, stride=4, kappa=1.2))
        s = m.settings({"stride": 8, "kappa": None})
        assert s["stride"] == 8 and s["kappa"] == 1.2 and s["decimate"] == DEFAULTS["decimate"]


class TestWorkers:
    def test_env_cap(self, monkeypatch):
        monkeypatch.setenv("WORLD_KIT_THREADS", "2")
        assert worker_count(8) == 2 and worker_count(1) == 1

    def test_unset(self, monkeypatch):
        monkeypatch.delenv("WORLD_KIT_THREADS", raising=False)
        assert worker_count(8) == 8 and worker_count(None) == 1

    def test_bad_env(self, monkeypatch):
        monkeypatch.setenv("WORLD_KIT_THREADS", "many")
        with pytest.raises(InvalidArgument):
            worker_count(4)


class TestStaging:
    def test_failure_leaves_nothing(self, tmp_path):
        out = tmp_path / "out"
        with pytest.raises(OSError):
            write_outputs(out, {"a.bin": b"1", "missing/b.bin": b"2"})
        assert not out.exists()
        assert list(tmp_path.iterdir()) == []

    def test_existing_dir_untouched_on_failure(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        (out / "a.bin").write_bytes(b"old")
        with pytest.raises(OSError):
            write_outputs(out, {"a.bin": b"new", "missing/b.bin": b"2"})
        assert (out / "a.bin").read_bytes() == b"old"

    def test_failed_run_writes_nothing(self, sphere_copy, tmp_path):
        (sphere_copy.parent / "depth.pfm").write_bytes(b"garbage")
        out = tmp_path / "result"
        with pytest.raises(StageError):
            cmd_reconstruct(sphere_copy, out)
        assert not out.exists()


class TestReconstruct:
    def test_sphere_radius(self, sphere_512):
        res = reconstruct(load_manifest(sphere_512), {"decimate": 1.0})
        bg = res.world.layers[res.world.names.index("background")]
        r = np.linalg.norm(bg.positions, axis=1)
        assert np.abs(r - 3.0).max() <= 1e-6

    def test_room_report(self, room_512, tmp_path):
        report = cmd_reconstruct(room_512, tmp_path / "out")
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["report.json", "world.glb", "world.lwc"]
        for layer in report["layers"]:
            assert layer["alignment"]["a"] > 0
        assert report["validation"]["ok"] and report["validation"]["seam_closed"]
        assert report["ratios"]["decimation_vs_raw"] >= 0.8
        sizes = report["sizes"]
        assert report["ratios"]["lwc_vs_raw"] == pytest.approx(1 - sizes["lwc_bytes"] / sizes["raw_ply_bytes"],
                                                               abs=1e-9)
        assert json.loads((tmp_path / "out" / "report.json").read_text()) == report

    def test_recovers_layer_distortion(self, room_512):
        from world_kit.fixtures import LAYER_DISTORTION
        res = reconstruct(load_manifest(room_512), {"decimate": 1.0, "raw_baseline": False})
        for layer in res.report["layers"]:
            a, b = LAYER_DISTORTION[layer["name"]]
            # the fixture's layer disparity x satisfies a*x + b = true disparity
            assert layer["alignment"]["space"] == "disparity"
            assert layer["alignment"]["a"] == pytest.approx(a, abs=1e-6)
            assert layer["alignment"]["b"] == pytest.approx(b, abs=1e-6)

    def test_outputs_decode(self, room_512):
        res = reconstruct(load_manifest(room_512), {"stride": 4})
        names = [n for n, _ in decode_world(res.lwc)]
        layers, _ = load_glb(res.glb)
        assert names == [n for n, *_ in layers] == ["sky", "fg_00", "fg_01", "background"]

    def test_deterministic(self, tmp_path):
        m = write_room_manifest(tmp_path / "r", 128, 64)
        a = cmd_reconstruct(m, tmp_path / "a", {"workers": 4})
        b = cmd_reconstruct(m, tmp_path / "b", {"workers": 1})
        assert report_json(a) == report_json(b)
        for name in ("world.glb", "world.lwc", "report.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_placement(self, tmp_path):
        m = write_room_manifest(tmp_path / "r", 256, 128)
        _edit(m, lambda d: d.update(placements=[{"layer": "fg_00", "asset": "box.glb", "extent": [1, 1, 1]}]))
        res = reconstruct(load_manifest(m), {"stride": 4})
        p = res.report["placements"][0]
        assert p["asset"] == "box.glb" and p["scale"] > 0

    def test_placement_unknown_layer(self, tmp_path):
        m = write_room_manifest(tmp_path / "r", 64, 32)
        _edit(m, lambda d: d.update(placements=[{"layer": "fg_09"}]))
        with pytest.raises(StageError) as exc:
            reconstruct(load_manifest(m), {"stride": 4})
        assert exc.value.stage == "place" and exc.value.layer == "fg_09"
