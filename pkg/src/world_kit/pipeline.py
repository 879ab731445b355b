"""Manifest-driven reconstruction: layers -> aligned depth -> meshes ->
decimated, exported world, plus a deterministic JSON report.

Manifest (JSON, paths relative to the manifest file)::

    {
      "panorama": "pano.png",              # ERP image, or a pinhole image with "camera"
      "camera": {"fov": 90, "yaw": 0, "pitch": 0, "erp_width": 2048},   # optional
      "depth": "base.pfm",                 # optional base depth the layers align to
      "sky_mask": "sky.png",               # optional
      "layers": [                          # optional when providers are configured
        {"kind": "foreground"|"background"|"sky", "order": 0,
         "image": "...png", "mask": "...png", "depth": "...pfm",
         "completed_image": "...png", "completed_mask": "...png"}
      ],
      "providers": {"detect": [...], "segment": [...], "complete": [...],
                    "sky_complete": [...], "labels": ["chair"], "sublayers": 2},
      "placements": [{"layer": "fg_00", "asset": "chair.glb", "extent": [1, 1, 1]}],
      "output": {"stride": 2, "tear_ratio": 1.3, "kappa": 1.05, "decimate": 0.2,
                 "pos_bits": 14, "uv_bits": 12, "feather": 2.0, "polar_lat": 75.0,
                 "compress_q": 99.0, "compress_slope": 1.0, "workers": 4}
    }

Foreground and background entries need a depth map; the sky never does.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio, layering, providers
from .depth import (AffineDepthTransform, AlignmentReport, DepthMap, adaptive_compress,
                    apply_affine, estimate_affine_alignment, overlap_mask, sky_depth)
from .erp import PinholeCamera, pinhole_to_erp
from .errors import InvalidArgument, StageError, WorldKitError
from .layering import BACKGROUND, FOREGROUND, SKY, Layer, LayerStack
from .mesh.codec import encode_world
from .mesh.decimate import decimate_qem
from .mesh.export import export_gltf, export_ply
from .sheet_warp import (LayeredWorldMesh, assemble_world, build_sky_dome, place_object,
                         polar_smooth, warp_layer)

log = logging.getLogger(__name__)

DEFAULTS = {"stride": 2, "tear_ratio": 1.3, "kappa": 1.05, "decimate": 0.2,
            "pos_bits": 14, "uv_bits": 12, "feather": 2.0, "polar_lat": 75.0,
            "compress_q": 99.0, "compress_slope": 1.0, "workers": 4, "strict": True,
            "raw_baseline": True}
OUTPUT_FILES = ("world.glb", "world.lwc", "report.json")


def worker_count(requested: int | None) -> int:
    """Requested workers capped by WORLD_KIT_THREADS (when set)."""
    n = max(1, int(requested or 1))
    env = os.environ.get("WORLD_KIT_THREADS")
    if env:
        try:
            n = min(n, max(1, int(env)))
        except ValueError:
            raise InvalidArgument(f"WORLD_KIT_THREADS must be an integer, got {env!r}") from None
    return n


@dataclass
class LayerSpec:
    kind: str
    image: Path
    mask: Path | None = None
    depth: Path | None = None
    order: int | None = None
    completed_image: Path | None = None
    completed_mask: Path | None = None


@dataclass
class SceneManifest:
    root: Path
    panorama: Path
    camera: dict | None = None
    depth: Path | None = None
    sky_mask: Path | None = None
    layers: list = field(default_factory=list)
    providers: dict = field(default_factory=dict)
    placements: list = field(default_factory=list)
    output: dict = field(default_factory=dict)
    name: str = "manifest"

    def settings(self, overrides: dict | None = None) -> dict:
        """Flags > manifest > defaults."""
        s = dict(DEFAULTS)
        s.update({k: v for k, v in self.output.items() if k in DEFAULTS})
        s.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return s


class _Stage:
    """Context manager re-raising toolkit, value and OS errors as StageError."""

    def __init__(self, stage, layer):
        self.stage, self.layer = stage, layer

    def __enter__(self):
        return self

    def __exit__(self, tp, exc, tb):
        if exc is None or isinstance(exc, StageError):
            return False
        if isinstance(exc, (WorldKitError, ValueError, OSError)):
            raise StageError(self.stage, self.layer, exc) from exc
        return False


def _stage(stage, layer=None):
    return _Stage(stage, layer)


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    with _stage("manifest"):
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise InvalidArgument(f"{path.name}:{e.lineno}: {e.msg}") from e
        if not isinstance(doc, dict) or "panorama" not in doc:
            raise InvalidArgument("manifest needs a 'panorama' entry")
    root = path.parent

    def ref(v, what, layer=None):
        if v is None:
            return None
        p = root / v
        if not p.exists():
            raise StageError("manifest", layer, InvalidArgument(f"{what} file {v!r} not found"))
        return p

    layers, fg_seen = [], 0
    for k, entry in enumerate(doc.get("layers", []) or []):
        kind = entry.get("kind")
        if kind not in (FOREGROUND, BACKGROUND, SKY):
            raise StageError("manifest", f"layers[{k}]", InvalidArgument(f"unknown layer kind {kind!r}"))
        if kind == FOREGROUND:
            order = int(entry.get("order", fg_seen))
            name = f"fg_{order:02d}"
            fg_seen += 1
        else:
            order, name = None, kind
        if "image" not in entry:
            raise StageError("manifest", name, InvalidArgument("layer has no image"))
        if kind != SKY and not entry.get("depth"):
            raise StageError("manifest", name, InvalidArgument("layer has no depth map"))
        layers.append(LayerSpec(kind, ref(entry["image"], "image", name), ref(entry.get("mask"), "mask", name),
                                ref(entry.get("depth"), "depth", name), order,
                                ref(entry.get("completed_image"), "completed image", name),
                                ref(entry.get("completed_mask"), "completed mask", name)))
    if layers:
        kinds = [l.kind for l in layers]
        if kinds.count(BACKGROUND) != 1:
            raise StageError("manifest", None, InvalidArgument(
                f"exactly one background layer required, found {kinds.count(BACKGROUND)}"))
        if kinds.count(SKY) > 1:
            raise StageError("manifest", None, InvalidArgument("more than one sky layer"))
        orders = sorted(l.order for l in layers if l.kind == FOREGROUND)
        if orders != list(range(len(orders))):
            raise StageError("manifest", None, InvalidArgument(f"foreground orders must be 0..n-1, got {orders}"))
    out = doc.get("output", {}) or {}
    unknown = sorted(set(out) - set(DEFAULTS))
    if unknown:
        raise StageError("manifest", None, InvalidArgument(f"unknown output settings {unknown}"))
    return SceneManifest(root, ref(doc["panorama"], "panorama"), doc.get("camera"),
                         ref(doc.get("depth"), "depth"), ref(doc.get("sky_mask"), "sky mask"),
                         layers, doc.get("providers", {}) or {}, doc.get("placements", []) or [], out,
                         path.stem)


def _read_layer_depth(path, shape, name):
    d, valid = imageio.read_depth(path)
    if d.shape != shape:
        raise StageError("load", name, InvalidArgument(
            f"depth is {d.shape[1]}x{d.shape[0]}, panorama is {shape[1]}x{shape[0]}"))
    return DepthMap(d, valid.astype(np.float64))


def _read_raster(reader, path, shape, name, what):
    a = reader(path)
    if a.shape[:2] != shape:
        raise StageError("load", name, InvalidArgument(
            f"{what} is {a.shape[1]}x{a.shape[0]}, panorama is {shape[1]}x{shape[0]}"))
    return a


def _load_panorama(m: SceneManifest):
    with _stage("load", "panorama"):
        img = imageio.read_color(m.panorama)[..., :3]
        validity = None
        if m.camera:
            c = m.camera
            W = int(c.get("erp_width", 2048))
            h, w = img.shape[:2]
            if "fx" in c:
                cam = PinholeCamera(float(c["fx"]), float(c.get("fy", c["fx"])),
                                    float(c.get("cx", w / 2)), float(c.get("cy", h / 2)))
            else:
                cam = PinholeCamera.from_fov(float(c.get("fov", 90.0)), w, h,
                                             float(c.get("yaw", 0.0)), float(c.get("pitch", 0.0)))
            img, validity = pinhole_to_erp(img, cam, W, W // 2)
        if img.shape[1] != 2 * img.shape[0]:
            raise InvalidArgument(f"panorama must be 2:1, got {img.shape[1]}x{img.shape[0]}")
    return img, validity


def build_stack(m: SceneManifest, pano, validity, workdir=None):
    """Layer stack from manifest layers, or from providers when none are listed."""
    shape = pano.shape[:2]
    base = None
    if m.depth is not None:
        with _stage("load", "base depth"):
            base = _read_layer_depth(m.depth, shape, "base depth")
    sky_mask = None
    if m.sky_mask is not None:
        with _stage("load", SKY):
            sky_mask = _read_raster(imageio.read_mask, m.sky_mask, shape, SKY, "sky mask")

    if m.layers:
        layers = []
        for spec in m.layers:
            name = f"fg_{spec.order:02d}" if spec.kind == FOREGROUND else spec.kind
            with _stage("load", name):
                src = spec.completed_image or spec.image
                img = _read_raster(imageio.read_color, src, shape, name, "image")[..., :3]
                if spec.mask is not None:
                    mask = _read_raster(imageio.read_mask, spec.mask, shape, name, "mask")
                elif spec.kind == SKY and sky_mask is not None:
                    mask = sky_mask
                elif spec.kind == BACKGROUND and sky_mask is not None:
                    mask = 1.0 - sky_mask
                else:
                    mask = np.ones(shape)
                if validity is not None and spec.kind != SKY:
                    mask = mask * validity
                completed = None
                if spec.completed_mask is not None:
                    completed = _read_raster(imageio.read_mask, spec.completed_mask, shape, name,
                                             "completed mask") > 0
                depth = _read_layer_depth(spec.depth, shape, name) if spec.depth else None
            layers.append(Layer(spec.kind, spec.order if spec.kind == FOREGROUND else 0,
                                img, mask, depth, completed=completed))
        fg = [l for l in layers if l.kind == FOREGROUND]
        bg = [l for l in layers if l.kind == BACKGROUND]
        sky = [l for l in layers if l.kind == SKY]
        bg[0].order = len(fg)
        for s in sky:
            s.order = len(fg) + 1
        stack = LayerStack(pano, sorted(fg, key=lambda l: l.order) + bg + sky)
    else:
        stack = _provider_stack(m, pano, base, sky_mask, workdir)
    with _stage("manifest"):
        stack.validate()
    return stack, base


def _provider_stack(m, pano, base, sky_mask, workdir):
    if base is None:
        raise StageError("manifest", None, InvalidArgument(
            "without pre-decomposed layers the manifest must give a base depth"))
    cfg = m.providers
    detect = providers.provider_from_config(cfg.get("detect"))
    segment = providers.provider_from_config(cfg.get("segment"))
    instances = []
    if detect is not None and segment is not None:
        with _stage("detect"):
            instances = layering.detect_instances(pano, cfg.get("labels", []), detect, segment,
                                                  workdir=workdir)
    groups = []
    if instances:
        with _stage("sublayers"):
            k = min(int(cfg.get("sublayers", 2)), len(instances))
            groups = layering.group_by_order(instances, layering.assign_sublayers(instances, base, k))
    with _stage("peel"):
        stack = layering.onion_peel(pano, groups, providers.provider_from_config(cfg.get("complete")),
                                    providers.provider_from_config(cfg.get("sky_complete")),
                                    sky_mask, workdir)
    # layer depths come from the base map; revealed background is filled in disparity
    disp = np.where(base.valid, 1.0 / np.where(base.valid, base.depth, 1.0), 0.0)
    for layer in stack.layers:
        if layer.kind == FOREGROUND:
            sel = (np.asarray(layer.mask) > 0) & base.valid
            layer.depth = DepthMap(np.where(sel, base.depth, 0.0), sel.astype(np.float64))
        elif layer.kind == BACKGROUND:
            hole = ~base.valid | layer.completed
            need = np.asarray(layer.mask) > 0
            filled = layering.neighbor_fill(disp, hole, smooth_iters=32)
            ok = need & (filled > 0)
            layer.depth = DepthMap(np.where(ok, 1.0 / np.where(ok, filled, 1.0), 0.0),
                                   ok.astype(np.float64))
            layer.flags.append("depth-from-base")
    return stack


def _identity_report(d: DepthMap):
    n = int(d.valid.sum())
    return AlignmentReport(n, 0.0, 0, n)


def align_layers(stack: LayerStack, base: DepthMap | None, feather: float):
    """Align every non-sky layer to the base depth (or to the background).

    Returns ``{name: (transform, report, is_reference)}`` and replaces each
    layer's depth by its aligned version.
    """
    results = {}
    bg = stack.get(BACKGROUND)
    ref = base
    if ref is None:
        results[bg.name] = (AffineDepthTransform(), _identity_report(bg.depth), True)
        ref = bg.depth
    for layer in stack.layers:
        if layer.kind == SKY or layer.name in results:
            continue
        with _stage("align", layer.name):
            ov = overlap_mask(layer, ref.validity, feather)
            t, rep = estimate_affine_alignment(layer.depth, ref, ov)
            aligned = apply_affine(layer.depth, t)
            rep.invalidated = int(layer.depth.valid.sum() - aligned.valid.sum())
            layer.depth = aligned
        results[layer.name] = (t, rep, False)
    return results


def _seam_closed(mesh) -> bool:
    if mesh.grid_ij is None or not mesh.n_vertices:
        return True
    sel = np.flatnonzero(mesh.grid_ij[:, 0] == 0)
    keys = mesh.grid_ij[sel, 1]
    order = np.argsort(keys, kind="stable")
    k, idx = keys[order], sel[order]
    pair = np.flatnonzero(k[1:] == k[:-1])
    return bool(np.all(mesh.positions[idx[pair]] == mesh.positions[idx[pair + 1]]))


def _round(x, nd=9):
    return float(round(float(x), nd))


@dataclass
class ReconstructResult:
    world: LayeredWorldMesh
    textures: dict
    glb: bytes
    lwc: bytes
    report: dict


def reconstruct(m: SceneManifest, overrides: dict | None = None, workdir=None) -> ReconstructResult:
    s = m.settings(overrides)
    workers = worker_count(s["workers"])
    pano, validity = _load_panorama(m)
    H, W = pano.shape[:2]
    stack, base = build_stack(m, pano, validity, workdir)
    align = align_layers(stack, base, float(s["feather"]))

    compress_info = {}
    for layer in stack.layers:
        if layer.kind == SKY:
            continue
        with _stage("depth", layer.name):
            d = layer.depth
            if layer.kind == BACKGROUND:
                knee = float(np.percentile(d.depth[d.valid], float(s["compress_q"])))
                d = adaptive_compress(d, float(s["compress_q"]), float(s["compress_slope"]))
                compress_info[layer.name] = knee
            layer.depth = polar_smooth(d, float(s["polar_lat"]))

    mesh_layers = sorted((l for l in stack.layers if l.kind != SKY),
                         key=lambda l: (l.kind == BACKGROUND, l.order))

    def warp(layer, stride):
        with _stage("warp", layer.name):
            return warp_layer(layer.image, layer.depth, layer.mask, stride, float(s["tear_ratio"]),
                              float(s["feather"]), layer_id=layer.order, texture_ref=layer.name)

    stride = int(s["stride"])
    with ThreadPoolExecutor(workers) as ex:
        meshes = list(ex.map(lambda l: warp(l, stride), mesh_layers))

    sky_layer = stack.get(SKY)
    sky_mesh, sky_r = None, None
    if sky_layer is not None:
        with _stage("sky", SKY):
            sky_r = sky_depth([l.depth for l in mesh_layers], float(s["kappa"]))
            sky_mesh = build_sky_dome(sky_layer.image, sky_r, stride, layer_id=len(mesh_layers),
                                      texture_ref=SKY)

    placements = []
    for k, p in enumerate(m.placements):
        lname = p.get("layer")
        with _stage("place", lname):
            layer = next((l for l in mesh_layers if l.name == lname), None)
            if layer is None:
                raise InvalidArgument(f"placement {k} refers to unknown layer {lname!r}")
            t = place_object(layer.mask, layer.depth, p.get("extent", [1.0, 1.0, 1.0]))
            t.name, t.asset = p.get("name", f"{lname}_asset"), p.get("asset")
            placements.append(t)

    with _stage("assemble"):
        world = assemble_world(stack, meshes, sky_mesh, placements, strict=bool(s["strict"]))
    seam_ok = all(_seam_closed(x) for x in meshes + ([sky_mesh] if sky_mesh is not None else []))

    raw_meshes = list(world.layers) + ([world.sky] if world.sky is not None else [])
    warp_bytes = sum(len(export_ply(x)) for x in raw_meshes)
    if s["raw_baseline"] and stride > 1:
        by_name = {l.name: l for l in mesh_layers}
        with ThreadPoolExecutor(workers) as ex:
            full = list(ex.map(lambda n: warp(by_name[n], 1), world.names))
        if sky_mesh is not None:
            full.append(build_sky_dome(sky_layer.image, sky_r, 1, texture_ref=SKY))
        raw_bytes = sum(len(export_ply(x)) for x in full)
        del full
    else:
        raw_bytes = warp_bytes

    ratio = s["decimate"]
    if ratio is not None and 0 < float(ratio) < 1:
        def dec(item):
            name, mesh = item
            with _stage("decimate", name):
                return decimate_qem(mesh, float(ratio), preserve=("seam",))
        items = list(zip(world.names, world.layers)) + ([(SKY, world.sky)] if world.sky is not None else [])
        with ThreadPoolExecutor(workers) as ex:
            out = list(ex.map(dec, items))
        final = LayeredWorldMesh(out[:len(world.layers)], list(world.names),
                                 out[-1] if world.sky is not None else None,
                                 world.placements, list(world.warnings))
    else:
        final = world

    textures = {l.name: l.image for l in stack.layers}
    with _stage("export"):
        glb = export_gltf(final, textures)
        lwc = encode_world(final, int(s["pos_bits"]), int(s["uv_bits"]))
    final_meshes = list(final.layers) + ([final.sky] if final.sky is not None else [])
    dec_bytes = sum(len(export_ply(x)) for x in final_meshes)

    layer_reports = []
    for layer, mesh in zip(mesh_layers, meshes):
        entry = {"name": layer.name, "kind": layer.kind, "flags": list(layer.flags)}
        t, rep, is_ref = align[layer.name]
        entry["alignment"] = {"a": _round(t.a, 12), "b": _round(t.b, 12), "space": t.space,
                              "reference": is_ref, **json.loads(rep.to_json())}
        entry["alignment"]["rms_residual"] = _round(entry["alignment"]["rms_residual"], 12)
        if layer.name in compress_info:
            entry["compression_knee"] = _round(compress_info[layer.name])
        entry["mesh"] = {"vertices": mesh.n_vertices, "triangles": mesh.n_triangles}
        if layer.name in final.names:
            fm = final.layers[final.names.index(layer.name)]
            entry["decimated"] = {"vertices": fm.n_vertices, "triangles": fm.n_triangles}
        else:
            entry["skipped"] = True
        layer_reports.append(entry)
    report = {
        "manifest": m.name,
        "panorama": {"width": W, "height": H},
        "settings": {k: s[k] for k in sorted(s) if k != "workers"},
        "layers": layer_reports,
        "sky": None if sky_mesh is None else {
            "radius": _round(sky_r), "vertices": sky_mesh.n_vertices, "triangles": sky_mesh.n_triangles},
        "placements": [{"name": p.name, "asset": p.asset,
                        "translation": [_round(x) for x in p.translation],
                        "scale": _round(p.uniform_scale), "yaw": _round(p.yaw)} for p in placements],
        "sizes": {"raw_ply_bytes": raw_bytes, "warp_ply_bytes": warp_bytes,
                  "decimated_ply_bytes": dec_bytes, "lwc_bytes": len(lwc), "glb_bytes": len(glb)},
        "ratios": {"decimation_vs_raw": _round(1 - dec_bytes / raw_bytes),
                   "decimation_vs_warp": _round(1 - dec_bytes / warp_bytes),
                   "lwc_vs_raw": _round(1 - len(lwc) / raw_bytes),
                   "lwc_vs_warp": _round(1 - len(lwc) / warp_bytes)},
        "validation": {"ok": not world.warnings, "seam_closed": seam_ok,
                       "warnings": list(world.warnings)},
    }
    return ReconstructResult(final, textures, glb, lwc, report)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def write_outputs(out_dir, files: dict) -> None:
    """Write ``files`` ({name: bytes}) into ``out_dir`` via a staging directory.

    Nothing appears in ``out_dir`` unless every file was written.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.staging-", dir=out_dir.parent))
    try:
        for name, data in files.items():
            (staging / name).write_bytes(data)
        if not out_dir.exists():
            os.replace(staging, out_dir)
            return
        for name in files:
            os.replace(staging / name, out_dir / name)
    finally:
        if staging.exists():
            shutil.rmtree(staging, ignore_errors=True)


def cmd_reconstruct(manifest_path, out_dir, overrides: dict | None = None) -> dict:
    m = load_manifest(manifest_path)
    staging_parent = Path(out_dir).resolve().parent
    staging_parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(dir=staging_parent) as work:
        res = reconstruct(m, overrides, workdir=work)
    write_outputs(out_dir, {"world.glb": res.glb, "world.lwc": res.lwc,
                            "report.json": report_json(res.report).encode()})
    return res.report
