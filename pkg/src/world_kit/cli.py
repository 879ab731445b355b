"""Command-line entry point: ``world-kit <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import imageio, pipeline, world_cache
from .depth import DepthMap, apply_affine, estimate_affine_alignment, overlap_mask
from .erp import pinhole_to_erp
from .errors import InvalidArgument, WorldKitError
from .layering import Layer
from .mesh.codec import encode_compact
from .mesh.decimate import decimate_qem
from .mesh.export import export_gltf, export_ply, load_glb, parse_ply
from .metrics import psnr, seam_score
from .render import get_preset, render_panorama, render_world
from .sheet_warp import LayeredWorldMesh, warp_layer

log = logging.getLogger("world_kit")


def _json_out(doc, path):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _read_camera(path):
    p = Path(path)
    return world_cache.parse_camera(p.read_text(), p.name)


def _depth_map(path):
    d, valid = imageio.read_depth(path)
    return DepthMap(d, valid.astype(np.float64))


def cmd_reconstruct(args):
    overrides = {"stride": args.stride, "tear_ratio": args.tear_ratio, "kappa": args.kappa,
                 "decimate": args.decimate, "pos_bits": args.pos_bits, "uv_bits": args.uv_bits,
                 "workers": args.workers}
    report = pipeline.cmd_reconstruct(args.manifest, args.output, overrides)
    r = report["ratios"]
    print(f"wrote {args.output}: decimation {r['decimation_vs_raw']:.1%}, "
          f"compact {r['lwc_vs_raw']:.1%} smaller than raw PLY")


def cmd_render_views(args):
    preset = get_preset(args.preset)
    src = Path(args.input)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    cams = preset.cameras(position=args.position, elevation=args.elevation)
    res = preset.resolution
    if src.suffix.lower() == ".glb":
        layers, _ = load_glb(src.read_bytes())
        pairs = [(m, tex) for _, m, tex in layers]

        def render(cam):
            return render_world(pairs, cam, res, res)[0]
    else:
        pano = imageio.read_color(src)[..., :3]

        def render(cam):
            return render_panorama(pano, cam, res, res)
    views = []
    for az, cam in zip(preset.azimuths, cams):
        name = f"view_{int(az):03d}.png"
        imageio.write_color(out / name, render(cam))
        views.append({"file": name, "azimuth": az, "elevation": args.elevation, "fov": preset.fov,
                      "width": res, "height": res})
    _json_out({"preset": preset.name, "input": src.name, "views": views}, out / "views.json")
    print(f"wrote {len(views)} views to {out}")


def cmd_project_pinhole(args):
    cam, w, h = _read_camera(args.camera)
    img = imageio.read_color(args.image)[..., :3]
    if img.shape[:2] != (h, w):
        raise InvalidArgument(f"image is {img.shape[1]}x{img.shape[0]}, camera expects {w}x{h}")
    erp, valid = pinhole_to_erp(img, cam, args.width, args.width // 2)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    imageio.write_color(out / "partial.png", erp, bits=16)
    imageio.write_mask(out / "validity.png", valid)
    print(f"wrote {out / 'partial.png'} ({int(valid.sum())} valid pixels)")


def cmd_align_depth(args):
    layer_d = _depth_map(args.layer_depth)
    base = _depth_map(args.base_depth)
    completed = imageio.read_mask(args.completed) > 0 if args.completed else None
    layer = Layer("foreground", 0, np.zeros(layer_d.shape + (3,)), np.ones(layer_d.shape),
                  layer_d, completed=completed)
    ov = overlap_mask(layer, base.validity, args.feather)
    t, rep = estimate_affine_alignment(layer_d, base, ov)
    aligned = apply_affine(layer_d, t)
    rep.invalidated = int(layer_d.valid.sum() - aligned.valid.sum())
    if args.output:
        imageio.write_depth(args.output, aligned.depth, aligned.valid)
    doc = {"a": t.a, "b": t.b, "space": t.space, **json.loads(rep.to_json())}
    _json_out(doc, args.report)


def cmd_warp(args):
    depth = _depth_map(args.depth)
    img = imageio.read_color(args.image)[..., :3] if args.image else None
    mask = imageio.read_mask(args.mask) if args.mask else None
    mesh = warp_layer(img, depth, mask, args.stride, args.tear_ratio, args.feather,
                      texture_ref=args.name)
    Path(args.output).write_bytes(export_ply(mesh))
    if args.glb:
        if img is None:
            raise InvalidArgument("--glb needs --image for the texture")
        world = LayeredWorldMesh([mesh], [args.name])
        Path(args.glb).write_bytes(export_gltf(world, {args.name: img}))
    print(f"{mesh.n_vertices} vertices, {mesh.n_triangles} triangles")


def infer_seam(mesh):
    """Flag vertices whose position is shared with another vertex."""
    _, inv, counts = np.unique(mesh.positions, axis=0, return_inverse=True, return_counts=True)
    return counts[inv.ravel()] > 1


def cmd_optimize(args):
    raw = Path(args.input).read_bytes()
    mesh = parse_ply(raw)
    mesh.seam = infer_seam(mesh)
    preserve = ["seam"] + (["boundary"] if args.pin_boundary else [])
    out = decimate_qem(mesh, args.ratio, preserve) if args.ratio < 1 else mesh
    ply = export_ply(out)
    if args.output:
        Path(args.output).write_bytes(ply)
    doc = {"input_triangles": mesh.n_triangles, "output_triangles": out.n_triangles,
           "input_bytes": len(raw), "output_ply_bytes": len(ply)}
    if args.lwc:
        blob = encode_compact(out, args.pos_bits, args.uv_bits, Path(args.input).stem)
        Path(args.lwc).write_bytes(blob)
        doc["lwc_bytes"] = len(blob)
        doc["lwc_ratio"] = 1 - len(blob) / len(raw)
    doc["ply_ratio"] = 1 - len(ply) / len(raw)
    _json_out(doc, args.report)


def _frame(args):
    cam, w, h = _read_camera(args.camera)
    color = imageio.read_color(args.color)[..., :3]
    depth, valid = imageio.read_depth(args.depth)
    if args.validity:
        valid = valid & (imageio.read_mask(args.validity) > 0)
    if color.shape[:2] != (h, w) or depth.shape != (h, w):
        raise InvalidArgument(f"color/depth must be {w}x{h} to match the camera")
    return world_cache.GuidanceFrame(color, depth, valid.astype(np.float64), cam)


def cmd_cache(args):
    sub = args.cache_cmd
    if sub == "init":
        c = world_cache.init_cache(_frame(args), cell=args.cell)
        Path(args.output).write_bytes(world_cache.cache_to_ply(c))
        print(f"{len(c)} points")
    elif sub == "add":
        c = world_cache.cache_from_ply(Path(args.cache).read_bytes())
        n0 = len(c)
        fid = c.last_frame_id + 1 if args.frame_id is None else args.frame_id
        world_cache.add_frame(c, _frame(args), fid)
        Path(args.output or args.cache).write_bytes(world_cache.cache_to_ply(c))
        print(f"{len(c) - n0} points added, {len(c)} total")
    elif sub == "cull":
        c = world_cache.cache_from_ply(Path(args.cache).read_bytes())
        out = world_cache.cull(c, args.voxel)
        Path(args.output or args.cache).write_bytes(world_cache.cache_to_ply(out))
        print(f"{len(c)} -> {len(out)} points")
    elif sub == "project":
        c = world_cache.cache_from_ply(Path(args.cache).read_bytes())
        cam, w, h = _read_camera(args.camera)
        g = world_cache.project(c, cam, w, h, args.splat)
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        imageio.write_color(out / "color.png", g.color)
        imageio.write_depth(out / "depth.pfm", g.depth, g.valid)
        imageio.write_mask(out / "validity.png", g.validity)
        print(f"{int(g.valid.sum())} valid pixels")
    elif sub == "sample":
        p = Path(args.trajectory)
        traj = world_cache.parse_trajectory(p.read_text(), p.name)
        clips = world_cache.smooth_sample(len(traj), args.clip_len, args.overlap)
        _json_out({"frames": len(traj), "clip_len": args.clip_len, "overlap": args.overlap,
                   "clips": [list(c) for c in clips]}, args.output)


def cmd_metrics(args):
    rdir, fdir = Path(args.rendered), Path(args.reference)
    names = sorted(p.name for p in rdir.glob("*.png"))
    ref_names = sorted(p.name for p in fdir.glob("*.png"))
    if not names:
        raise InvalidArgument(f"no PNG images in {rdir}")
    if names != ref_names:
        raise InvalidArgument(f"image sets differ: {sorted(set(names) ^ set(ref_names))}")
    views = {}
    for n in names:
        a = imageio.read_encoded(rdir / n)
        b = imageio.read_encoded(fdir / n)
        if a.shape != b.shape:
            raise InvalidArgument(f"{n}: dimension mismatch {a.shape} vs {b.shape}")
        views[n] = psnr(a, b)
    doc = {"views": views, "mean_psnr": float(np.mean(list(views.values())))}
    if args.panorama:
        doc["seam_score"] = seam_score(imageio.read_encoded(args.panorama))
    _json_out(doc, args.output)


def build_parser():
    p = argparse.ArgumentParser(prog="world-kit", description="Layered panorama-to-mesh world toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="run the full pipeline on a manifest")
    r.add_argument("manifest")
    r.add_argument("-o", "--output", required=True, help="output directory")
    r.add_argument("--stride", type=int)
    r.add_argument("--tear-ratio", type=float)
    r.add_argument("--kappa", type=float)
    r.add_argument("--decimate", type=float, help="target triangle ratio")
    r.add_argument("--pos-bits", type=int)
    r.add_argument("--uv-bits", type=int)
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_reconstruct)

    v = sub.add_parser("render-views", help="render evaluation views of a panorama or GLB world")
    v.add_argument("--preset", required=True, help="text-eval or image-eval")
    v.add_argument("--input", required=True, help="panorama PNG or world GLB")
    v.add_argument("-o", "--output", required=True)
    v.add_argument("--position", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    v.add_argument("--elevation", type=float, default=0.0)
    v.set_defaults(func=cmd_render_views)

    j = sub.add_parser("project-pinhole", help="unproject a pinhole image onto the panorama")
    j.add_argument("image")
    j.add_argument("--camera", required=True, help="camera JSON")
    j.add_argument("--width", type=int, default=2048, help="panorama width")
    j.add_argument("-o", "--output", required=True)
    j.set_defaults(func=cmd_project_pinhole)

    a = sub.add_parser("align-depth", help="affine-align a layer depth to a base depth")
    a.add_argument("--layer-depth", required=True)
    a.add_argument("--base-depth", required=True)
    a.add_argument("--completed", help="mask of inpainted pixels to exclude")
    a.add_argument("--feather", type=float, default=2.0)
    a.add_argument("-o", "--output", help="aligned depth PFM")
    a.add_argument("--report")
    a.set_defaults(func=cmd_align_depth)

    w = sub.add_parser("warp", help="sheet-warp one layer into a mesh")
    w.add_argument("--depth", required=True)
    w.add_argument("--image")
    w.add_argument("--mask")
    w.add_argument("--stride", type=int, default=2)
    w.add_argument("--tear-ratio", type=float, default=1.3)
    w.add_argument("--feather", type=float, default=2.0)
    w.add_argument("--name", default="background")
    w.add_argument("-o", "--output", required=True, help="PLY path")
    w.add_argument("--glb")
    w.set_defaults(func=cmd_warp)

    o = sub.add_parser("optimize", help="decimate and/or compact-encode a PLY mesh")
    o.add_argument("input")
    o.add_argument("--ratio", type=float, default=0.2)
    o.add_argument("--pin-boundary", action="store_true")
    o.add_argument("-o", "--output")
    o.add_argument("--lwc")
    o.add_argument("--pos-bits", type=int, default=14)
    o.add_argument("--uv-bits", type=int, default=12)
    o.add_argument("--report")
    o.set_defaults(func=cmd_optimize)

    c = sub.add_parser("cache", help="world cache operations")
    cs = c.add_subparsers(dest="cache_cmd", required=True)
    for name in ("init", "add"):
        x = cs.add_parser(name)
        x.add_argument("--color", required=True)
        x.add_argument("--depth", required=True, help="z-depth PFM")
        x.add_argument("--validity")
        x.add_argument("--camera", required=True)
        if name == "init":
            x.add_argument("--cell", type=float, default=0.05)
            x.add_argument("-o", "--output", required=True)
        else:
            x.add_argument("--cache", required=True)
            x.add_argument("--frame-id", type=int)
            x.add_argument("-o", "--output")
    x = cs.add_parser("cull")
    x.add_argument("--cache", required=True)
    x.add_argument("--voxel", type=float, required=True)
    x.add_argument("-o", "--output")
    x = cs.add_parser("project")
    x.add_argument("--cache", required=True)
    x.add_argument("--camera", required=True)
    x.add_argument("--splat", type=int, default=1)
    x.add_argument("-o", "--output", required=True)
    x = cs.add_parser("sample")
    x.add_argument("--trajectory", required=True)
    x.add_argument("--clip-len", type=int, required=True)
    x.add_argument("--overlap", type=int, required=True)
    x.add_argument("-o", "--output")
    c.set_defaults(func=cmd_cache)

    m = sub.add_parser("metrics", help="PSNR and seam metrics between image sets")
    m.add_argument("--rendered", required=True)
    m.add_argument("--reference", required=True)
    m.add_argument("--panorama", help="stitched panorama for the seam score")
    m.add_argument("-o", "--output")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (WorldKitError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
