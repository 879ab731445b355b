"""Synthetic scenes with analytic geometry, used by the tests and the demo
manifests: a constant-depth sphere and an open-top textured room with two
boxes under a procedural sky."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imageio
from .erp import PinholeCamera, erp_pixel_to_dir

# room interior: x in [-X, X], z in [-Z, Z], floor at Y0, walls up to Y1
ROOM = dict(X=4.0, Z=5.0, Y0=-1.6, Y1=1.8)
BOXES = (
    # (center, half extents)
    (np.array([-2.0, -1.2, 1.2]), np.array([0.7, 0.4, 0.5])),
    (np.array([1.4, -1.1, -2.4]), np.array([0.6, 0.5, 0.6])),
)
# disparity distortion (a, b) applied to each layer's "predicted" depth:
# a * disparity_pred + b == disparity_true
LAYER_DISTORTION = {"fg_00": (1.25, 0.02), "fg_01": (0.8, -0.01), "background": (1.1, 0.03)}

SKY, FLOOR, WALL, BOX0 = 0, 1, 2, 3


def smooth_texture(H: int, W: int) -> np.ndarray:
    """Low-frequency periodic color field on the ERP lattice (linear RGB)."""
    v, u = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    lon = 2 * np.pi * u / W
    lat = np.pi / 2 - np.pi * v / H
    return np.stack([0.5 + 0.35 * np.sin(3 * lon) * np.cos(lat),
                     0.5 + 0.3 * np.cos(2 * lat + lon),
                     0.45 + 0.3 * np.sin(4 * lat) * np.cos(2 * lon)], axis=-1)


def sphere_fixture(W: int = 512, H: int = 256, radius: float = 3.0):
    """(panorama, depth, mask) of a textured sphere of constant radius."""
    return smooth_texture(H, W), np.full((H, W), float(radius)), np.ones((H, W))


def _sky_color(d):
    up = np.clip(d[..., 1], -1.0, 1.0)
    lon = np.arctan2(d[..., 0], -d[..., 2])
    band = 0.06 * np.sin(5 * lon + 8 * up) * np.cos(3 * up)
    return np.stack([0.35 + 0.25 * up + band, 0.55 + 0.2 * up + band, 0.85 + 0.1 * up - band], axis=-1)


def _surface_color(kind, p, n_box=None):
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    if kind == FLOOR:
        c = 0.5 + 0.5 * np.sin(np.pi * x) * np.sin(np.pi * z)
        return np.stack([0.25 + 0.35 * c, 0.2 + 0.25 * c, 0.15 + 0.15 * c], axis=-1)
    if kind == WALL:
        s = 0.5 + 0.5 * np.sin(2.0 * (x + z)) * np.cos(1.5 * y)
        return np.stack([0.55 + 0.3 * s, 0.5 + 0.2 * s, 0.4 + 0.1 * s], axis=-1)
    k = 0 if n_box is None else n_box
    base = np.array([[0.7, 0.15, 0.1], [0.1, 0.35, 0.7]])[k % 2]
    s = 0.5 + 0.5 * np.sin(4 * x) * np.sin(4 * y) * np.sin(4 * z)
    return base * (0.6 + 0.4 * s[..., None])


def _box_hit(o, d, center, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (center - half - o) * inv
        t1 = (center + half - o) * inv
    tn = np.nanmax(np.minimum(t0, t1), axis=-1)
    tf = np.nanmin(np.maximum(t0, t1), axis=-1)
    hit = (tf >= tn) & (tn > 1e-9)
    return np.where(hit, tn, np.inf)


def cast_rays(o, d, boxes: bool = True):
    """Trace rays from points ``o`` along unit directions ``d`` inside the room.

    Returns ``(t, surface, color)``; ``t`` is inf and ``surface`` SKY where
    the ray leaves through the open top.
    """
    d = np.asarray(d, np.float64)
    o = np.broadcast_to(np.asarray(o, np.float64), d.shape)
    hi = np.array([ROOM["X"], ROOM["Y1"], ROOM["Z"]])
    lo = np.array([-ROOM["X"], ROOM["Y0"], -ROOM["Z"]])
    with np.errstate(divide="ignore", invalid="ignore"):
        texit = np.where(d > 0, (hi - o) / d, np.where(d < 0, (lo - o) / d, np.inf))
    axis = np.argmin(texit, axis=-1)
    t = np.take_along_axis(texit, axis[..., None], -1)[..., 0]
    surface = np.where(axis == 1, np.where(d[..., 1] < 0, FLOOR, SKY), WALL)
    if boxes:
        for k, (c, h) in enumerate(BOXES):
            tb = _box_hit(o, d, c, h)
            closer = tb < np.where(surface == SKY, np.inf, t)
            t = np.where(closer, tb, t)
            surface = np.where(closer, BOX0 + k, surface)
    t = np.where(surface == SKY, np.inf, t)
    p = o + d * np.where(np.isfinite(t), t, 0.0)[..., None]
    color = _sky_color(d)
    for kind in (FLOOR, WALL):
        sel = surface == kind
        color[sel] = _surface_color(kind, p[sel])
    for k in range(len(BOXES)):
        sel = surface == BOX0 + k
        color[sel] = _surface_color(BOX0, p[sel], k)
    return t, surface, color


@dataclass
class RoomPanorama:
    panorama: np.ndarray
    depth: np.ndarray           # true radial depth, 0 on sky
    surface: np.ndarray
    background: np.ndarray      # room without boxes (completion oracle)
    background_depth: np.ndarray
    sky: np.ndarray             # sky colour everywhere
    layers: dict = field(default_factory=dict)   # name -> (mask, predicted depth)


def room_panorama(W: int = 512, H: int = 256) -> RoomPanorama:
    """Render the room from its origin; box k (nearest first) becomes layer fg_0k."""
    uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d = erp_pixel_to_dir(uu, vv, W, H)
    t, surf, col = cast_rays(np.zeros(3), d, boxes=True)
    tb, surf_b, col_b = cast_rays(np.zeros(3), d, boxes=False)
    depth = np.where(np.isfinite(t), t, 0.0)
    bdepth = np.where(np.isfinite(tb), tb, 0.0)
    room = RoomPanorama(col, depth, surf, col_b, bdepth, _sky_color(d))
    for k in range(len(BOXES)):
        mask = (surf == BOX0 + k).astype(np.float64)
        name = f"fg_{k:02d}"
        room.layers[name] = (mask, distort_depth(np.where(mask > 0, depth, 0.0), *LAYER_DISTORTION[name]))
    room.layers["background"] = ((surf_b != SKY).astype(np.float64),
                                 distort_depth(bdepth, *LAYER_DISTORTION["background"]))
    return room


def distort_depth(depth, a, b):
    """Depth whose disparity x satisfies a*x + b = true disparity (0 stays invalid)."""
    depth = np.asarray(depth, np.float64)
    out = np.zeros_like(depth)
    ok = depth > 0
    out[ok] = a / (1.0 / depth[ok] - b)
    return out


def room_view(cam: PinholeCamera, w: int, h: int, boxes: bool = True):
    """Pinhole RGB-D of the room: ``(color, z_depth, validity)``; sky is invalid."""
    rays = cam.pixel_rays(w, h)
    norm = np.linalg.norm(rays, axis=-1)
    d = (rays / norm[..., None]) @ cam.rotation.T
    t, surf, col = cast_rays(cam.translation, d, boxes)
    valid = np.isfinite(t)
    z = np.where(valid, t / np.where(valid, norm, 1.0), 0.0)
    return col, z, valid.astype(np.float64)


def write_room_manifest(root, W: int = 512, H: int = 256, **output) -> Path:
    """Write the room's layered inputs and a manifest; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    room = room_panorama(W, H)
    imageio.write_color(root / "panorama.png", room.panorama, bits=16)
    imageio.write_depth(root / "base_depth.pfm", room.depth)
    sky_mask = (room.surface == SKY).astype(np.float64)
    imageio.write_mask(root / "sky_mask.png", sky_mask)
    imageio.write_color(root / "sky.png", room.sky, bits=16)
    layers = []
    for name, (mask, pred) in room.layers.items():
        imageio.write_mask(root / f"{name}_mask.png", mask)
        imageio.write_depth(root / f"{name}_depth.pfm", pred)
        if name == "background":
            imageio.write_color(root / "background.png", room.background, bits=16)
            boxes = (room.surface >= BOX0).astype(np.float64)
            imageio.write_mask(root / "completed_mask.png", boxes)
            layers.append({"kind": "background", "image": "background.png", "mask": f"{name}_mask.png",
                           "depth": f"{name}_depth.pfm", "completed_mask": "completed_mask.png"})
        else:
            layers.append({"kind": "foreground", "order": int(name[-2:]), "image": "panorama.png",
                           "mask": f"{name}_mask.png", "depth": f"{name}_depth.pfm"})
    layers.append({"kind": "sky", "image": "sky.png", "mask": "sky_mask.png"})
    manifest = {"panorama": "panorama.png", "depth": "base_depth.pfm", "sky_mask": "sky_mask.png",
                "layers": layers, "output": dict(output)}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def write_sphere_manifest(root, W: int = 512, H: int = 256, radius: float = 3.0, **output) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pano, depth, mask = sphere_fixture(W, H, radius)
    imageio.write_color(root / "panorama.png", pano, bits=16)
    imageio.write_depth(root / "depth.pfm", depth)
    imageio.write_mask(root / "mask.png", mask)
    manifest = {"panorama": "panorama.png",
                "layers": [{"kind": "background", "image": "panorama.png", "mask": "mask.png",
                            "depth": "depth.pfm"}],
                "output": dict(output)}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def checkerboard(size: int = 128, square: int = 32) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    c = ((ii // square + jj // square) % 2).astype(np.float64)
    return np.repeat((0.1 + 0.8 * c)[..., None], 3, axis=2)


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera rotation (x right, y down, z forward)."""
    f = np.asarray(target, np.float64) - np.asarray(position, np.float64)
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, np.float64))
    r /= np.linalg.norm(r)
    dn = np.cross(f, r)
    return np.stack([r, dn, f], axis=1)


def room_camera(position, target, w: int = 256, h: int = 256, fov: float = 70.0) -> PinholeCamera:
    f = 0.5 * w / math.tan(math.radians(fov) / 2)
    return PinholeCamera(f, f, w / 2, h / 2, look_at(position, target), np.asarray(position, np.float64))
