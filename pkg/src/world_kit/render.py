"""Evaluation views: panorama resampling and a CPU triangle rasterizer for
layered worlds."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .erp import PinholeCamera, erp_to_pinhole, sample_wrapped
from .errors import InvalidArgument

NEAR = 1e-3


@dataclass(frozen=True)
class ViewPreset:
    name: str
    fov: float
    azimuths: tuple
    resolution: int

    def __post_init__(self):
        if not 0 < self.fov < 180:
            raise InvalidArgument("preset fov must be in (0, 180)")
        if self.resolution < 1 or not self.azimuths:
            raise InvalidArgument("preset needs a resolution and at least one azimuth")

    def cameras(self, position=(0.0, 0.0, 0.0), elevation: float = 0.0):
        return [PinholeCamera.from_fov(self.fov, self.resolution, self.resolution,
                                       yaw_deg=a, pitch_deg=elevation, position=position)
                for a in self.azimuths]


PRESETS = {
    "text-eval": ViewPreset("text-eval", 90.0, (0, 60, 120, 180, 240, 300), 960),
    "image-eval": ViewPreset("image-eval", 90.0, (0, 15, 30, 45, 60, 75, 90), 960),
}


def get_preset(name: str) -> ViewPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidArgument(f"unknown preset '{name}'; available: {', '.join(sorted(PRESETS))}") from None


def render_panorama(pano: np.ndarray, cam: PinholeCamera, w: int, h: int) -> np.ndarray:
    return erp_to_pinhole(pano, cam, w, h)


@numba.njit(cache=True, nogil=True)
def _raster_tri(P, A, fx, fy, cx, cy, zbuf, abuf):
    # P: (3, 3) camera-space vertices, A: (3, 3) attributes, all z >= NEAR
    h, w = zbuf.shape
    sx = np.empty(3)
    sy = np.empty(3)
    iw = np.empty(3)
    for k in range(3):
        iw[k] = 1.0 / P[k, 2]
        sx[k] = fx * P[k, 0] * iw[k] + cx
        sy[k] = fy * P[k, 1] * iw[k] + cy
    area = (sx[1] - sx[0]) * (sy[2] - sy[0]) - (sx[2] - sx[0]) * (sy[1] - sy[0])
    if abs(area) < 1e-12:
        return
    x0 = max(int(np.floor(min(sx[0], sx[1], sx[2]) - 0.5)), 0)
    x1 = min(int(np.ceil(max(sx[0], sx[1], sx[2]) - 0.5)), w - 1)
    y0 = max(int(np.floor(min(sy[0], sy[1], sy[2]) - 0.5)), 0)
    y1 = min(int(np.ceil(max(sy[0], sy[1], sy[2]) - 0.5)), h - 1)
    tol = -1e-9
    for py in range(y0, y1 + 1):
        qy = py + 0.5
        for px in range(x0, x1 + 1):
            qx = px + 0.5
            b0 = ((sx[1] - qx) * (sy[2] - qy) - (sx[2] - qx) * (sy[1] - qy)) / area
            b1 = ((sx[2] - qx) * (sy[0] - qy) - (sx[0] - qx) * (sy[2] - qy)) / area
            b2 = 1.0 - b0 - b1
            if b0 < tol or b1 < tol or b2 < tol:
                continue
            s = b0 * iw[0] + b1 * iw[1] + b2 * iw[2]
            z = 1.0 / s
            if z < zbuf[py, px]:
                zbuf[py, px] = z
                for c in range(3):
                    abuf[py, px, c] = (b0 * A[0, c] * iw[0] + b1 * A[1, c] * iw[1]
                                       + b2 * A[2, c] * iw[2]) * z


@numba.njit(cache=True, nogil=True)
def _raster_mesh(Pc, attr, F, fx, fy, cx, cy, near, zbuf, abuf):
    poly_p = np.empty((4, 3))
    poly_a = np.empty((4, 3))
    tp = np.empty((3, 3))
    ta = np.empty((3, 3))
    for t in range(F.shape[0]):
        a, b, c = F[t, 0], F[t, 1], F[t, 2]
        za, zb, zc = Pc[a, 2], Pc[b, 2], Pc[c, 2]
        if za < near and zb < near and zc < near:
            continue
        # clip against z = near (Sutherland-Hodgman on one plane)
        n = 0
        for k in range(3):
            i = F[t, k]
            j = F[t, (k + 1) % 3]
            zi, zj = Pc[i, 2], Pc[j, 2]
            if zi >= near:
                poly_p[n] = Pc[i]
                poly_a[n] = attr[i]
                n += 1
            if (zi >= near) != (zj >= near):
                s = (near - zi) / (zj - zi)
                poly_p[n] = Pc[i] + s * (Pc[j] - Pc[i])
                poly_a[n] = attr[i] + s * (attr[j] - attr[i])
                n += 1
        for k in range(1, n - 1):
            tp[0] = poly_p[0]
            tp[1] = poly_p[k]
            tp[2] = poly_p[k + 1]
            ta[0] = poly_a[0]
            ta[1] = poly_a[k]
            ta[2] = poly_a[k + 1]
            _raster_tri(tp, ta, fx, fy, cx, cy, zbuf, abuf)


def rasterize(mesh, cam: PinholeCamera, w: int, h: int):
    """Per-pixel nearest fragment of ``mesh``.

    Returns ``(depth, uv, alpha)`` with depth = inf where nothing is drawn.
    Attributes are interpolated perspective-correctly; both faces are drawn.
    """
    cam.validate()
    zbuf = np.full((h, w), np.inf)
    abuf = np.zeros((h, w, 3))
    if mesh.n_triangles:
        Pc = np.ascontiguousarray(cam.world_to_camera(mesh.positions))
        attr = np.ascontiguousarray(np.column_stack([mesh.uv, mesh.alpha]))
        _raster_mesh(Pc, attr, np.ascontiguousarray(mesh.indices), float(cam.fx), float(cam.fy),
                     float(cam.cx), float(cam.cy), NEAR, zbuf, abuf)
    return zbuf, abuf[..., :2], abuf[..., 2]


def render_world(layers, cam: PinholeCamera, w: int, h: int, background=0.0):
    """Alpha-composite textured layers front to back per pixel.

    ``layers`` is a sequence of ``(GridMesh, texture)``; texture coordinates
    index the ERP texture with wrap in u. Returns ``(rgb, coverage)``.
    """
    depths, colors, alphas = [], [], []
    for mesh, tex in layers:
        tex = np.asarray(tex, np.float64)
        if tex.ndim == 2:
            tex = np.repeat(tex[..., None], 3, axis=2)
        tex = tex[..., :3]
        z, uv, a = rasterize(mesh, cam, w, h)
        hit = np.isfinite(z)
        col = np.zeros((h, w, 3))
        if hit.any():
            th, tw = tex.shape[:2]
            col[hit] = sample_wrapped(tex, uv[hit, 0] * tw, uv[hit, 1] * th)
        depths.append(z)
        colors.append(col)
        alphas.append(np.where(hit, np.clip(a, 0.0, 1.0), 0.0))
    out = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    if depths:
        D = np.stack(depths)
        order = np.argsort(D, axis=0, kind="stable")
        C, A = np.stack(colors), np.stack(alphas)
        for k in range(len(depths)):
            idx = order[k][None]
            a = np.take_along_axis(A, idx, 0)[0]
            c = np.take_along_axis(C, idx[..., None], 0)[0]
            out += (trans * a)[..., None] * c
            trans *= 1.0 - a
    out += trans[..., None] * np.asarray(background, np.float64)
    return out, 1.0 - trans


def world_layers(world, textures: dict):
    """``(mesh, texture)`` pairs of a LayeredWorldMesh, sky included."""
    pairs = []
    if world.sky is not None:
        pairs.append((world.sky, textures[world.sky.texture_ref or "sky"]))
    for name, m in zip(world.names, world.layers):
        pairs.append((m, textures[m.texture_ref or name]))
    return pairs
