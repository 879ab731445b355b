"""Layered depth to seam-closed grid meshes (sheet warping), sky dome,
object placement and world assembly."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .depth import DepthMap
from .erp import erp_pixel_to_dir, pixel_solid_angles, row_latitudes
from .errors import InvalidArgument, WorldValidationError
from .layering import _column_span

log = logging.getLogger(__name__)


@dataclass
class GridMesh:
    positions: np.ndarray
    uv: np.ndarray
    alpha: np.ndarray
    indices: np.ndarray
    layer_id: int = 0
    texture_ref: str = ""
    # vertices sharing their position with another vertex (seam column, poles)
    seam: np.ndarray | None = None
    # (column, row) pixel of the grid node a vertex came from; -1 for poles
    grid_ij: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.uv = np.asarray(self.uv, dtype=np.float64).reshape(n, 2)
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(n)
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.seam = np.zeros(n, bool) if self.seam is None else np.asarray(self.seam, bool)
        if self.grid_ij is not None:
            self.grid_ij = np.asarray(self.grid_ij, dtype=np.int64).reshape(n, 2)

    @property
    def n_vertices(self):
        return len(self.positions)

    @property
    def n_triangles(self):
        return len(self.indices)

    def is_empty(self):
        return self.n_triangles == 0

    def radii(self):
        return np.linalg.norm(self.positions, axis=1)

    def triangle_areas(self):
        p = self.positions[self.indices]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def check(self):
        if self.n_triangles:
            if self.indices.min() < 0 or self.indices.max() >= self.n_vertices:
                raise InvalidArgument("triangle index out of range")
            t = self.indices
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise InvalidArgument("triangle with repeated vertex")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidArgument("non-finite vertex position")
        return self


@dataclass
class PlacementTransform:
    translation: np.ndarray
    uniform_scale: float
    yaw: float
    name: str = ""
    asset: str | None = None

    def rotation_quaternion(self):
        """xyzw quaternion of the yaw about +Y."""
        return [0.0, math.sin(self.yaw / 2.0), 0.0, math.cos(self.yaw / 2.0)]


@dataclass
class LayeredWorldMesh:
    layers: list
    names: list
    sky: GridMesh | None = None
    placements: list = field(default_factory=list)
    warnings: list = field(default_factory=list)


def polar_smooth(d: DepthMap, lat_threshold: float = 75.0) -> DepthMap:
    """Blend rows poleward of ``lat_threshold`` degrees toward their mean depth.

    The blend weight ramps linearly from 0 at the threshold to 1 at the first
    and last pixel rows, which therefore become exactly constant.
    """
    if not 0 < lat_threshold < 90:
        raise InvalidArgument("lat_threshold must be in (0, 90)")
    H = d.shape[0]
    lat = np.abs(row_latitudes(H))
    thr = math.radians(lat_threshold)
    top = lat[0]
    out = d.depth.copy()
    if top <= thr:
        return DepthMap(out, d.validity)
    w = np.clip((lat - thr) / (top - thr), 0.0, 1.0)
    for j in np.flatnonzero(w > 0):
        sel = d.valid[j]
        if not sel.any():
            continue
        wv = d.validity[j, sel]
        mean = float((wv * d.depth[j, sel]).sum() / wv.sum())
        out[j, sel] = (1.0 - w[j]) * d.depth[j, sel] + w[j] * mean
    return DepthMap(out, d.validity)


def feathered_alpha(mask: np.ndarray, feather: float) -> np.ndarray:
    """Soft mask attenuated within ``feather`` pixels of its boundary (wrap-aware)."""
    m = np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0)
    sup = m > 0
    if feather <= 0 or sup.all() or not sup.any():
        return m
    W = m.shape[1]
    pad = min(int(math.ceil(feather)) + 1, W)
    padded = np.concatenate([sup[:, W - pad:], sup, sup[:, :pad]], axis=1)
    padded = np.concatenate([padded[:1].repeat(pad, 0), padded, padded[-1:].repeat(pad, 0)], axis=0)
    dist = ndimage.distance_transform_edt(padded)[pad:-pad, pad: pad + W]
    return m * np.clip(dist / feather, 0.0, 1.0)


def _grid_rows_cols(H, W, stride):
    cols = np.arange(0, W, stride)
    rows = np.arange(0, H, stride)
    if rows[-1] != H - 1:
        rows = np.append(rows, H - 1)
    return rows, cols


def warp_layer(image, depth: DepthMap, mask=None, stride: int = 2, tear_ratio: float = 1.3,
               feather: float = 2.0, layer_id: int = 0, texture_ref: str = "") -> GridMesh:
    """Displace an ERP grid along its view rays by depth.

    Grid nodes sit on every ``stride``-th pixel center plus a wrap column that
    duplicates column 0 (identical positions, uv.u shifted by exactly 1).
    Pole vertices close the first/last rows when those rows are fully valid.
    Vertices outside the mask are omitted; triangles whose max/min vertex
    depth exceeds ``tear_ratio`` are torn. Faces point toward the origin.
    """
    if stride < 1:
        raise InvalidArgument("stride must be >= 1")
    if not tear_ratio > 1:
        raise InvalidArgument("tear_ratio must be > 1")
    H, W = depth.shape
    if image is not None and np.asarray(image).shape[:2] != (H, W):
        raise InvalidArgument("image and depth lattices differ")
    mask = np.ones((H, W)) if mask is None else np.asarray(mask, dtype=np.float64)
    if mask.shape != (H, W):
        raise InvalidArgument("mask and depth lattices differ")
    if not (mask > 0).any():
        return GridMesh(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, 3)),
                        layer_id, texture_ref, grid_ij=np.zeros((0, 2)))
    if not depth.valid.any():
        raise InvalidArgument("depth map has no valid pixel")

    alpha_full = feathered_alpha(mask, feather)
    rows, cols = _grid_rows_cols(H, W, stride)
    nr, nc = len(rows), len(cols)
    R, C = np.meshgrid(rows, cols, indexing="ij")
    node_depth = depth.depth[R, C]
    node_ok = depth.valid[R, C] & (mask[R, C] > 0)
    node_alpha = alpha_full[R, C]
    dirs = erp_pixel_to_dir(C + 0.5, R + 0.5, W, H)
    node_pos = dirs * node_depth[..., None]

    # vertex ids on the (nr, nc + 1) lattice, last column = wrap duplicate
    ok = np.concatenate([node_ok, node_ok[:, :1]], axis=1)
    vid = np.full(ok.shape, -1, dtype=np.int64)
    vid[ok] = np.arange(int(ok.sum()))
    pos = np.concatenate([node_pos, node_pos[:, :1]], axis=1)[ok]
    ucol = np.concatenate([C + 0.5, C[:, :1] + 0.5 + W], axis=1)
    vrow = np.concatenate([R + 0.5, R[:, :1] + 0.5], axis=1)
    uv = np.stack([ucol[ok] / W, vrow[ok] / H], axis=1)
    alpha = np.concatenate([node_alpha, node_alpha[:, :1]], axis=1)[ok]
    dep = np.concatenate([node_depth, node_depth[:, :1]], axis=1)[ok]
    gc = np.concatenate([C, C[:, :1]], axis=1)[ok]
    gr = np.concatenate([R, R[:, :1]], axis=1)[ok]
    seam_lat = np.zeros(ok.shape, bool)
    seam_lat[:, 0] = True
    seam_lat[:, -1] = True
    seam = seam_lat[ok]

    a, b = vid[:-1, :-1], vid[:-1, 1:]
    c, d = vid[1:, :-1], vid[1:, 1:]
    tris = [np.stack([a, c, b], -1).reshape(-1, 3), np.stack([b, c, d], -1).reshape(-1, 3)]

    extra_pos, extra_uv, extra_alpha, extra_dep = [], [], [], []
    n_base = len(pos)
    for side, row in ((1, 0), (-1, nr - 1)):
        if not node_ok[row].all():
            continue
        pid = n_base + len(extra_pos)
        r = float(node_depth[row].mean())
        extra_pos.append([0.0, side * r, 0.0])
        extra_uv.append([0.5, 0.0 if side > 0 else 1.0])
        extra_alpha.append(float(node_alpha[row].min()))
        extra_dep.append(r)
        ring = vid[row]
        p = np.full(nc, pid)
        if side > 0:
            tris.append(np.stack([p, ring[:-1], ring[1:]], -1))
        else:
            tris.append(np.stack([ring[:-1], p, ring[1:]], -1))
    if extra_pos:
        pos = np.concatenate([pos, np.array(extra_pos)])
        uv = np.concatenate([uv, np.array(extra_uv)])
        alpha = np.concatenate([alpha, np.array(extra_alpha)])
        dep = np.concatenate([dep, np.array(extra_dep)])
        seam = np.concatenate([seam, np.ones(len(extra_pos), bool)])
        gc = np.concatenate([gc, -np.ones(len(extra_pos), np.int64)])
        gr = np.concatenate([gr, -np.ones(len(extra_pos), np.int64)])

    tri = np.concatenate(tris)
    tri = tri[(tri >= 0).all(axis=1)]
    td = dep[tri]
    tri = tri[td.max(axis=1) <= tear_ratio * td.min(axis=1)]

    used = np.zeros(len(pos), bool)
    used[tri.ravel()] = True
    remap = np.cumsum(used) - 1
    return GridMesh(pos[used], uv[used], alpha[used], remap[tri], layer_id, texture_ref,
                    seam[used], np.stack([gc, gr], axis=1)[used])


def build_sky_dome(sky, radius: float, stride: int = 2, layer_id: int = -1,
                   texture_ref: str = "sky") -> GridMesh:
    """Inward-facing constant-radius sphere textured with the full sky panorama."""
    if not radius > 0:
        raise InvalidArgument("radius must be positive")
    H, W = np.asarray(sky).shape[:2]
    d = DepthMap(np.full((H, W), float(radius)), np.ones((H, W)))
    return warp_layer(sky, d, None, stride, tear_ratio=2.0, feather=0.0,
                      layer_id=layer_id, texture_ref=texture_ref)


def chord_width(angle: float, distance: float) -> float:
    """Width subtended by ``angle`` radians at ``distance``, measured on the tangent plane."""
    return 2.0 * distance * math.tan(angle / 2.0)


def place_object(inst, depth: DepthMap, asset_bbox) -> PlacementTransform:
    """Scale, position and turn an external asset to stand in for ``inst``.

    Translation is the median masked depth along the solid-angle weighted
    mean direction of the mask; the asset's larger horizontal extent is scaled
    to the mask's longitude span at that depth; yaw turns its +Z toward the
    panorama center.
    """
    mask = np.asarray(inst.mask if hasattr(inst, "mask") else inst, dtype=np.float64)
    ext = np.asarray(asset_bbox, dtype=np.float64)
    if ext.shape != (3,) or np.any(ext <= 0):
        raise InvalidArgument("asset extents must be three positive numbers")
    H, W = mask.shape
    sel = (mask > 0) & depth.valid
    if not sel.any():
        raise InvalidArgument("instance has no valid depth pixels")
    dist = float(np.median(depth.depth[sel]))
    rr, cc = np.nonzero(mask > 0)
    w = mask[rr, cc] * pixel_solid_angles(H, W)[rr]
    dirs = erp_pixel_to_dir(cc + 0.5, rr + 0.5, W, H)
    mean = (w[:, None] * dirs).sum(axis=0)
    mean /= np.linalg.norm(mean)
    _, span = _column_span(np.unique(cc), W)
    angle = span * 2.0 * math.pi / W
    scale = chord_width(angle, dist) / max(ext[0], ext[2])
    lon = math.atan2(mean[0], -mean[2])
    return PlacementTransform(dist * mean, scale, -lon,
                              name=f"{getattr(inst, 'label', 'object')}_{getattr(inst, 'id', 0):02d}")


def assemble_world(stack, meshes, sky=None, placements=(), strict: bool = True) -> LayeredWorldMesh:
    """Collect per-layer meshes near-to-far and check depth ordering.

    ``meshes`` follows the stack's foreground layers (by order) and then the
    background. Empty foreground meshes are skipped with a warning.
    """
    expected = [l for l in stack.layers if l.kind != "sky"]
    expected.sort(key=lambda l: (l.kind == "background", l.order))
    if len(meshes) != len(expected):
        raise InvalidArgument(f"expected {len(expected)} meshes, got {len(meshes)}")
    layers, names, warnings = [], [], []
    for layer, mesh in zip(expected, meshes):
        if mesh.is_empty():
            msg = f"layer {layer.name} produced an empty mesh; skipped"
            log.warning(msg)
            warnings.append(msg)
            continue
        layers.append(mesh)
        names.append(layer.name)
    offending = []
    medians = [float(np.median(m.radii())) for m in layers]
    for k in range(1, len(layers)):
        if medians[k] < medians[k - 1]:
            offending.append(f"{names[k - 1]} (median radius {medians[k - 1]:.4g}) is behind "
                             f"{names[k]} ({medians[k]:.4g})")
    if sky is not None and layers:
        far = max(float(m.radii().max()) for m in layers)
        if float(sky.radii().min()) <= far:
            offending.append(f"sky radius {float(sky.radii().min()):.4g} does not exceed "
                             f"farthest layer vertex {far:.4g}")
    if offending and strict:
        raise WorldValidationError("layer depth ordering violated: " + "; ".join(offending), offending)
    warnings.extend(offending)
    return LayeredWorldMesh(layers, names, sky, list(placements), warnings)
