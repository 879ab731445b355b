"""Equirectangular geometry: pixel/direction transforms, periodic sampling,
seam padding and blending, and pinhole <-> panorama resampling.

Conventions used throughout the package:

* continuous ERP coordinates (u, v), u in [0, W), v in [0, H]; pixel (i, j)
  has its center at (i + 0.5, j + 0.5);
* longitude ``lon = 2*pi*u/W - pi``, latitude ``lat = pi/2 - pi*v/H``;
* world direction ``(cos(lat) sin(lon), sin(lat), -cos(lat) cos(lon))``:
  right-handed, +Y up, -Z forward at the image center;
* pinhole camera frames are x right, y down, z forward; ``rotation`` maps
  camera-frame vectors to world.

Images are float arrays shaped (H, W) or (H, W, C).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument


def lon_lat(u, v, W, H):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return 2.0 * np.pi * u / W - np.pi, 0.5 * np.pi - np.pi * v / H


def row_latitudes(H: int) -> np.ndarray:
    """Latitude of each pixel-row center, top to bottom."""
    return 0.5 * np.pi - np.pi * (np.arange(H) + 0.5) / H


def pixel_solid_angles(H: int, W: int) -> np.ndarray:
    """Exact solid angle of every pixel in each row, shape (H,)."""
    edges = 0.5 * np.pi - np.pi * np.arange(H + 1) / H
    return (2.0 * np.pi / W) * (np.sin(edges[:-1]) - np.sin(edges[1:]))


def erp_pixel_to_dir(u, v, W, H) -> np.ndarray:
    """Unit direction(s) for continuous ERP coordinates; returns shape (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise InvalidArgument("non-finite ERP coordinate")
    if np.any(v < 0) or np.any(v > H):
        raise InvalidArgument("v outside [0, H]")
    lon, lat = lon_lat(np.mod(u, W), v, W, H)
    cl = np.cos(lat)
    d = np.stack([cl * np.sin(lon), np.sin(lat), -cl * np.cos(lon)], axis=-1)
    # cos(pi/2) is not exactly zero in floating point
    pole = (v == 0) | (v == H)
    if np.any(pole):
        d = np.where(pole[..., None], np.stack(
            [np.zeros_like(lat), np.sign(lat), np.zeros_like(lat)], axis=-1), d)
    return d


def dir_to_erp_pixel(d, W, H):
    """Inverse of :func:`erp_pixel_to_dir`; returns (u, v). Poles map to u = W/2."""
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1)
    if np.any(~np.isfinite(n)) or np.any(n == 0):
        raise InvalidArgument("direction must be finite and non-zero")
    x, y, z = d[..., 0] / n, d[..., 1] / n, d[..., 2] / n
    horiz = np.hypot(x, z)
    lon = np.arctan2(x, -z)
    lat = np.arctan2(y, horiz)
    u = (lon + np.pi) * (W / (2.0 * np.pi))
    u = np.where(u >= W, u - W, u)
    u = np.where(horiz == 0, W / 2.0, u)
    v = (0.5 * np.pi - lat) * (H / np.pi)
    return u, v


def check_erp(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim not in (2, 3) or img.shape[1] != 2 * img.shape[0]:
        raise InvalidArgument(f"ERP raster must be H x 2H, got {img.shape}")
    return img


def sample_wrapped(img: np.ndarray, u, v) -> np.ndarray:
    """Bilinear lookup with horizontal wrap and vertical clamp to pixel centers."""
    img = np.asarray(img)
    H, W = img.shape[:2]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    uu = np.mod(u, W)
    uu = np.where(uu >= W, uu - W, uu)
    x = uu - 0.5
    x0 = np.floor(x)
    fx = x - x0
    x0 = x0.astype(np.int64)
    c0 = np.mod(x0, W)
    c1 = np.mod(x0 + 1, W)
    y = np.clip(v - 0.5, 0.0, H - 1.0)
    y0 = np.floor(y)
    fy = y - y0
    y0 = y0.astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, c0] * (1.0 - fx) + img[y0, c1] * fx
    bot = img[y1, c0] * (1.0 - fx) + img[y1, c1] * fx
    return top * (1.0 - fy) + bot * fy


def circular_pad(img: np.ndarray, pad: int) -> np.ndarray:
    """Extend the raster left and right with wrapped columns."""
    img = np.asarray(img)
    W = img.shape[1]
    if pad < 0 or pad > W // 2:
        raise InvalidArgument(f"pad must be in [0, {W // 2}]")
    if pad == 0:
        return img.copy()
    return np.concatenate([img[:, W - pad:], img, img[:, :pad]], axis=1)


def crop_padding(img: np.ndarray, pad: int) -> np.ndarray:
    return img[:, pad: img.shape[1] - pad].copy()


def blend_wrap(img: np.ndarray, band: int) -> np.ndarray:
    """Cross-fade the seam over ``band`` columns on each side.

    The per-row seam jump in excess of the local gradient (mean of the steps
    just inside either edge) is spread linearly over the 2*band columns
    straddling the seam. Images that continue smoothly across the seam are
    left unchanged up to their curvature there.
    """
    img = np.asarray(img, dtype=np.float64)
    W = img.shape[1]
    if band < 1 or band > W // 4:
        raise InvalidArgument(f"band must be in [1, {W // 4}]")
    out = img.copy()
    slope = 0.5 * ((img[:, 1] - img[:, 0]) + (img[:, W - 1] - img[:, W - 2]))
    jump = img[:, 0] - img[:, W - 1] - slope
    steps = (np.arange(2 * band) + 1.0) / (2 * band + 1.0)
    for m in range(band):
        out[:, W - band + m] = img[:, W - band + m] + steps[m] * jump
        out[:, m] = img[:, m] - (1.0 - steps[band + m]) * jump
    return out


def vertical_shift(img: np.ndarray, r: float) -> np.ndarray:
    """Translate rows by round(r*H); vacated rows replicate the nearest surviving row."""
    if not abs(r) <= 0.5:
        raise InvalidArgument("|r| must be <= 0.5")
    img = np.asarray(img)
    H = img.shape[0]
    k = int(math.floor(r * H + 0.5))
    src = np.clip(np.arange(H) - k, 0, H - 1)
    return img[src].copy()


def random_vertical_shift(img, rng: np.random.Generator, p: float = 0.5, max_ratio: float = 0.1):
    """Elevation augmentation: with probability p shift by r ~ U[-max_ratio, max_ratio]."""
    if rng.random() >= p:
        return np.asarray(img).copy(), 0.0
    r = float(rng.uniform(-max_ratio, max_ratio))
    return vertical_shift(img, r), r


def yaw_pitch_rotation(yaw: float, pitch: float = 0.0) -> np.ndarray:
    """World-from-camera rotation for a camera looking at (lon=yaw, lat=pitch), radians."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * sy, sp, -cp * cy])
    right = np.array([cy, 0.0, sy])
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


@dataclass
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.diag([1.0, -1.0, -1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def from_fov(cls, fov_deg, width, height, yaw_deg=0.0, pitch_deg=0.0, position=(0, 0, 0)):
        """Square-pixel camera with horizontal FOV ``fov_deg``, centered principal point."""
        if not 0 < fov_deg < 180:
            raise InvalidArgument("fov must be in (0, 180)")
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        return cls(f, f, width / 2.0, height / 2.0,
                   # reduce yaw first so 360 deg is bit-identical to 0 deg
                   yaw_pitch_rotation(math.radians(yaw_deg % 360.0), math.radians(pitch_deg)),
                   np.asarray(position, dtype=np.float64))

    def validate(self):
        if not (self.fx > 0 and self.fy > 0) or not all(
                math.isfinite(t) for t in (self.fx, self.fy, self.cx, self.cy)):
            raise InvalidArgument("degenerate camera: focal lengths must be positive")
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-9:
            raise InvalidArgument("camera rotation is not orthonormal")
        return self

    def pixel_rays(self, w, h) -> np.ndarray:
        """Camera-frame rays (z = 1) through pixel centers, shape (h, w, 3)."""
        xs = (np.arange(w) + 0.5 - self.cx) / self.fx
        ys = (np.arange(h) + 0.5 - self.cy) / self.fy
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy, np.ones_like(gx)], axis=-1)

    def world_to_camera(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, np.float64) - self.translation) @ self.rotation

    def project(self, pts_cam: np.ndarray):
        """Continuous pixel coordinates of camera-frame points (z must be > 0)."""
        z = pts_cam[..., 2]
        return self.fx * pts_cam[..., 0] / z + self.cx, self.fy * pts_cam[..., 1] / z + self.cy


def _sample_clamped(img: np.ndarray, x, y) -> np.ndarray:
    """Bilinear lookup in a plain raster with edge clamping (pixel centers at +0.5)."""
    h, w = img.shape[:2]
    x = np.clip(x - 0.5, 0.0, w - 1.0)
    y = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def pinhole_to_erp(img: np.ndarray, cam: PinholeCamera, W: int, H: int):
    """Unproject a pinhole image onto the panorama lattice.

    Returns ``(erp, validity)``; pixels outside the camera frustum are 0 with
    validity 0. The camera translation is ignored (rays leave the origin).
    """
    cam.validate()
    if W != 2 * H:
        raise InvalidArgument("W must equal 2H")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    uu, vv = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    d = erp_pixel_to_dir(uu, vv, W, H)
    c = d @ cam.rotation
    front = c[..., 2] > 0
    z = np.where(front, c[..., 2], 1.0)
    x = cam.fx * c[..., 0] / z + cam.cx
    y = cam.fy * c[..., 1] / z + cam.cy
    valid = front & (x >= 0) & (x < w) & (y >= 0) & (y < h)
    out_shape = (H, W) + img.shape[2:]
    out = np.zeros(out_shape)
    out[valid] = _sample_clamped(img, x[valid], y[valid])
    return out, valid.astype(np.float64)


def erp_to_pinhole(img: np.ndarray, cam: PinholeCamera, out_w: int, out_h: int) -> np.ndarray:
    """Gnomonic resampling of the panorama into a pinhole view."""
    cam.validate()
    rays = cam.pixel_rays(out_w, out_h)
    d = rays @ cam.rotation.T
    u, v = dir_to_erp_pixel(d, img.shape[1], img.shape[0])
    return sample_wrapped(img, u, v)
