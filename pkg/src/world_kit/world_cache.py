"""Expandable RGB-D point cache: unprojection, voxel culling, z-buffered
splat projection into new views and overlapping clip sampling along a
camera trajectory.

Depth in guidance frames is z-depth along the camera's optical axis.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .erp import PinholeCamera
from .errors import FormatError, InvalidArgument, ParseError
from .imageio import linear_to_srgb, srgb_to_linear

log = logging.getLogger(__name__)


@dataclass
class CachedPoint:
    position: np.ndarray
    color: np.ndarray
    frame_id: int
    confidence: float = 1.0


@dataclass
class GuidanceFrame:
    color: np.ndarray
    depth: np.ndarray
    validity: np.ndarray
    camera: PinholeCamera

    def __post_init__(self):
        self.depth = np.asarray(self.depth, np.float64)
        self.validity = np.asarray(self.validity, np.float64)
        self.color = np.asarray(self.color, np.float64)
        if self.depth.shape != self.validity.shape or self.color.shape[:2] != self.depth.shape:
            raise InvalidArgument("color, depth and validity must share a lattice")
        self.depth = np.where(self.validity > 0, self.depth, 0.0)

    @property
    def shape(self):
        return self.depth.shape

    @property
    def valid(self):
        return self.validity > 0


class WorldCache:
    """Append-ordered point store with a voxel hash at ``cell`` meters."""

    def __init__(self, cell: float = 0.05):
        if not cell > 0:
            raise InvalidArgument("cell size must be positive")
        self.cell = float(cell)
        self.positions = np.zeros((0, 3))
        self.colors = np.zeros((0, 3))
        self.frame_ids = np.zeros(0, np.int64)
        self.confidence = np.zeros(0)
        self.cells = np.zeros((0, 3), np.int64)
        self.last_frame_id = -1
        self._index = None

    def __len__(self):
        return len(self.positions)

    def point(self, i) -> CachedPoint:
        return CachedPoint(self.positions[i].copy(), self.colors[i].copy(),
                           int(self.frame_ids[i]), float(self.confidence[i]))

    def _append(self, pos, col, fid, conf):
        if not np.all(np.isfinite(pos)):
            raise InvalidArgument("non-finite point position")
        self.positions = np.concatenate([self.positions, pos])
        self.colors = np.concatenate([self.colors, col])
        self.frame_ids = np.concatenate([self.frame_ids, np.full(len(pos), fid, np.int64)])
        self.confidence = np.concatenate([self.confidence, conf])
        self.cells = np.concatenate([self.cells, np.floor(pos / self.cell).astype(np.int64)])
        self._index = None

    @property
    def voxel_index(self) -> dict:
        """Map from integer cell coordinates to the ids of the points inside."""
        if self._index is None:
            order = np.lexsort(self.cells.T[::-1])
            c = self.cells[order]
            brk = np.flatnonzero(np.any(np.diff(c, axis=0) != 0, axis=1)) + 1
            self._index = {tuple(int(x) for x in c[g[0]]): g
                           for g in np.split(order, brk) if len(g)}
        return self._index

    def points_in_cell(self, cell) -> np.ndarray:
        return self.voxel_index.get(tuple(cell), np.zeros(0, np.int64))

    def subset(self, keep) -> "WorldCache":
        out = WorldCache(self.cell)
        out.positions = self.positions[keep]
        out.colors = self.colors[keep]
        out.frame_ids = self.frame_ids[keep]
        out.confidence = self.confidence[keep]
        out.cells = self.cells[keep]
        out.last_frame_id = self.last_frame_id
        return out


def unproject(frame: GuidanceFrame):
    """World-space points and colors of the valid pixels, row-major order."""
    cam = frame.camera.validate()
    h, w = frame.shape
    sel = frame.valid
    d = frame.depth[sel]
    if np.any(~(d > 0)) or not np.all(np.isfinite(d)):
        raise InvalidArgument("valid pixels need positive finite depth")
    rays = cam.pixel_rays(w, h)[sel]
    pts = (rays * d[:, None]) @ cam.rotation.T + cam.translation
    col = frame.color[sel]
    if col.ndim == 1:
        col = np.repeat(col[:, None], 3, axis=1)
    return pts, col[:, :3]


def _frame_confidence(frame, confidence):
    if confidence is None:
        return np.ones(int(frame.valid.sum()))
    c = np.asarray(confidence, np.float64)
    c = c[frame.valid] if c.shape == frame.shape else np.broadcast_to(c, int(frame.valid.sum()))
    if np.any((c < 0) | (c > 1)):
        raise InvalidArgument("confidence must lie in [0, 1]")
    return np.array(c, np.float64)


def init_cache(frame: GuidanceFrame, cell: float = 0.05, confidence=None) -> WorldCache:
    """One point per valid pixel of ``frame`` with frame_id 0."""
    cache = WorldCache(cell)
    pts, col = unproject(frame)
    if not len(pts):
        log.warning("initial frame has no valid pixels; cache is empty")
    cache._append(pts, col, 0, _frame_confidence(frame, confidence))
    cache.last_frame_id = 0
    return cache


def add_frame(cache: WorldCache, frame: GuidanceFrame, frame_id: int, confidence=None) -> WorldCache:
    """Append the valid pixels of ``frame`` (in place; returns ``cache``)."""
    if frame_id <= cache.last_frame_id:
        raise InvalidArgument(f"frame_id {frame_id} does not exceed previous {cache.last_frame_id}")
    pts, col = unproject(frame)
    if not len(pts):
        return cache
    cache._append(pts, col, int(frame_id), _frame_confidence(frame, confidence))
    cache.last_frame_id = int(frame_id)
    return cache


def cull(cache: WorldCache, voxel: float) -> WorldCache:
    """Keep one point per ``voxel``-sized cell.

    The survivor is the most confident point, then the earliest frame, then
    the earliest appended. Survivors keep their append order.
    """
    if not voxel > 0:
        raise InvalidArgument("voxel must be positive")
    n = len(cache)
    if n == 0:
        return cache.subset(np.zeros(0, np.int64))
    cells = np.floor(cache.positions / voxel).astype(np.int64)
    order = np.lexsort((np.arange(n), cache.frame_ids, -cache.confidence,
                        cells[:, 2], cells[:, 1], cells[:, 0]))
    c = cells[order]
    first = np.ones(n, bool)
    first[1:] = np.any(c[1:] != c[:-1], axis=1)
    return cache.subset(np.sort(order[first]))


def project(cache: WorldCache, cam: PinholeCamera, w: int, h: int,
            splat_radius: int = 1) -> GuidanceFrame:
    """Z-buffered square splats of every point in front of ``cam``."""
    cam.validate()
    if splat_radius < 0:
        raise InvalidArgument("splat_radius must be >= 0")
    color = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    valid = np.zeros((h, w))
    if len(cache) == 0:
        return GuidanceFrame(color, depth, valid, cam)
    pc = cam.world_to_camera(cache.positions)
    front = np.flatnonzero(pc[:, 2] > 1e-9)
    pc = pc[front]
    x, y = cam.project(pc)
    ix, iy = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
    r = int(splat_radius)
    offs = np.arange(-r, r + 1)
    ox, oy = [a.ravel() for a in np.meshgrid(offs, offs)]
    px = (ix[:, None] + ox[None]).ravel()
    py = (iy[:, None] + oy[None]).ravel()
    pid = np.repeat(np.arange(len(pc)), len(ox))
    inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
    px, py, pid = px[inside], py[inside], pid[inside]
    pix = py * w + px
    z = pc[pid, 2]
    order = np.lexsort((pid, z, pix))
    pix, pid = pix[order], pid[order]
    first = np.ones(len(pix), bool)
    first[1:] = pix[1:] != pix[:-1]
    pix, pid = pix[first], pid[first]
    depth.ravel()[pix] = pc[pid, 2]
    valid.ravel()[pix] = 1.0
    color.reshape(-1, 3)[pix] = cache.colors[front[pid]]
    return GuidanceFrame(color, depth, valid, cam)


def smooth_sample(n_frames: int, clip_len: int, overlap: int) -> list:
    """Frame-index clips ``[start, end]`` covering ``range(n_frames)``.

    Starts advance by ``clip_len - overlap``; when the last regular clip
    stops short of the final frame, an extra end-aligned clip is added.
    """
    if hasattr(n_frames, "__len__"):
        n_frames = len(n_frames)
    if not (0 < overlap < clip_len <= n_frames):
        raise InvalidArgument("need 0 < overlap < clip_len <= trajectory length")
    step = clip_len - overlap
    starts = list(range(0, n_frames - clip_len + 1, step))
    if starts[-1] + clip_len < n_frames:
        starts.append(n_frames - clip_len)
    return [(s, s + clip_len - 1) for s in starts]


def footprint_size(cam: PinholeCamera, depth: float, splat_radius: int) -> float:
    """Metric width of a splat footprint at ``depth``."""
    return (2 * splat_radius + 1) * depth / min(cam.fx, cam.fy)


# -- files -----------------------------------------------------------------

_PLY_DT = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                    ("frame_id", "<i4"), ("confidence", "<f4")])


def cache_to_ply(cache: WorldCache) -> bytes:
    """Binary PLY snapshot; colors are stored sRGB-encoded as bytes."""
    head = ("ply\nformat binary_little_endian 1.0\n"
            f"comment cell {cache.cell!r}\n"
            f"comment last_frame_id {cache.last_frame_id}\n"
            f"element vertex {len(cache)}\n"
            "property double x\nproperty double y\nproperty double z\n"
            "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            "property int frame_id\nproperty float confidence\n"
            "end_header\n").encode("ascii")
    v = np.zeros(len(cache), _PLY_DT)
    v["x"], v["y"], v["z"] = cache.positions.T
    rgb = np.rint(linear_to_srgb(cache.colors) * 255).astype(np.uint8)
    v["red"], v["green"], v["blue"] = rgb.T
    v["frame_id"] = cache.frame_ids
    v["confidence"] = cache.confidence
    return head + v.tobytes()


def cache_from_ply(data: bytes) -> WorldCache:
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a PLY file")
    header = data[:end].decode("ascii", "replace")
    m = re.search(r"element vertex (\d+)", header)
    cell = re.search(r"comment cell (\S+)", header)
    last = re.search(r"comment last_frame_id (-?\d+)", header)
    if m is None or cell is None:
        raise FormatError("PLY is not a cache snapshot")
    n = int(m.group(1))
    body = data[end + len(b"end_header\n"):]
    if len(body) != n * _PLY_DT.itemsize:
        raise FormatError("cache PLY body size mismatch")
    v = np.frombuffer(body, _PLY_DT, n)
    cache = WorldCache(float(cell.group(1)))
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1)
    col = srgb_to_linear(np.stack([v["red"], v["green"], v["blue"]], axis=1) / 255.0)
    cache._append(pos, col, 0, v["confidence"].astype(np.float64))
    cache.frame_ids = v["frame_id"].astype(np.int64)
    cache.last_frame_id = int(last.group(1)) if last else int(cache.frame_ids.max(initial=-1))
    return cache


@dataclass
class CameraTrajectory:
    cameras: list
    width: int
    height: int
    timestamps: list = field(default_factory=list)

    def __post_init__(self):
        if not self.cameras:
            raise InvalidArgument("a trajectory needs at least one pose")
        if not self.timestamps:
            self.timestamps = list(range(len(self.cameras)))

    def __len__(self):
        return len(self.cameras)


def quat_wxyz_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]])


def matrix_to_quat_wxyz(R) -> list:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, np.float64)
    t = np.trace(R)
    if t > 0:
        s = 2.0 * math.sqrt(t + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * math.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 1e-300))
        q = [0.0] * 4
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    q = np.array(q)
    q /= np.linalg.norm(q)
    return list(q if q[0] >= 0 else -q)


def camera_to_json(cam: PinholeCamera) -> dict:
    return {"rotation": [float(x) for x in matrix_to_quat_wxyz(cam.rotation)],
            "translation": [float(x) for x in cam.translation]}


def trajectory_to_json(traj: CameraTrajectory) -> str:
    c0 = traj.cameras[0]
    doc = {"intrinsics": {"fx": c0.fx, "fy": c0.fy, "cx": c0.cx, "cy": c0.cy,
                          "width": traj.width, "height": traj.height},
           "poses": []}
    for cam, t in zip(traj.cameras, traj.timestamps):
        p = camera_to_json(cam)
        p["timestamp"] = t
        if (cam.fx, cam.fy, cam.cx, cam.cy) != (c0.fx, c0.fy, c0.cx, c0.cy):
            p["intrinsics"] = {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy}
        doc["poses"].append(p)
    return json.dumps(doc, indent=1)


def _line_of(text, pos):
    return text.count("\n", 0, pos) + 1


def _pose_offsets(text):
    """Character offsets of each element of the top-level "poses" array."""
    m = re.search(r'"poses"\s*:\s*\[', text)
    if m is None:
        return []
    dec = json.JSONDecoder()
    out, i = [], m.end()
    while True:
        while i < len(text) and text[i] in " \t\r\n,":
            i += 1
        if i >= len(text) or text[i] == "]":
            return out
        out.append(i)
        try:
            _, i = dec.raw_decode(text, i)
        except json.JSONDecodeError:
            return out


def _num_list(v, n, what, line, source):
    if not isinstance(v, list) or len(v) != n or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x) for x in v):
        raise ParseError(f"{what} must be a list of {n} finite numbers", line, source)
    return [float(x) for x in v]


def _intrinsics(d, line, source, need_size):
    if not isinstance(d, dict):
        raise ParseError("intrinsics must be an object", line, source)
    try:
        vals = {k: float(d[k]) for k in ("fx", "fy", "cx", "cy")}
        if need_size:
            vals["width"], vals["height"] = int(d["width"]), int(d["height"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad intrinsics: {e}", line, source) from e
    if not (vals["fx"] > 0 and vals["fy"] > 0):
        raise ParseError("focal lengths must be positive", line, source)
    if need_size and not (vals["width"] > 0 and vals["height"] > 0):
        raise ParseError("image size must be positive", line, source)
    return vals


def parse_trajectory(text: str, source: str | None = None) -> CameraTrajectory:
    """Parse a JSON pose list; every error carries the offending line."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, e.lineno, source) from e
    if not isinstance(doc, dict) or "poses" not in doc or "intrinsics" not in doc:
        raise ParseError('expected an object with "intrinsics" and "poses"', 1, source)
    ipos = text.find('"intrinsics"')
    K = _intrinsics(doc["intrinsics"], _line_of(text, max(ipos, 0)), source, True)
    poses = doc["poses"]
    if not isinstance(poses, list) or not poses:
        raise ParseError('"poses" must be a non-empty list', _line_of(text, text.find('"poses"')), source)
    offs = _pose_offsets(text)
    cams, stamps = [], []
    for k, p in enumerate(poses):
        line = _line_of(text, offs[k]) if k < len(offs) else None
        if not isinstance(p, dict):
            raise ParseError(f"pose {k} must be an object", line, source)
        if "rotation" not in p or "translation" not in p:
            raise ParseError(f"pose {k} needs rotation and translation", line, source)
        q = _num_list(p["rotation"], 4, f"pose {k} rotation", line, source)
        if np.linalg.norm(q) < 1e-12:
            raise ParseError(f"pose {k} rotation quaternion is zero", line, source)
        t = _num_list(p["translation"], 3, f"pose {k} translation", line, source)
        ki = _intrinsics(p["intrinsics"], line, source, False) if "intrinsics" in p else K
        cams.append(PinholeCamera(ki["fx"], ki["fy"], ki["cx"], ki["cy"], quat_wxyz_to_matrix(q), t))
        stamps.append(p.get("timestamp", k))
    return CameraTrajectory(cams, K["width"], K["height"], stamps)


def parse_camera(text: str, source: str | None = None):
    """Camera JSON: intrinsics plus an optional pose, or a field-of-view form.

    ``{"fx", "fy", "cx", "cy", "width", "height", "rotation": [w, x, y, z],
    "translation": [x, y, z]}`` or ``{"fov", "width", "height", "yaw",
    "pitch", "position"}`` (degrees). Returns ``(camera, width, height)``.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, e.lineno, source) from e
    if not isinstance(doc, dict):
        raise ParseError("camera must be a JSON object", 1, source)

    def line(key):
        pos = text.find(f'"{key}"')
        return _line_of(text, pos) if pos >= 0 else 1

    try:
        w, h = int(doc["width"]), int(doc["height"])
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"camera needs integer width and height ({e})", line("width"), source) from e
    if w < 1 or h < 1:
        raise ParseError("image size must be positive", line("width"), source)
    if "fov" in doc:
        try:
            fov = float(doc["fov"])
            cam = PinholeCamera.from_fov(fov, w, h, float(doc.get("yaw", 0.0)), float(doc.get("pitch", 0.0)),
                                         _num_list(doc.get("position", [0, 0, 0]), 3, "position",
                                                   line("position"), source))
        except (TypeError, ValueError) as e:
            raise ParseError(str(e), line("fov"), source) from e
        return cam, w, h
    K = _intrinsics(doc, line("fx"), source, False)
    R = np.diag([1.0, -1.0, -1.0])
    if "rotation" in doc:
        q = _num_list(doc["rotation"], 4, "rotation", line("rotation"), source)
        if np.linalg.norm(q) < 1e-12:
            raise ParseError("rotation quaternion is zero", line("rotation"), source)
        R = quat_wxyz_to_matrix(q)
    t = _num_list(doc.get("translation", [0, 0, 0]), 3, "translation", line("translation"), source)
    return PinholeCamera(K["fx"], K["fy"], K["cx"], K["cy"], R, t), w, h


def camera_json(cam: PinholeCamera, w: int, h: int) -> str:
    doc = {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": w, "height": h}
    doc.update(camera_to_json(cam))
    return json.dumps(doc, indent=1)
