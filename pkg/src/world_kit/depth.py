"""Cross-layer depth alignment, sky depth and adaptive depth compression.

Alignment happens in disparity (inverse depth), where monocular predictions
differ from metric depth by an affine map.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .erp import row_latitudes
from .errors import DegenerateAlignment, InvalidArgument, UnderdeterminedError


@dataclass
class DepthMap:
    depth: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        val = np.asarray(self.validity, dtype=np.float64)
        if val.shape != self.depth.shape:
            raise InvalidArgument("depth and validity shapes differ")
        ok = np.isfinite(self.depth) & (self.depth > 0)
        self.validity = np.where(ok, np.clip(val, 0.0, 1.0), 0.0)
        self.depth = np.where(ok, self.depth, 0.0)

    @classmethod
    def from_array(cls, depth):
        depth = np.asarray(depth, dtype=np.float64)
        return cls(depth, (np.isfinite(depth) & (depth > 0)).astype(np.float64))

    @property
    def shape(self):
        return self.depth.shape

    @property
    def valid(self) -> np.ndarray:
        return self.validity > 0

    def masked(self, mask) -> "DepthMap":
        return DepthMap(self.depth, np.minimum(self.validity, np.asarray(mask, np.float64)))


@dataclass
class AffineDepthTransform:
    """Maps layer disparity x to base disparity ``a*x + b``."""

    a: float = 1.0
    b: float = 0.0
    space: str = "disparity"


@dataclass
class AlignmentReport:
    inlier_count: int
    rms_residual: float
    trimmed_iterations: int
    sample_count: int = 0
    invalidated: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _wrap_dilate(region: np.ndarray, radius: float) -> np.ndarray:
    """Euclidean dilation with horizontal wrap; rows are not wrapped."""
    region = np.asarray(region, dtype=bool)
    if radius <= 0 or not region.any():
        return region.copy()
    W = region.shape[1]
    pad = min(int(np.ceil(radius)) + 1, W)
    padded = np.concatenate([region[:, W - pad:], region, region[:, :pad]], axis=1)
    dist = ndimage.distance_transform_edt(~padded)
    return (dist <= radius)[:, pad: pad + W]


def overlap_mask(layer, base_validity, feather: float = 2.0) -> np.ndarray:
    """Pixels usable for aligning ``layer.depth`` to the base depth.

    Valid in both maps, outside the layer's inpainted region and outside a
    ``feather``-pixel band around it.
    """
    if layer.depth is None:
        raise InvalidArgument("layer has no depth")
    lv = layer.depth.validity
    bv = np.asarray(base_validity, dtype=np.float64)
    if lv.shape != bv.shape:
        raise InvalidArgument(f"lattice mismatch {lv.shape} vs {bv.shape}")
    out = np.minimum(lv, bv)
    completed = getattr(layer, "completed", None)
    if completed is not None:
        completed = np.asarray(completed) > 0
        if completed.shape != out.shape:
            raise InvalidArgument("completed-region mask has the wrong shape")
        out[_wrap_dilate(completed, feather)] = 0.0
    return out


def _weighted_fit(x, y, w):
    sw = w.sum()
    xm = (w * x).sum() / sw
    ym = (w * y).sum() / sw
    dx = x - xm
    sxx = (w * dx * dx).sum()
    if sxx <= 0:
        raise UnderdeterminedError("layer disparities are not distinct on the overlap")
    a = (w * dx * (y - ym)).sum() / sxx
    return a, ym - a * xm


def estimate_affine_alignment(d_layer: DepthMap, d_base: DepthMap, overlap,
                              trims: int = 2, mad_factor: float = 3.0):
    """Weighted least-squares affine fit in disparity with MAD trimming.

    Weights are the soft overlap value times cos(latitude). After the initial
    fit, ``trims`` re-fits drop samples whose residual deviates from the
    median residual by more than ``mad_factor`` times the MAD.
    """
    overlap = np.asarray(overlap, dtype=np.float64)
    if d_layer.shape != d_base.shape or overlap.shape != d_base.shape:
        raise InvalidArgument("lattice mismatch")
    H = d_base.shape[0]
    coslat = np.cos(row_latitudes(H))[:, None]
    sel = (overlap > 0) & d_layer.valid & d_base.valid
    if sel.sum() < 2:
        raise UnderdeterminedError("fewer than 2 overlap samples")
    x = 1.0 / d_layer.depth[sel]
    y = 1.0 / d_base.depth[sel]
    w = (overlap * np.broadcast_to(coslat, overlap.shape))[sel]
    if np.unique(x).size < 2:
        raise UnderdeterminedError("fewer than 2 distinct layer disparities")
    a, b = _weighted_fit(x, y, w)
    inliers = np.ones(x.size, dtype=bool)
    done = 0
    for _ in range(trims):
        r = a * x + b - y
        med = np.median(r)
        dev = np.abs(r - med)
        mad = np.median(dev)
        thr = max(mad_factor * mad, 1e-12 * (1.0 + np.median(np.abs(y))))
        keep = dev <= thr
        if keep.sum() < 2 or np.unique(x[keep]).size < 2:
            break
        inliers = keep
        a, b = _weighted_fit(x[keep], y[keep], w[keep])
        done += 1
    if not a > 0:
        raise DegenerateAlignment(f"fitted scale a={a:.6g} is not positive")
    r = (a * x + b - y)[inliers]
    wi = w[inliers]
    rms = float(np.sqrt((wi * r * r).sum() / wi.sum()))
    report = AlignmentReport(int(inliers.sum()), rms, done, int(x.size))
    return AffineDepthTransform(float(a), float(b)), report


def apply_affine(d: DepthMap, t: AffineDepthTransform) -> DepthMap:
    """depth' = 1 / (a/depth + b); pixels whose new disparity is <= 0 turn invalid."""
    valid = d.valid
    disp = np.zeros_like(d.depth)
    disp[valid] = t.a / d.depth[valid] + t.b
    ok = valid & (disp > 0)
    out = np.zeros_like(d.depth)
    out[ok] = 1.0 / disp[ok]
    return DepthMap(out, np.where(ok, d.validity, 0.0))


def sky_depth(stack_depths, kappa: float = 1.05) -> float:
    """Constant sky distance: kappa times the farthest valid depth of any layer."""
    if not kappa > 1.0:
        raise InvalidArgument("kappa must be > 1")
    best = -np.inf
    for d in stack_depths:
        if d is not None and d.valid.any():
            best = max(best, float(d.depth[d.valid].max()))
    if not np.isfinite(best):
        raise InvalidArgument("no valid depth in any layer")
    return kappa * best


def adaptive_compress(d: DepthMap, q: float = 99.0, slope: float = 1.0) -> DepthMap:
    """Log-compress depths beyond the q-th percentile knee K: K*(1 + slope*ln(d/K))."""
    if not 50.0 < q < 100.0:
        raise InvalidArgument("q must be in (50, 100)")
    if not slope > 0:
        raise InvalidArgument("slope must be positive")
    valid = d.valid
    if not valid.any():
        raise InvalidArgument("no valid depths")
    knee = float(np.percentile(d.depth[valid], q))
    out = d.depth.copy()
    far = valid & (out > knee)
    out[far] = knee * (1.0 + slope * np.log(out[far] / knee))
    return DepthMap(out, d.validity)
