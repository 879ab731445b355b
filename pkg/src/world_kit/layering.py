"""Seam-aware instance bookkeeping and onion-peeling layer decomposition."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import providers
from .depth import DepthMap
from .erp import circular_pad
from .errors import InvalidArgument, ProviderTimeout

log = logging.getLogger(__name__)

SKY, BACKGROUND, FOREGROUND = "sky", "background", "foreground"


@dataclass
class WrappedBox:
    """Axis-aligned box on the panorama; ``u_max > W`` means it wraps the seam."""

    u_min: float
    u_max: float
    v_min: float
    v_max: float
    score: float = 1.0

    @property
    def center(self):
        return 0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max)


@dataclass
class InstanceMask:
    id: int
    label: str
    box: WrappedBox
    mask: np.ndarray
    median_depth: float | None = None
    flags: list = field(default_factory=list)

    @property
    def area(self) -> float:
        return float(np.asarray(self.mask, np.float64).sum())


@dataclass
class Layer:
    kind: str
    order: int
    image: np.ndarray
    mask: np.ndarray
    depth: DepthMap | None = None
    instances: list = field(default_factory=list)
    completed: np.ndarray | None = None
    flags: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"fg_{self.order:02d}" if self.kind == FOREGROUND else self.kind


@dataclass
class LayerStack:
    panorama: np.ndarray
    layers: list

    @property
    def foreground(self):
        return sorted((l for l in self.layers if l.kind == FOREGROUND), key=lambda l: l.order)

    def get(self, kind):
        for l in self.layers:
            if l.kind == kind:
                return l
        return None

    def validate(self):
        kinds = [l.kind for l in self.layers]
        if kinds.count(BACKGROUND) != 1 or kinds.count(SKY) > 1:
            raise InvalidArgument("a stack needs exactly one background and at most one sky layer")
        orders = [l.order for l in self.foreground]
        if orders != list(range(len(orders))):
            raise InvalidArgument(f"foreground orders must be 0..n-1, got {orders}")
        return self

    def coverage(self) -> np.ndarray:
        """Per-pixel count of layers whose mask covers it."""
        return sum((np.asarray(l.mask) > 0).astype(np.int32) for l in self.layers)


def remap_padded_box(box_padded, pad: int, W: int) -> WrappedBox:
    """Map a detection box from the circularly padded image back to the panorama."""
    u0, v0, u1, v1 = (float(t) for t in box_padded[:4])
    score = float(box_padded[4]) if len(box_padded) > 4 else 1.0
    if not (0 <= u0 < u1 <= W + 2 * pad):
        raise InvalidArgument(f"box u-range [{u0}, {u1}] outside padded width {W + 2 * pad}")
    if u1 - u0 > W:
        raise InvalidArgument("box wider than the panorama")
    u0 -= pad
    u1 -= pad
    k = np.floor(u0 / W)
    return WrappedBox(u0 - k * W, u1 - k * W, v0, v1, score)


def _column_span(cols: np.ndarray, W: int):
    """Smallest wrapped column interval [start, start+length) containing ``cols``."""
    occ = np.zeros(W, dtype=bool)
    occ[cols] = True
    if occ.all():
        return 0, W
    idx = np.flatnonzero(occ)
    gaps = np.diff(np.concatenate([idx, [idx[0] + W]])) - 1
    g = int(np.argmax(gaps))
    start = int(idx[(g + 1) % idx.size])
    return start, W - int(gaps[g])


def box_from_mask(mask: np.ndarray, score: float = 1.0) -> WrappedBox:
    sup = np.asarray(mask) > 0
    rows = np.flatnonzero(sup.any(axis=1))
    cols = np.flatnonzero(sup.any(axis=0))
    if rows.size == 0:
        raise InvalidArgument("empty mask")
    start, length = _column_span(cols, mask.shape[1])
    return WrappedBox(float(start), float(start + length), float(rows[0]), float(rows[-1] + 1), score)


def _touch_across_seam(a: np.ndarray, b: np.ndarray) -> bool:
    """8-connected contact between a's last column and b's first column."""
    right = a[:, -1] > 0
    left = b[:, 0] > 0
    grown = left.copy()
    grown[1:] |= left[:-1]
    grown[:-1] |= left[1:]
    return bool((right & grown).any())


def merge_seam_fragments(instances, W: int):
    """Union same-label instances that overlap or touch across the seam."""
    n = len(instances)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    sups = [np.asarray(inst.mask) > 0 for inst in instances]
    for i in range(n):
        if sups[i].shape[1] != W:
            raise InvalidArgument("instance mask width differs from W")
        for j in range(i + 1, n):
            if instances[i].label != instances[j].label:
                continue
            if ((sups[i] & sups[j]).any() or _touch_across_seam(sups[i], sups[j])
                    or _touch_across_seam(sups[j], sups[i])):
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    out = []
    for new_id, root in enumerate(sorted(groups)):
        members = groups[root]
        first = instances[members[0]]
        if len(members) == 1:
            out.append(InstanceMask(new_id, first.label, first.box, first.mask,
                                    first.median_depth, list(first.flags)))
            continue
        mask = np.max(np.stack([np.asarray(instances[m].mask, np.float64) for m in members]), axis=0)
        score = max(instances[m].box.score for m in members)
        out.append(InstanceMask(new_id, first.label, box_from_mask(mask, score), mask,
                                flags=["merged"]))
    return out


def area_nms(instances, overlap_thresh: float = 0.5):
    """Keep instances by descending area; drop any whose intersection over the
    smaller area with an already kept instance exceeds ``overlap_thresh``."""
    if not 0 < overlap_thresh <= 1:
        raise InvalidArgument("overlap_thresh must be in (0, 1]")
    masks = [np.asarray(inst.mask, np.float64) for inst in instances]
    areas = [m.sum() for m in masks]
    order = sorted(range(len(instances)),
                   key=lambda i: (-areas[i], instances[i].box.v_min, instances[i].box.u_min, i))
    kept = []
    for i in order:
        suppressed = False
        for k in kept:
            inter = np.minimum(masks[i], masks[k]).sum()
            smaller = min(areas[i], areas[k])
            if smaller > 0 and inter / smaller > overlap_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(i)
    return [instances[i] for i in kept]


def assign_sublayers(instances, base_depth: DepthMap, k: int = 2):
    """Group instances into ``k`` depth layers by quantiles of their median depth.

    Fills ``median_depth`` on each instance and returns the per-instance order
    (0 = nearest). Instances without valid depth are flagged ``no-depth`` and
    joined to the group whose mean box-center row is closest.
    """
    n = len(instances)
    if not 1 <= k <= max(n, 1):
        raise InvalidArgument(f"k must be in [1, {n}]")
    if n == 0:
        return []
    medians = np.full(n, np.nan)
    for i, inst in enumerate(instances):
        sel = (np.asarray(inst.mask) > 0) & base_depth.valid
        if sel.any():
            medians[i] = float(np.median(base_depth.depth[sel]))
            inst.median_depth = medians[i]
        else:
            inst.median_depth = None
            if "no-depth" not in inst.flags:
                inst.flags.append("no-depth")
    have = np.isfinite(medians)
    orders = np.zeros(n, dtype=np.int64)
    if have.any():
        cuts = np.quantile(medians[have], np.arange(1, k) / k) if k > 1 else np.array([])
        raw = np.searchsorted(cuts, medians[have], side="right")
        _, dense = np.unique(raw, return_inverse=True)
        orders[have] = dense
        rows = np.array([inst.box.center[1] for inst in instances])
        groups = np.unique(orders[have])
        centers = np.array([rows[have][orders[have] == g].mean() for g in groups])
        for i in np.flatnonzero(~have):
            orders[i] = groups[int(np.argmin(np.abs(centers - rows[i])))]
    return orders.tolist()


def group_by_order(instances, orders):
    groups: dict[int, list] = {}
    for inst, o in zip(instances, orders):
        groups.setdefault(int(o), []).append(inst)
    return [groups[o] for o in sorted(groups)]


def neighbor_fill(image: np.ndarray, hole: np.ndarray, smooth_iters: int = 32) -> np.ndarray:
    """Inpaint ``hole`` by iterative averaging of known 4-neighbors (wrap in u)."""
    img = np.asarray(image, dtype=np.float64).copy()
    hole = np.asarray(hole, dtype=bool)
    if not hole.any():
        return img
    known = ~hole
    if not known.any():
        img[hole] = 0.0
        return img
    chan = img.shape[2:] if img.ndim == 3 else ()
    img[hole] = 0.0

    def neighbors(a):
        up = np.concatenate([a[:1], a[:-1]], axis=0)
        down = np.concatenate([a[1:], a[-1:]], axis=0)
        return up, down, np.roll(a, 1, axis=1), np.roll(a, -1, axis=1)

    while not known.all():
        kf = known.astype(np.float64)
        wsum = sum(neighbors(kf))
        vals = img * (kf[..., None] if chan else kf)
        vsum = sum(neighbors(vals))
        new = ~known & (wsum > 0)
        if not new.any():
            break
        w = wsum[new][..., None] if chan else wsum[new]
        img[new] = vsum[new] / w
        known |= new
    for _ in range(smooth_iters):
        avg = sum(neighbors(img)) / 4.0
        img[hole] = avg[hole]
    return img


def _complete(provider, image, hole, workdir, flags, what):
    if provider is None:
        flags.append(f"synthetic-fill:{what}")
        return neighbor_fill(image[..., :3], hole)
    try:
        filled = providers.request_completion(provider, image, hole, workdir)
    except ProviderTimeout as exc:
        log.warning("%s completion timed out, falling back to neighbor fill: %s", what, exc)
        flags.append(f"provider-timeout:{what}")
        return neighbor_fill(image[..., :3], hole)
    out = np.asarray(image[..., :3], dtype=np.float64).copy()
    out[hole] = filled[hole]
    return out


def onion_peel(pano: np.ndarray, groups, completion=None, sky_completion=None,
               sky_mask=None, workdir=None) -> LayerStack:
    """Peel foreground groups nearest-first, completing the revealed holes.

    ``groups[k]`` lists the instances of foreground order k. Each foreground
    layer keeps the panorama as it was before its own removal; the last
    completed panorama becomes the background. With ``sky_mask`` the sky layer
    is the background completed over the non-sky region.
    """
    pano = np.asarray(pano, dtype=np.float64)
    H, W = pano.shape[:2]
    current = pano[..., :3].copy()
    completed = np.zeros((H, W), dtype=bool)
    layers = []
    for order, group in enumerate(groups):
        masks = [np.asarray(inst.mask, np.float64) for inst in group]
        for m in masks:
            if m.shape != (H, W):
                raise InvalidArgument("instance mask outside panorama bounds")
        mask = np.max(np.stack(masks), axis=0) if masks else np.zeros((H, W))
        layer = Layer(FOREGROUND, order, current.copy(), mask, instances=list(group),
                      completed=completed.copy())
        hole = mask > 0
        current = _complete(completion, current, hole, workdir, layer.flags, layer.name)
        completed |= hole
        layers.append(layer)
    if sky_mask is not None:
        sky_mask = np.clip(np.asarray(sky_mask, np.float64), 0.0, 1.0)
        bg_mask = 1.0 - sky_mask
    else:
        bg_mask = np.ones((H, W))
    background = Layer(BACKGROUND, len(layers), current.copy(), bg_mask, completed=completed.copy())
    layers.append(background)
    if sky_mask is not None:
        sky_hole = sky_mask < 0.5
        flags = []
        sky_img = _complete(sky_completion, current, sky_hole, workdir, flags, SKY)
        layers.append(Layer(SKY, len(layers), sky_img, sky_mask, completed=sky_hole, flags=flags))
    return LayerStack(pano, layers)


def detect_instances(pano: np.ndarray, labels, detector, segmenter, pad: int | None = None,
                     nms_thresh: float = 0.5, workdir=None):
    """Circularly padded detection and segmentation, folded back onto the panorama."""
    H, W = pano.shape[:2]
    pad = W // 8 if pad is None else pad
    padded = circular_pad(pano[..., :3], pad)
    dets = providers.request_detection(detector, padded, labels, workdir)
    if not dets:
        return []
    masks = providers.request_segmentation(segmenter, padded, [d["box"] for d in dets], workdir)
    instances = []
    for i, (det, pm) in enumerate(zip(dets, masks)):
        box = remap_padded_box(det["box"] + [det["score"]], pad, W)
        folded = np.zeros((H, W))
        cols = (np.arange(pm.shape[1]) - pad) % W
        for c in range(pm.shape[1]):
            np.maximum(folded[:, cols[c]], pm[:, c], out=folded[:, cols[c]])
        if folded.max() <= 0:
            continue
        instances.append(InstanceMask(i, det["label"], box, folded))
    instances = merge_seam_fragments(instances, W)
    return area_nms(instances, nms_thresh)
