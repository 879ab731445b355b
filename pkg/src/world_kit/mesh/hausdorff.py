"""Sampled symmetric Hausdorff distance between triangle meshes."""

import numpy as np
from scipy.spatial import cKDTree

from ..errors import InvalidArgument


def sample_surface(positions, faces, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the surface, plus every vertex."""
    rng = np.random.default_rng(seed)
    tri = positions[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    pick = rng.choice(len(faces), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = tri[pick]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return np.concatenate([pts, positions[np.unique(faces)]])


def point_triangle_distance(p, a, b, c):
    """Exact Euclidean distance from points p to triangles (a, b, c), all (N, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = vb / denom
        w = vc / denom
    closest = a + v[:, None] * ab + w[:, None] * ac
    # edge and vertex regions, applied in reverse priority
    with np.errstate(divide="ignore", invalid="ignore"):
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        t_ac = d2 / (d2 - d6)
        t_ab = d1 / (d1 - d3)
    r_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest = np.where(r_bc[:, None], b + t_bc[:, None] * (c - b), closest)
    r_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(r_ac[:, None], a + t_ac[:, None] * ac, closest)
    r_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(r_ab[:, None], a + t_ab[:, None] * ab, closest)
    closest = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, closest)
    closest = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, closest)
    closest = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, closest)
    return np.linalg.norm(p - closest, axis=1)


def distance_to_mesh(points, positions, faces, chunk: int = 4096) -> np.ndarray:
    """Distance from each point to the nearest triangle of a mesh.

    The nearest vertex bounds the answer; only triangles whose bounding sphere
    can beat that bound are tested exactly.
    """
    tri = positions[faces]
    cent = tri.mean(axis=1)
    rad = np.linalg.norm(tri - cent[:, None], axis=2).max(axis=1)
    rmax = float(rad.max())
    vtree = cKDTree(positions[np.unique(faces)])
    ctree = cKDTree(cent)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s: s + chunk]
        ub, _ = vtree.query(p)
        cand = ctree.query_ball_point(p, ub + rmax)
        lens = np.array([len(c) for c in cand])
        pi = np.repeat(np.arange(len(p)), lens)
        ti = np.concatenate([np.asarray(c, dtype=np.int64) for c in cand])
        d = point_triangle_distance(p[pi], tri[ti, 0], tri[ti, 1], tri[ti, 2])
        best = ub.copy()
        np.minimum.at(best, pi, d)
        out[s: s + chunk] = best
    return out


def hausdorff(a, b, samples: int = 20000, seed: int = 0) -> float:
    """Symmetric sampled Hausdorff distance between two meshes."""
    if samples < 1000:
        raise InvalidArgument("use at least 1000 samples")
    if a.n_triangles == 0 or b.n_triangles == 0:
        raise InvalidArgument("empty mesh")
    pa = sample_surface(a.positions, a.indices, samples, seed)
    pb = sample_surface(b.positions, b.indices, samples, seed + 1)
    return float(max(distance_to_mesh(pa, b.positions, b.indices).max(),
                     distance_to_mesh(pb, a.positions, a.indices).max()))
