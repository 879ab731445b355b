"""Quadric-error-metric edge-collapse decimation.

Garland-Heckbert quadrics with area-weighted face planes and heavily weighted
boundary constraint planes. Collapses are popped from a lazy min-heap keyed by
(cost, lower vertex, higher vertex) so ties resolve deterministically. A
collapse is rejected when it would break the link condition, pinch two
boundaries together, flip or degenerate a face, or move a pinned vertex.
"""

from __future__ import annotations

import heapq
import logging

import numpy as np
from numba import njit

from ..errors import InvalidArgument
from ..sheet_warp import GridMesh

log = logging.getLogger(__name__)

BOUNDARY_WEIGHT = 100.0
MIN_AREA = 1e-12
MIN_NORMAL_COS = 0.2


@njit(cache=True, nogil=True)
def _add_plane(Q, v, n0, n1, n2, d, w):
    Q[v, 0] += w * n0 * n0
    Q[v, 1] += w * n0 * n1
    Q[v, 2] += w * n0 * n2
    Q[v, 3] += w * n0 * d
    Q[v, 4] += w * n1 * n1
    Q[v, 5] += w * n1 * n2
    Q[v, 6] += w * n1 * d
    Q[v, 7] += w * n2 * n2
    Q[v, 8] += w * n2 * d
    Q[v, 9] += w * d * d


@njit(cache=True, nogil=True)
def _qerr(q, x, y, z):
    return (q[0] * x * x + 2 * q[1] * x * y + 2 * q[2] * x * z + 2 * q[3] * x
            + q[4] * y * y + 2 * q[5] * y * z + 2 * q[6] * y
            + q[7] * z * z + 2 * q[8] * z + q[9])


@njit(cache=True, nogil=True)
def _edge_target(Q, P, pinned, i, j, out):
    """Optimal collapse position for edge (i, j) written to out; returns cost."""
    q = Q[i] + Q[j]
    if pinned[i] or pinned[j]:
        k = i if pinned[i] else j
        out[0], out[1], out[2] = P[k, 0], P[k, 1], P[k, 2]
        return max(_qerr(q, out[0], out[1], out[2]), 0.0)
    a00, a01, a02 = q[0], q[1], q[2]
    a11, a12, a22 = q[4], q[5], q[7]
    b0, b1, b2 = -q[3], -q[6], -q[8]
    c00 = a11 * a22 - a12 * a12
    c01 = a02 * a12 - a01 * a22
    c02 = a01 * a12 - a02 * a11
    det = a00 * c00 + a01 * c01 + a02 * c02
    tr = (a00 + a11 + a22) / 3.0
    ex = P[j, 0] - P[i, 0]
    ey = P[j, 1] - P[i, 1]
    ez = P[j, 2] - P[i, 2]
    elen2 = ex * ex + ey * ey + ez * ez
    if tr > 0 and abs(det) > 1e-9 * tr * tr * tr:
        c11 = a00 * a22 - a02 * a02
        c12 = a01 * a02 - a00 * a12
        c22 = a00 * a11 - a01 * a01
        x = (c00 * b0 + c01 * b1 + c02 * b2) / det
        y = (c01 * b0 + c11 * b1 + c12 * b2) / det
        z = (c02 * b0 + c12 * b1 + c22 * b2) / det
        mx = 0.5 * (P[i, 0] + P[j, 0]) - x
        my = 0.5 * (P[i, 1] + P[j, 1]) - y
        mz = 0.5 * (P[i, 2] + P[j, 2]) - z
        if mx * mx + my * my + mz * mz <= 4.0 * elen2:
            out[0], out[1], out[2] = x, y, z
            return max(_qerr(q, x, y, z), 0.0)
    best = np.inf
    for t in (0.0, 1.0, 0.5):
        x = P[i, 0] + t * ex
        y = P[i, 1] + t * ey
        z = P[i, 2] + t * ez
        e = _qerr(q, x, y, z)
        if e < best - 1e-300:
            best = e
            out[0], out[1], out[2] = x, y, z
    return max(best, 0.0)


@njit(cache=True, nogil=True)
def _compact_list(v, head, nxt, tail, alive_f):
    c = head[v]
    prev = -1
    head[v] = -1
    while c != -1:
        nc = nxt[c]
        if alive_f[c // 3]:
            if prev == -1:
                head[v] = c
            else:
                nxt[prev] = c
            prev = c
        c = nc
    if prev != -1:
        nxt[prev] = -1
    tail[v] = prev


@njit(cache=True, nogil=True)
def _tri_normal(ax, ay, az, bx, by, bz, cx, cy, cz):
    ux, uy, uz = bx - ax, by - ay, bz - az
    vx, vy, vz = cx - ax, cy - ay, cz - az
    return uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx


@njit(cache=True, nogil=True)
def _add_boundary_planes(P, F, Q, be_i, be_j, be_f):
    for e in range(be_i.shape[0]):
        i, j, f = be_i[e], be_j[e], be_f[e]
        a, b, c = F[f, 0], F[f, 1], F[f, 2]
        n0, n1, n2 = _tri_normal(P[a, 0], P[a, 1], P[a, 2], P[b, 0], P[b, 1], P[b, 2],
                                 P[c, 0], P[c, 1], P[c, 2])
        ex, ey, ez = P[j, 0] - P[i, 0], P[j, 1] - P[i, 1], P[j, 2] - P[i, 2]
        m0 = ey * n2 - ez * n1
        m1 = ez * n0 - ex * n2
        m2 = ex * n1 - ey * n0
        lm = np.sqrt(m0 * m0 + m1 * m1 + m2 * m2)
        if lm <= 0:
            continue
        m0, m1, m2 = m0 / lm, m1 / lm, m2 / lm
        d = -(m0 * P[i, 0] + m1 * P[i, 1] + m2 * P[i, 2])
        w = BOUNDARY_WEIGHT * (ex * ex + ey * ey + ez * ez)
        _add_plane(Q, i, m0, m1, m2, d, w)
        _add_plane(Q, j, m0, m1, m2, d, w)


@njit(cache=True, nogil=True)
def _run(P, F, UVA, pinned, boundary, target, Q, alive_f, alive_v, head, tail, nxt):
    nv = P.shape[0]
    nf = F.shape[0]
    stamp = np.zeros(nv, np.int64)
    mark = np.zeros(nv, np.int64)
    mark_id = 0
    tmp = np.zeros(3)
    heap = [(0.0, np.int64(0), np.int64(0), np.int64(0), np.int64(0))]
    heap.pop()
    for f in range(nf):
        for k in range(3):
            i = F[f, k]
            j = F[f, (k + 1) % 3]
            if i > j:
                i, j = j, i
            if pinned[i] and pinned[j]:
                continue
            cost = _edge_target(Q, P, pinned, i, j, tmp)
            heap.append((cost, i, j, np.int64(0), np.int64(0)))
    heapq.heapify(heap)
    faces = nf
    shared = np.zeros(2, np.int64)
    opp = np.zeros(2, np.int64)
    newp = np.zeros(3)
    while faces > target and len(heap) > 0:
        cost, i, j, si, sj = heapq.heappop(heap)
        if not (alive_v[i] and alive_v[j]) or stamp[i] != si or stamp[j] != sj:
            continue
        # faces sharing the edge and their opposite vertices
        ns = 0
        bad = False
        c = head[i]
        while c != -1:
            f = c // 3
            if alive_f[f]:
                has_j = False
                o = -1
                for k in range(3):
                    v = F[f, k]
                    if v == j:
                        has_j = True
                    elif v != i:
                        o = v
                if has_j:
                    if ns >= 2:
                        bad = True
                        break
                    shared[ns] = f
                    opp[ns] = o
                    ns += 1
            c = nxt[c]
        if bad or ns == 0:
            continue
        if ns == 2 and boundary[i] and boundary[j]:
            continue
        # link condition
        mark_id += 1
        c = head[i]
        while c != -1:
            f = c // 3
            if alive_f[f]:
                for k in range(3):
                    mark[F[f, k]] = mark_id
            c = nxt[c]
        mark_id += 1
        common = 0
        c = head[j]
        while c != -1:
            f = c // 3
            if alive_f[f]:
                for k in range(3):
                    v = F[f, k]
                    if v != i and v != j and mark[v] == mark_id - 1:
                        mark[v] = mark_id
                        common += 1
            c = nxt[c]
        if common != ns:
            continue
        keep, drop = i, j
        if pinned[j] and not pinned[i]:
            keep, drop = j, i
        _edge_target(Q, P, pinned, i, j, newp)
        # flip / degeneracy test on faces that survive
        ok = True
        for side in range(2):
            v = keep if side == 0 else drop
            c = head[v]
            while c != -1 and ok:
                f = c // 3
                if alive_f[f] and f != shared[0] and (ns < 2 or f != shared[1]):
                    a, b, cc = F[f, 0], F[f, 1], F[f, 2]
                    o0, o1, o2 = _tri_normal(P[a, 0], P[a, 1], P[a, 2], P[b, 0], P[b, 1], P[b, 2],
                                             P[cc, 0], P[cc, 1], P[cc, 2])
                    q = np.empty((3, 3))
                    for k in range(3):
                        w = F[f, k]
                        if w == i or w == j:
                            q[k, 0], q[k, 1], q[k, 2] = newp[0], newp[1], newp[2]
                        else:
                            q[k, 0], q[k, 1], q[k, 2] = P[w, 0], P[w, 1], P[w, 2]
                    m0, m1, m2 = _tri_normal(q[0, 0], q[0, 1], q[0, 2], q[1, 0], q[1, 1], q[1, 2],
                                             q[2, 0], q[2, 1], q[2, 2])
                    lo = np.sqrt(o0 * o0 + o1 * o1 + o2 * o2)
                    lm = np.sqrt(m0 * m0 + m1 * m1 + m2 * m2)
                    if 0.5 * lm <= MIN_AREA:
                        ok = False
                    elif lo > 0 and (o0 * m0 + o1 * m1 + o2 * m2) < MIN_NORMAL_COS * lo * lm:
                        ok = False
                c = nxt[c]
        if not ok:
            continue
        # attribute interpolation along the edge
        ex = P[drop, 0] - P[keep, 0]
        ey = P[drop, 1] - P[keep, 1]
        ez = P[drop, 2] - P[keep, 2]
        el = ex * ex + ey * ey + ez * ez
        t = 0.0
        if el > 0 and not pinned[keep]:
            t = ((newp[0] - P[keep, 0]) * ex + (newp[1] - P[keep, 1]) * ey
                 + (newp[2] - P[keep, 2]) * ez) / el
            t = min(max(t, 0.0), 1.0)
        for k in range(UVA.shape[1]):
            UVA[keep, k] = (1.0 - t) * UVA[keep, k] + t * UVA[drop, k]
        P[keep, 0], P[keep, 1], P[keep, 2] = newp[0], newp[1], newp[2]
        for k in range(10):
            Q[keep, k] += Q[drop, k]
        for s in range(ns):
            alive_f[shared[s]] = False
        faces -= ns
        c = head[drop]
        while c != -1:
            f = c // 3
            if alive_f[f]:
                F[f, c % 3] = keep
            c = nxt[c]
        if head[drop] != -1:
            if head[keep] == -1:
                head[keep] = head[drop]
            else:
                nxt[tail[keep]] = head[drop]
            tail[keep] = tail[drop]
        head[drop] = -1
        alive_v[drop] = False
        boundary[keep] = boundary[keep] or boundary[drop]
        pinned[keep] = pinned[keep] or pinned[drop]
        _compact_list(keep, head, nxt, tail, alive_f)
        stamp[keep] += 1
        mark_id += 1
        c = head[keep]
        while c != -1:
            f = c // 3
            for k in range(3):
                v = F[f, k]
                if v != keep and mark[v] != mark_id:
                    mark[v] = mark_id
                    if pinned[v] and pinned[keep]:
                        continue
                    a, b = (keep, v) if keep < v else (v, keep)
                    cst = _edge_target(Q, P, pinned, a, b, tmp)
                    heapq.heappush(heap, (cst, a, b, stamp[a], stamp[b]))
            c = nxt[c]
    return alive_f


def _edge_topology(F: np.ndarray, nv: int):
    e = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
    fid = np.tile(np.arange(len(F)), 3)
    lo = np.minimum(e[:, 0], e[:, 1])
    hi = np.maximum(e[:, 0], e[:, 1])
    key = lo * nv + hi
    order = np.argsort(key, kind="stable")
    ks = key[order]
    _, counts = np.unique(ks, return_counts=True)
    per_edge = np.repeat(counts, counts)
    return e[order], fid[order], per_edge


def decimate_qem(m: GridMesh, target_ratio: float, preserve=("seam",)) -> GridMesh:
    """Collapse edges by increasing quadric error until at most
    ``target_ratio`` of the triangles remain.

    ``preserve`` may contain ``"seam"`` (vertices flagged ``m.seam`` keep their
    exact position) and ``"boundary"`` (every open-boundary vertex is pinned).
    Vertices on non-manifold edges are always pinned.
    """
    if not 0 < target_ratio < 1:
        raise InvalidArgument("target_ratio must be in (0, 1)")
    nf = m.n_triangles
    target = int(np.floor(target_ratio * nf))
    if target < 4:
        log.warning("decimation target %d below 4 triangles; clamped to 4", target)
        target = 4
    if nf <= target:
        return _copy(m)
    P = m.positions.astype(np.float64).copy()
    F = m.indices.astype(np.int64).copy()
    nv = len(P)
    e, fid, per_edge = _edge_topology(F, nv)
    bmask = per_edge == 1
    boundary = np.zeros(nv, np.bool_)
    boundary[e[bmask].ravel()] = True
    pinned = np.zeros(nv, np.bool_)
    pinned[e[per_edge > 2].ravel()] = True
    preserve = set(preserve or ())
    if "seam" in preserve:
        pinned |= m.seam
    if "boundary" in preserve:
        pinned |= boundary
    UVA = np.concatenate([m.uv, m.alpha[:, None]], axis=1).astype(np.float64)
    alive_f = _decimate_with_boundary(P, F, UVA, pinned, boundary, target,
                                      e[bmask, 0], e[bmask, 1], fid[bmask])
    faces = F[alive_f]
    used = np.zeros(nv, bool)
    used[faces.ravel()] = True
    remap = np.cumsum(used) - 1
    seam = m.seam[used] if m.seam is not None else None
    return GridMesh(P[used], UVA[used, :2], UVA[used, 2], remap[faces], m.layer_id,
                    m.texture_ref, seam, None)


@njit(cache=True, nogil=True)
def _decimate_with_boundary(P, F, UVA, pinned, boundary, target, be_i, be_j, be_f):
    nv = P.shape[0]
    nf = F.shape[0]
    Q = np.zeros((nv, 10))
    alive_f = np.ones(nf, np.bool_)
    alive_v = np.ones(nv, np.bool_)
    head = -np.ones(nv, np.int64)
    tail = -np.ones(nv, np.int64)
    nxt = -np.ones(3 * nf, np.int64)
    for f in range(nf):
        for k in range(3):
            v = F[f, k]
            c = 3 * f + k
            if head[v] == -1:
                head[v] = c
            else:
                nxt[tail[v]] = c
            tail[v] = c
        a, b, c = F[f, 0], F[f, 1], F[f, 2]
        n0, n1, n2 = _tri_normal(P[a, 0], P[a, 1], P[a, 2], P[b, 0], P[b, 1], P[b, 2],
                                 P[c, 0], P[c, 1], P[c, 2])
        ln = np.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
        if ln <= 0:
            continue
        n0, n1, n2 = n0 / ln, n1 / ln, n2 / ln
        d = -(n0 * P[a, 0] + n1 * P[a, 1] + n2 * P[a, 2])
        w = 0.5 * ln
        _add_plane(Q, a, n0, n1, n2, d, w)
        _add_plane(Q, b, n0, n1, n2, d, w)
        _add_plane(Q, c, n0, n1, n2, d, w)
    _add_boundary_planes(P, F, Q, be_i, be_j, be_f)
    return _run(P, F, UVA, pinned, boundary, target, Q, alive_f, alive_v, head, tail, nxt)


def _copy(m: GridMesh) -> GridMesh:
    return GridMesh(m.positions.copy(), m.uv.copy(), m.alpha.copy(), m.indices.copy(),
                    m.layer_id, m.texture_ref, m.seam.copy(),
                    None if m.grid_ij is None else m.grid_ij.copy())
