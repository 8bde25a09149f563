"""Vectorized numpy backend: BVH segment queries and analytic ray tracing."""

from __future__ import annotations

import numpy as np

_TINY = 1e-30


def _seg_box(o, d, bmin, bmax):
    """Does the segment o -> o+d (t in [0,1]) touch each AABB? Vectorized."""
    dd = np.where(np.abs(d) < _TINY, _TINY, d)
    t0 = (bmin - o) / dd
    t1 = (bmax - o) / dd
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    return (tmax >= np.maximum(tmin, 0.0)) & (tmin <= 1.0)


def segment_hits(node_min, node_max, left, right, start, count, leaf_prims,
                 prim_min, prim_max, origins, targets):
    """All (source, primitive) pairs whose 3-sigma AABB the source's segment
    to its target touches. Level-synchronous BVH walk over every source at
    once; output canonically sorted by (source, primitive)."""
    n_src = origins.shape[0]
    if n_src == 0 or node_min.shape[0] == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    deltas = targets - origins
    src = np.arange(n_src, dtype=np.int64)
    node = np.zeros(n_src, dtype=np.int64)
    out_src, out_prim = [], []
    while src.size:
        hit = _seg_box(origins[src], deltas[src], node_min[node], node_max[node])
        src, node = src[hit], node[hit]
        if not src.size:
            break
        leaf = left[node] < 0
        if np.any(leaf):
            lsrc, lnode = src[leaf], node[leaf]
            cnt = count[lnode]
            total = int(cnt.sum())
            rep_src = np.repeat(lsrc, cnt)
            offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            prims = leaf_prims[np.repeat(start[lnode], cnt) + offs]
            keep = _seg_box(origins[rep_src], deltas[rep_src],
                            prim_min[prims], prim_max[prims])
            out_src.append(rep_src[keep])
            out_prim.append(prims[keep])
        inner = ~leaf
        isrc, inode = src[inner], node[inner]
        src = np.concatenate([isrc, isrc])
        node = np.concatenate([left[inode], right[inode]])
    if not out_src:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    s = np.concatenate(out_src)
    p = np.concatenate(out_prim)
    order = np.lexsort((p, s))
    return s[order], p[order]


# ---------------------------------------------------------------------------
# analytic scene ray tracing (spheres + discs)

def _sphere_t(o, d, center, radius, tmin, tmax):
    """Smallest hit parameter in (tmin, tmax) per ray, inf when missed."""
    oc = o - center
    b = np.sum(d * oc, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1 = -b - sq
    t2 = -b + sq
    t = np.where((t1 > tmin) & (t1 < tmax), t1,
                 np.where((t2 > tmin) & (t2 < tmax), t2, np.inf))
    return np.where(ok, t, np.inf)


def _disc_t(o, d, point, normal, radius, tmin, tmax):
    denom = np.sum(d * normal, axis=-1)
    dd = np.where(np.abs(denom) < _TINY, _TINY, denom)
    t = np.sum((point - o) * normal, axis=-1) / dd
    x = o + t[..., None] * d
    on_disc = np.sum((x - point) ** 2, axis=-1) <= radius * radius
    ok = (np.abs(denom) >= 1e-12) & (t > tmin) & (t < tmax) & on_disc
    return np.where(ok, t, np.inf)


def _nearest_hit(spheres, discs, o, d, tmin, tmax):
    n = o.shape[0]
    tbest = np.full(n, np.inf)
    pid = np.full(n, -1, dtype=np.int64)
    for i in range(spheres.shape[0]):
        t = _sphere_t(o, d, spheres[i, :3], spheres[i, 3], tmin, tmax)
        closer = t < tbest
        tbest = np.where(closer, t, tbest)
        pid = np.where(closer, i, pid)
    for j in range(discs.shape[0]):
        t = _disc_t(o, d, discs[j, :3], discs[j, 3:6], discs[j, 6], tmin, tmax)
        closer = t < tbest
        tbest = np.where(closer, t, tbest)
        pid = np.where(closer, spheres.shape[0] + j, pid)
    return tbest, pid


def _any_hit(spheres, discs, o, d, tmin, tmax):
    n = o.shape[0]
    blocked = np.zeros(n, dtype=bool)
    for i in range(spheres.shape[0]):
        blocked |= np.isfinite(_sphere_t(o, d, spheres[i, :3], spheres[i, 3], tmin, tmax))
    for j in range(discs.shape[0]):
        blocked |= np.isfinite(_disc_t(o, d, discs[j, :3], discs[j, 3:6],
                                       discs[j, 6], tmin, tmax))
    return blocked


def trace_rays(spheres, discs, ambient, diffuse, specular, shininess,
               origins, dirs, light_pos, light_color, shadow_eps=1e-4):
    """Blinn-Phong shaded nearest-hit colors with binary shadow rays.

    Primitive k's material lives at row k (spheres first, then discs).
    Background is black. Returns (R, 3) linear RGB.
    """
    n = origins.shape[0]
    color = np.zeros((n, 3))
    t, pid = _nearest_hit(spheres, discs, origins, dirs, 1e-6, np.inf)
    hit = pid >= 0
    if not np.any(hit):
        return color
    ho, hd, ht, hp = origins[hit], dirs[hit], t[hit], pid[hit]
    x = ho + ht[:, None] * hd

    nrm = np.zeros_like(x)
    s_count = spheres.shape[0]
    is_sphere = hp < s_count
    if np.any(is_sphere):
        c = spheres[hp[is_sphere], :3]
        r = spheres[hp[is_sphere], 3:4]
        nrm[is_sphere] = (x[is_sphere] - c) / r
    if np.any(~is_sphere):
        dn = discs[hp[~is_sphere] - s_count, 3:6]
        facing = np.sum(dn * hd[~is_sphere], axis=-1, keepdims=True)
        nrm[~is_sphere] = np.where(facing > 0, -dn, dn)

    to_light = light_pos - x
    r2 = np.sum(to_light * to_light, axis=-1)
    rlen = np.sqrt(r2)
    l = to_light / rlen[:, None]
    lit = ~_any_hit(spheres, discs, x, l, shadow_eps, rlen - shadow_eps)

    ndotl = np.maximum(np.sum(nrm * l, axis=-1), 0.0)
    v = -hd
    h_raw = v + l
    h_len = np.linalg.norm(h_raw, axis=-1, keepdims=True)
    h = h_raw / np.maximum(h_len, 1e-8)
    ndoth = np.maximum(np.sum(nrm * h, axis=-1), 0.0)
    ndoth = np.where(h_len[:, 0] < 1e-8, 0.0, ndoth)

    amb = ambient[hp]
    dif = diffuse[hp] * (ndotl / r2)[:, None]
    spe = (specular[hp] * ndoth ** shininess[hp] / r2)[:, None] * light_color
    color[hit] = amb + lit[:, None] * (dif + spe)
    return color
