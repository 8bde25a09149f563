"""Numba backend: the same queries as `npy`, JIT-compiled per ray."""

from __future__ import annotations

import numba
import numpy as np
from numba import njit

_TINY = 1e-30


@njit(cache=True, inline="always")
def _seg_box_one(ox, oy, oz, dx, dy, dz, bmin, bmax):
    tmin, tmax = 0.0, 1.0
    for k in range(3):
        d = dx if k == 0 else (dy if k == 1 else dz)
        o = ox if k == 0 else (oy if k == 1 else oz)
        if abs(d) < _TINY:
            d = _TINY
        t0 = (bmin[k] - o) / d
        t1 = (bmax[k] - o) / d
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > tmin:
            tmin = t0
        if t1 < tmax:
            tmax = t1
        if tmax < tmin:
            return False
    return True


@njit(cache=True)
def _segment_hits_jit(node_min, node_max, left, right, start, count, leaf_prims,
                      prim_min, prim_max, origins, targets):
    n_src = origins.shape[0]
    n_prim = leaf_prims.shape[0]
    cap = max(n_src * max(n_prim, 1), 1)
    out_src = np.empty(cap, np.int64)
    out_prim = np.empty(cap, np.int64)
    n_out = 0
    stack = np.empty(80, np.int64)
    for s in range(n_src):
        ox, oy, oz = origins[s, 0], origins[s, 1], origins[s, 2]
        dx = targets[s, 0] - ox
        dy = targets[s, 1] - oy
        dz = targets[s, 2] - oz
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            if not _seg_box_one(ox, oy, oz, dx, dy, dz,
                                node_min[node], node_max[node]):
                continue
            if left[node] < 0:
                for i in range(start[node], start[node] + count[node]):
                    p = leaf_prims[i]
                    if _seg_box_one(ox, oy, oz, dx, dy, dz,
                                    prim_min[p], prim_max[p]):
                        out_src[n_out] = s
                        out_prim[n_out] = p
                        n_out += 1
            else:
                stack[top] = left[node]
                top += 1
                stack[top] = right[node]
                top += 1
    return out_src[:n_out], out_prim[:n_out]


def segment_hits(node_min, node_max, left, right, start, count, leaf_prims,
                 prim_min, prim_max, origins, targets):
    s, p = _segment_hits_jit(
        np.ascontiguousarray(node_min), np.ascontiguousarray(node_max),
        left, right, start, count, leaf_prims,
        np.ascontiguousarray(prim_min), np.ascontiguousarray(prim_max),
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(targets, dtype=np.float64))
    order = np.lexsort((p, s))
    return s[order], p[order]


# ---------------------------------------------------------------------------
# analytic scene ray tracing

@njit(cache=True, inline="always")
def _sphere_t_one(ox, oy, oz, dx, dy, dz, cx, cy, cz, r, tmin, tmax):
    px, py, pz = ox - cx, oy - cy, oz - cz
    b = dx * px + dy * py + dz * pz
    c = px * px + py * py + pz * pz - r * r
    disc = b * b - c
    if disc < 0.0:
        return np.inf
    sq = np.sqrt(disc)
    t = -b - sq
    if tmin < t < tmax:
        return t
    t = -b + sq
    if tmin < t < tmax:
        return t
    return np.inf


@njit(cache=True, inline="always")
def _disc_t_one(ox, oy, oz, dx, dy, dz, px, py, pz, nx, ny, nz, rad, tmin, tmax):
    denom = dx * nx + dy * ny + dz * nz
    if abs(denom) < 1e-12:
        return np.inf
    t = ((px - ox) * nx + (py - oy) * ny + (pz - oz) * nz) / denom
    if not (tmin < t < tmax):
        return np.inf
    hx = ox + t * dx - px
    hy = oy + t * dy - py
    hz = oz + t * dz - pz
    if hx * hx + hy * hy + hz * hz > rad * rad:
        return np.inf
    return t


@njit(cache=True)
def _trace_jit(spheres, discs, ambient, diffuse, specular, shininess,
               origins, dirs, light_pos, light_color, shadow_eps):
    n = origins.shape[0]
    ns = spheres.shape[0]
    color = np.zeros((n, 3))
    for i in range(n):
        ox, oy, oz = origins[i, 0], origins[i, 1], origins[i, 2]
        dx, dy, dz = dirs[i, 0], dirs[i, 1], dirs[i, 2]
        tb = np.inf
        pid = -1
        for s in range(ns):
            t = _sphere_t_one(ox, oy, oz, dx, dy, dz, spheres[s, 0],
                              spheres[s, 1], spheres[s, 2], spheres[s, 3],
                              1e-6, tb)
            if t < tb:
                tb, pid = t, s
        for q in range(discs.shape[0]):
            t = _disc_t_one(ox, oy, oz, dx, dy, dz, discs[q, 0], discs[q, 1],
                            discs[q, 2], discs[q, 3], discs[q, 4], discs[q, 5],
                            discs[q, 6], 1e-6, tb)
            if t < tb:
                tb, pid = t, ns + q
        if pid < 0:
            continue
        hx, hy, hz = ox + tb * dx, oy + tb * dy, oz + tb * dz
        if pid < ns:
            r = spheres[pid, 3]
            nx = (hx - spheres[pid, 0]) / r
            ny = (hy - spheres[pid, 1]) / r
            nz = (hz - spheres[pid, 2]) / r
        else:
            nx, ny, nz = discs[pid - ns, 3], discs[pid - ns, 4], discs[pid - ns, 5]
            if nx * dx + ny * dy + nz * dz > 0.0:
                nx, ny, nz = -nx, -ny, -nz
        lx, ly, lz = light_pos[0] - hx, light_pos[1] - hy, light_pos[2] - hz
        r2 = lx * lx + ly * ly + lz * lz
        rlen = np.sqrt(r2)
        lx, ly, lz = lx / rlen, ly / rlen, lz / rlen
        lit = 1.0
        for s in range(ns):
            if np.isfinite(_sphere_t_one(hx, hy, hz, lx, ly, lz, spheres[s, 0],
                                         spheres[s, 1], spheres[s, 2],
                                         spheres[s, 3], shadow_eps,
                                         rlen - shadow_eps)):
                lit = 0.0
                break
        if lit > 0.0:
            for q in range(discs.shape[0]):
                if np.isfinite(_disc_t_one(hx, hy, hz, lx, ly, lz, discs[q, 0],
                                           discs[q, 1], discs[q, 2], discs[q, 3],
                                           discs[q, 4], discs[q, 5], discs[q, 6],
                                           shadow_eps, rlen - shadow_eps)):
                    lit = 0.0
                    break
        ndotl = nx * lx + ny * ly + nz * lz
        if ndotl < 0.0:
            ndotl = 0.0
        vx, vy, vz = -dx, -dy, -dz
        hvx, hvy, hvz = vx + lx, vy + ly, vz + lz
        hlen = np.sqrt(hvx * hvx + hvy * hvy + hvz * hvz)
        if hlen < 1e-8:
            ndoth = 0.0
        else:
            ndoth = (nx * hvx + ny * hvy + nz * hvz) / hlen
            if ndoth < 0.0:
                ndoth = 0.0
        difw = ndotl / r2
        spew = specular[pid] * ndoth ** shininess[pid] / r2
        for c in range(3):
            color[i, c] = ambient[pid, c] + lit * (diffuse[pid, c] * difw
                                                   + spew * light_color[c])
    return color


def trace_rays(spheres, discs, ambient, diffuse, specular, shininess,
               origins, dirs, light_pos, light_color, shadow_eps=1e-4):
    return _trace_jit(
        np.ascontiguousarray(spheres, dtype=np.float64).reshape(-1, 4),
        np.ascontiguousarray(discs, dtype=np.float64).reshape(-1, 7),
        np.ascontiguousarray(ambient, dtype=np.float64),
        np.ascontiguousarray(diffuse, dtype=np.float64),
        np.ascontiguousarray(specular, dtype=np.float64),
        np.ascontiguousarray(shininess, dtype=np.float64),
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(light_pos, dtype=np.float64),
        np.ascontiguousarray(light_color, dtype=np.float64),
        float(shadow_eps))
