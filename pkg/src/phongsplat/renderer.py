"""Software splatting: perspective projection of 3-D Gaussians and
front-to-back alpha compositing into image buffers.

The rasterizer works on a flat pair list (splat, pixel) restricted to each
splat's 3-sigma footprint. Per-pixel transmittances come from a cumulative
sum of log(1 - alpha) over the depth-sorted pairs of that pixel, which keeps
the telescoping identity sum(T_i a_i) + T_final = 1 tight in float64.
Differentiable when the inputs are taped; plain numpy otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .scene import Camera, covariance

NEAR_PLANE = 0.01
COV_REGULARIZATION = 0.3   # pixel^2 added to the projected covariance diagonal
ALPHA_CLAMP = 0.999
MIN_ALPHA = 1.0 / 255.0
CUTOFF_SIGMA_SQ = 9.0      # contributions beyond 3 sigma are dropped


class RasterizeError(RuntimeError):
    pass


@dataclass
class Splat2D:
    mean: np.ndarray      # (2,) pixel coordinates
    cov: np.ndarray       # (2,2) projected covariance, before regularization
    depth: float          # camera-space z, world units
    point_id: int
    opacity: float


@dataclass
class FrameBuffers:
    composite: np.ndarray          # (H,W,3)
    ambient: np.ndarray            # (H,W,3)
    diffuse: np.ndarray            # (H,W,3)
    specular: np.ndarray           # (H,W,3)
    depth: np.ndarray              # (H,W)
    normal: np.ndarray             # (H,W,3)
    alpha: np.ndarray              # (H,W) accumulated sum(T_i a_i)
    final_transmittance: np.ndarray  # (H,W) product of (1 - a_i)


@dataclass
class Projection:
    """Vectorized projection of all points for one camera."""

    mean2d: object        # (N,2)
    cov2d: object         # (N,2,2) raw
    depth: object         # (N,)
    valid: np.ndarray     # (N,) bool, False = culled behind the near plane


def project(positions, rotations, log_scales, camera: Camera) -> Projection:
    R = camera.rotation
    t = camera.translation
    cam = ad.add(ad.matmul(positions, R.T), t)      # (N,3) camera space
    tx = ad.take(cam, [0], axis=1)
    ty = ad.take(cam, [1], axis=1)
    tz = ad.take(cam, [2], axis=1)
    depth = ad.reshape(tz, (np.shape(ad.val(positions))[0],))
    valid = np.asarray(ad.val(depth)) > NEAR_PLANE

    u = ad.add(ad.mul(camera.fx, ad.div(tx, tz)), camera.cx)
    v = ad.add(ad.mul(camera.fy, ad.div(ty, tz)), camera.cy)
    mean2d = ad.concatenate([u, v], axis=1)

    sigma = covariance(rotations, log_scales)       # (N,3,3) world
    sigma_cam = ad.matmul(ad.matmul(R, sigma), R.T)

    # local affine jacobian of the perspective map at each camera-space point
    inv_z = ad.div(1.0, tz)
    inv_z2 = ad.mul(inv_z, inv_z)
    zero = ad.mul(0.0, inv_z)
    row0 = ad.concatenate([ad.mul(camera.fx, inv_z), zero,
                           ad.neg(ad.mul(camera.fx, ad.mul(tx, inv_z2)))], axis=1)
    row1 = ad.concatenate([zero, ad.mul(camera.fy, inv_z),
                           ad.neg(ad.mul(camera.fy, ad.mul(ty, inv_z2)))], axis=1)
    J = ad.stack([row0, row1], axis=1)              # (N,2,3)
    cov2d = ad.matmul(ad.matmul(J, sigma_cam), ad.swap_last2(J))
    return Projection(mean2d, cov2d, depth, valid)


def project_gaussian(point, camera: Camera):
    """Project one Gaussian; returns a Splat2D, or None when culled."""
    proj = project(point.position[None, :], point.rotation[None, :],
                   point.log_scale[None, :], camera)
    if not proj.valid[0]:
        return None
    return Splat2D(mean=np.asarray(ad.val(proj.mean2d))[0],
                   cov=np.asarray(ad.val(proj.cov2d))[0],
                   depth=float(ad.val(proj.depth)[0]),
                   point_id=0,
                   opacity=float(ad.val(point.opacity)) if hasattr(point, "opacity") else 1.0)


def _pair_plan(mean2d, cov_reg, depth, opacity, ids, H, W):
    """Raw bookkeeping: depth sort, footprints, and the kept (splat,pixel) pairs."""
    order = np.lexsort((ids, depth))
    u, v = mean2d[order, 0], mean2d[order, 1]
    c00, c01, c11 = cov_reg[order, 0, 0], cov_reg[order, 0, 1], cov_reg[order, 1, 1]
    det = c00 * c11 - c01 * c01
    if np.any(det <= 0):
        bad = ids[order][det <= 0][0]
        raise RasterizeError(f"singular projected covariance for point {bad}")
    ia, ib, ic = c11 / det, -c01 / det, c00 / det

    rx = 3.0 * np.sqrt(c00)
    ry = 3.0 * np.sqrt(c11)
    x0 = np.maximum(np.ceil(u - rx - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(u + rx - 0.5), W - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(v - ry - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(v + ry - 0.5), H - 1).astype(np.int64)
    wx = np.maximum(x1 - x0 + 1, 0)
    wy = np.maximum(y1 - y0 + 1, 0)
    counts = wx * wy

    total = int(counts.sum())
    if total == 0:
        return order, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64)
    s_idx = np.repeat(np.arange(order.size), counts)
    offset = np.arange(total) - np.repeat(np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
    px = x0[s_idx] + offset % np.maximum(wx[s_idx], 1)
    py = y0[s_idx] + offset // np.maximum(wx[s_idx], 1)

    dx = (px + 0.5) - u[s_idx]
    dy = (py + 0.5) - v[s_idx]
    q = ia[s_idx] * dx * dx + 2.0 * ib[s_idx] * dx * dy + ic[s_idx] * dy * dy
    a_raw = opacity[order][s_idx] * np.exp(-0.5 * q)
    keep = (q <= CUTOFF_SIGMA_SQ) & (a_raw >= MIN_ALPHA)

    s_idx, px, py = s_idx[keep], px[keep], py[keep]
    pix = py * W + px
    sub = np.lexsort((s_idx, pix))  # pixel-major, front-to-back inside a pixel
    return order, s_idx[sub], pix[sub], np.flatnonzero(keep)[sub]


def rasterize_arrays(mean2d, cov2d, depth, opacity, channels: dict, H: int, W: int,
                     background=(0.0, 0.0, 0.0), point_ids=None,
                     valid=None) -> FrameBuffers:
    """Blend per-point channels into image buffers.

    channels maps names from {"ambient","diffuse","specular","color","normal"}
    to (N,3) per-point values; the composite is the sum of the shading
    components (or "color" when given pre-composed) over black, plus
    (1 - A) * background.
    """
    n = np.shape(ad.val(depth))[0]
    ids = np.arange(n) if point_ids is None else np.asarray(point_ids)
    if valid is None:
        valid = np.ones(n, dtype=bool)
    background = np.asarray(background, dtype=np.float64)

    raw_mean = np.asarray(ad.val(mean2d), dtype=np.float64)[valid]
    raw_cov = np.asarray(ad.val(cov2d), dtype=np.float64)[valid].copy()
    raw_cov[:, 0, 0] += COV_REGULARIZATION
    raw_cov[:, 1, 1] += COV_REGULARIZATION
    raw_depth = np.asarray(ad.val(depth), dtype=np.float64)[valid]
    raw_opacity = np.asarray(ad.val(opacity), dtype=np.float64)[valid]

    vidx = np.flatnonzero(valid)
    order, pair_s, pair_pix, _ = _pair_plan(raw_mean, raw_cov, raw_depth,
                                            raw_opacity, ids[valid], H, W)
    gidx = vidx[order]            # sorted-splat -> original point index
    pair_g = gidx[pair_s]         # pair -> original point index
    ad.log_structure("raster_plan", np.concatenate([gidx, pair_g, pair_pix]))

    P = H * W
    zeros_img = np.zeros((H, W, 3))
    if pair_pix.size == 0:
        comp = np.broadcast_to(background, (H, W, 3)).copy()
        return FrameBuffers(composite=comp, ambient=zeros_img.copy(),
                            diffuse=zeros_img.copy(), specular=zeros_img.copy(),
                            depth=np.zeros((H, W)), normal=zeros_img.copy(),
                            alpha=np.zeros((H, W)),
                            final_transmittance=np.ones((H, W)))

    # taped per-pair math (mirrors the plan's raw arithmetic exactly)
    mu = ad.take(mean2d, pair_g, axis=0)
    cov_p = ad.take(ad.reshape(cov2d, (n, 4)), pair_g, axis=0)
    c00 = ad.add(ad.reshape(ad.take(cov_p, [0], axis=1), (-1,)), COV_REGULARIZATION)
    c01 = ad.reshape(ad.take(cov_p, [1], axis=1), (-1,))
    c11 = ad.add(ad.reshape(ad.take(cov_p, [3], axis=1), (-1,)), COV_REGULARIZATION)
    det = ad.sub(ad.mul(c00, c11), ad.mul(c01, c01))
    px = (pair_pix % W) + 0.5
    py = (pair_pix // W) + 0.5
    dx = ad.sub(px, ad.reshape(ad.take(mu, [0], axis=1), (-1,)))
    dy = ad.sub(py, ad.reshape(ad.take(mu, [1], axis=1), (-1,)))
    quad = ad.div(ad.add(ad.sub(ad.mul(ad.mul(c11, dx), dx),
                                ad.mul(2.0, ad.mul(ad.mul(c01, dx), dy))),
                         ad.mul(ad.mul(c00, dy), dy)), det)
    weight = ad.exp(ad.mul(-0.5, quad))
    alpha = ad.minimum(ad.mul(ad.take(opacity, pair_g, axis=0), weight), ALPHA_CLAMP)
    lg = ad.log(ad.sub(1.0, alpha))

    # exclusive prefix of log-transmittance inside each pixel's pair run
    change = np.diff(pair_pix, prepend=-1) != 0
    starts = np.flatnonzero(change)
    rank = np.arange(pair_pix.size) - starts[np.cumsum(change) - 1]
    kmax = int(rank.max()) + 1
    slot = pair_pix * kmax + rank
    padded = ad.reshape(ad.scatter_add(lg, slot, P * kmax), (P, kmax))
    prefix_inc = ad.cumsum(padded, axis=1)
    prefix_exc = ad.sub(prefix_inc, padded)
    T_pair = ad.exp(ad.take(ad.reshape(prefix_exc, (P * kmax,)), slot))
    wgt = ad.mul(T_pair, alpha)

    acc_alpha = ad.scatter_add(wgt, pair_pix, P)
    t_final = ad.exp(ad.scatter_add(lg, pair_pix, P))

    def blend3(per_point):
        per_pair = ad.take(per_point, pair_g, axis=0)
        col = ad.mul(ad.reshape(wgt, (-1, 1)), per_pair)
        return ad.reshape(ad.scatter_add(col, pair_pix, P, axis=0), (H, W, 3))

    out = {}
    for name in ("ambient", "diffuse", "specular", "color", "normal"):
        out[name] = blend3(channels[name]) if name in channels else None

    if out["color"] is not None:
        fg = out["color"]
    else:
        fg = zeros_img.copy()
        for part in ("ambient", "diffuse", "specular"):
            if out[part] is not None:
                fg = ad.add(fg, out[part])
    bg_term = ad.mul(ad.reshape(ad.sub(1.0, acc_alpha), (H, W, 1)), background)
    composite = ad.add(fg, bg_term)

    d_pair = ad.take(depth, pair_g, axis=0)
    d_img = ad.scatter_add(ad.mul(wgt, d_pair), pair_pix, P)
    alpha_img = ad.reshape(acc_alpha, (H, W))
    depth_img = ad.reshape(ad.div(d_img, ad.maximum(acc_alpha, 1e-8)), (H, W))

    def or_zeros(x):
        return zeros_img.copy() if x is None else x

    return FrameBuffers(
        composite=composite,
        ambient=or_zeros(out["ambient"]),
        diffuse=or_zeros(out["diffuse"]),
        specular=or_zeros(out["specular"]),
        depth=depth_img,
        normal=or_zeros(out["normal"]),
        alpha=alpha_img,
        final_transmittance=ad.reshape(t_final, (H, W)),
    )


def rasterize(splats: list[Splat2D], colors, camera: Camera,
              background=(0.0, 0.0, 0.0), components: dict | None = None,
              normals=None) -> FrameBuffers:
    """Blend an explicit splat list (spec-facing wrapper over the array core)."""
    if colors is not None and len(splats) != len(colors):
        raise ValueError("one color per splat required")
    if not splats:
        return rasterize_arrays(np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0),
                                np.zeros(0), {}, camera.height, camera.width,
                                background)
    mean2d = np.stack([s.mean for s in splats])
    cov2d = np.stack([s.cov for s in splats])
    depth = np.array([s.depth for s in splats])
    opacity = np.array([s.opacity for s in splats])
    ids = np.array([s.point_id for s in splats])
    channels = {} if components is None else dict(components)
    if colors is not None and components is None:
        channels["color"] = np.asarray(colors, dtype=np.float64)
    if normals is not None:
        channels["normal"] = normals
    return rasterize_arrays(mean2d, cov2d, depth, opacity, channels,
                            camera.height, camera.width, background,
                            point_ids=ids)


def depth_to_pseudo_normal(depth, camera: Camera, alpha=None,
                           alpha_threshold: float = 0.05):
    """Camera-space unit normals from back-projected depth, via central
    differences; returns (normals, valid_mask)."""
    H, W = camera.height, camera.width
    us = (np.arange(W) + 0.5 - camera.cx) / camera.fx
    vs = (np.arange(H) + 0.5 - camera.cy) / camera.fy

    X = ad.mul(depth, us[None, :])
    Y = ad.mul(depth, vs[:, None])
    Z = depth

    jp = np.minimum(np.arange(W) + 1, W - 1)
    jm = np.maximum(np.arange(W) - 1, 0)
    ip = np.minimum(np.arange(H) + 1, H - 1)
    im = np.maximum(np.arange(H) - 1, 0)

    def ddx(M):
        return ad.sub(ad.take(M, jp, axis=1), ad.take(M, jm, axis=1))

    def ddy(M):
        return ad.sub(ad.take(M, ip, axis=0), ad.take(M, im, axis=0))

    ax, ay, az = ddx(X), ddx(Y), ddx(Z)
    bx, by, bz = ddy(X), ddy(Y), ddy(Z)
    nx = ad.sub(ad.mul(ay, bz), ad.mul(az, by))
    ny = ad.sub(ad.mul(az, bx), ad.mul(ax, bz))
    nz = ad.sub(ad.mul(ax, by), ad.mul(ay, bx))
    n = ad.stack([nx, ny, nz], axis=-1)

    # orient toward the camera: flip where n agrees with the outgoing ray
    p = np.stack([ad.val(X), ad.val(Y), np.broadcast_to(ad.val(Z), (H, W))], axis=-1)
    outgoing = np.sum(ad.val(n) * p, axis=-1) > 0.0
    ad.log_structure("pseudo_normal_flip", outgoing)
    sign = np.where(outgoing, -1.0, 1.0)
    n = ad.mul(n, sign[..., None])
    # clamp inside the sqrt: sqrt(0) would poison the backward pass
    n2 = ad.sum_(ad.mul(n, n), axis=-1)
    n = ad.div(n, ad.reshape(ad.sqrt(ad.maximum(n2, 1e-16)), (H, W, 1)))

    if alpha is None:
        valid = np.ones((H, W), dtype=bool)
    else:
        valid = np.asarray(ad.val(alpha)) > alpha_threshold
    ad.log_structure("pseudo_normal_valid", valid)
    return n, valid
