"""Light-visibility ray tracing: per-Gaussian transmittance toward the light.

Each Gaussian occludes shadow rays with strength alpha = opacity * phi *
exp(-q/2), where q is the squared Mahalanobis distance of the ray's closest
approach to the Gaussian center and phi is the learnable shadow coefficient.
phi modulates the Gaussian as an occluder only; camera-side compositing
never sees it. Occluders count only when the closest approach lies strictly
inside the source-to-light segment and within the 3-sigma ellipsoid (the
same cutoff the rasterizer uses, and what makes BVH pruning exact).

A median-split BVH over 3-sigma AABBs accelerates the candidate search; the
hit set is discrete, gradients flow through the alpha values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels
from .scene import GaussianPoint, PointLight, covariance, points_to_params, quat_to_rot
from .params import ParamSet, SceneView

MAX_LEAF_SIZE = 4   # audited bound; splits run to singletons above the depth cap
MAX_DEPTH = 64
SEGMENT_EPS = 1e-4
CUTOFF_SIGMA_SQ = 9.0


@dataclass
class Bvh:
    node_min: np.ndarray   # (M,3)
    node_max: np.ndarray   # (M,3)
    left: np.ndarray       # (M,) child index, -1 for leaves
    right: np.ndarray      # (M,)
    start: np.ndarray      # (M,) leaf range start into prim_ids
    count: np.ndarray      # (M,) leaf range length
    prim_ids: np.ndarray   # (N,)
    prim_min: np.ndarray   # (N,3) per-Gaussian 3-sigma AABB
    prim_max: np.ndarray   # (N,3)

    @property
    def n_nodes(self):
        return self.node_min.shape[0]


def _as_arrays(points):
    if isinstance(points, ParamSet):
        ps = points
    else:
        ps = points_to_params(list(points))
    return ps


def gaussian_aabbs(positions, rotations, log_scales):
    """World-axis AABBs of the 3-sigma ellipsoids: half-extent 3*sqrt(diag(Sigma))."""
    cov = np.asarray(ad.val(covariance(rotations, log_scales)))
    half = 3.0 * np.sqrt(np.maximum(np.diagonal(cov, axis1=-2, axis2=-1), 0.0))
    centers = np.asarray(ad.val(positions))
    return centers - half, centers + half


def build_bvh(points) -> Bvh:
    """Median-split BVH; deterministic for a fixed input order."""
    ps = _as_arrays(points)
    if ps.n_points == 0:
        raise ValueError("cannot build a BVH over an empty scene")
    pmin, pmax = gaussian_aabbs(ps.attr("position"), ps.attr("rotation"),
                                ps.attr("log_scale"))
    centroid = 0.5 * (pmin + pmax)
    ids = np.arange(ps.n_points)

    node_min, node_max, left, right, start, count = [], [], [], [], [], []
    order = []  # prim ids in leaf-emission order

    def build(idx, depth):
        me = len(node_min)
        node_min.append(pmin[idx].min(axis=0))
        node_max.append(pmax[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        if idx.size <= 1 or depth >= MAX_DEPTH:
            start.append(len(order))
            count.append(idx.size)
            order.extend(idx.tolist())
            return me
        ext = centroid[idx].max(axis=0) - centroid[idx].min(axis=0)
        axis = int(np.argmax(ext))
        srt = idx[np.lexsort((ids[idx], centroid[idx, axis]))]
        mid = srt.size // 2
        start.append(0)
        count.append(0)
        left[me] = build(srt[:mid], depth + 1)
        right[me] = build(srt[mid:], depth + 1)
        return me

    build(ids, 0)
    return Bvh(np.asarray(node_min), np.asarray(node_max),
               np.asarray(left, np.int64), np.asarray(right, np.int64),
               np.asarray(start, np.int64), np.asarray(count, np.int64),
               np.asarray(order, np.int64), pmin, pmax)


# ---------------------------------------------------------------------------
# along-ray alpha

def _inv_cov_terms(delta, seg, rotations, log_scales):
    """Quadratic forms under Sigma^-1 = R diag(exp(-2 ls)) R^T for batches.

    delta: origin - center, seg: segment vector (both (...,3)).
    Returns (a, b, c) with a = seg' M seg, b = delta' M seg, c = delta' M delta.
    """
    R = quat_to_rot(rotations)
    inv_s2 = ad.exp(ad.mul(-2.0, log_scales))
    # project onto Gaussian axes: y = R^T x, then weight by inv_s2
    nd = np.shape(ad.val(delta)) + (1,)
    dl = ad.reshape(ad.matmul(ad.swap_last2(R), ad.reshape(delta, nd)), np.shape(ad.val(delta)))
    sl = ad.reshape(ad.matmul(ad.swap_last2(R), ad.reshape(seg, nd)), np.shape(ad.val(seg)))
    a = ad.sum_(ad.mul(ad.mul(sl, sl), inv_s2), axis=-1)
    b = ad.sum_(ad.mul(ad.mul(dl, sl), inv_s2), axis=-1)
    c = ad.sum_(ad.mul(ad.mul(dl, dl), inv_s2), axis=-1)
    return a, b, c


def _closest_approach(a, b, c):
    """Segment parameter of the minimum and the Mahalanobis^2 there."""
    t = ad.neg(ad.div(b, a))
    q = ad.sub(c, ad.div(ad.mul(b, b), a))
    return t, q


def ray_gaussian_alpha(point: GaussianPoint, ray_origin, ray_dir,
                       t_max: float | None = None) -> float:
    """Occluder strength of one Gaussian along a unit-direction ray.

    Zero when the closest approach falls outside (eps, t_max - eps) or beyond
    3 sigma; otherwise opacity * shadow_coeff * exp(-q/2), clamped to 0.999.
    """
    o = np.asarray(ray_origin, dtype=np.float64)
    d = np.asarray(ray_dir, dtype=np.float64)
    seg_len = t_max if t_max is not None else np.inf
    a, b, c = _inv_cov_terms((o - point.position)[None, :], d[None, :],
                             point.rotation[None, :], point.log_scale[None, :])
    t, q = _closest_approach(a, b, c)
    t, q = float(ad.val(t)[0]), float(ad.val(q)[0])
    if not (SEGMENT_EPS < t < seg_len - SEGMENT_EPS):
        return 0.0
    if q > CUTOFF_SIGMA_SQ:
        return 0.0
    alpha = point.opacity * point.shadow_coeff * np.exp(-0.5 * q)
    return float(min(alpha, 0.999))


def light_transmittance(bvh: Bvh, points, source_id: int, light: PointLight) -> float:
    """Product of (1 - alpha_j) over occluders between a source point and the
    light, hits taken in ascending order of the closest-approach parameter."""
    ps = _as_arrays(points)
    if not 0 <= source_id < ps.n_points:
        raise IndexError(f"source id {source_id} out of range")
    origin = ps.attr("position")[source_id]
    src, prim = kernels.segment_hits(
        bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start, bvh.count,
        bvh.prim_ids, bvh.prim_min, bvh.prim_max,
        origin[None, :], light.position[None, :])
    prim = prim[prim != source_id]
    if prim.size == 0:
        return 1.0
    pts = [GaussianPoint.from_vector(ps.values.reshape(ps.n_points, -1)[j])
           for j in prim]
    seg = light.position - origin
    seg_len = float(np.linalg.norm(seg))
    d = seg / seg_len
    hits = []
    for j, p in zip(prim, pts):
        alpha = ray_gaussian_alpha(p, origin, d, t_max=seg_len)
        if alpha > 0.0:
            a, b, _ = _inv_cov_terms((origin - p.position)[None, :], d[None, :],
                                     p.rotation[None, :], p.log_scale[None, :])
            hits.append((float(-ad.val(b)[0] / ad.val(a)[0]), int(j), alpha))
    hits.sort()
    T = 1.0
    for _, _, alpha in hits:
        T *= 1.0 - alpha
    return T


def transmittances(bvh: Bvh, view: SceneView, light: PointLight):
    """Per-source transmittance for every Gaussian at once; differentiable.

    Candidate pairs come from the BVH on raw values; survivors of the 3-sigma
    and segment-window cuts are evaluated on the tape, so gradients reach the
    occluders' opacity, shadow coefficient, position, rotation, and scale, as
    well as the source position.
    """
    n = view.n_points
    pos_raw = np.asarray(ad.val(view.position))
    targets = np.broadcast_to(light.position, (n, 3))
    src, occ = kernels.segment_hits(
        bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start, bvh.count,
        bvh.prim_ids, bvh.prim_min, bvh.prim_max, pos_raw, targets)
    keep = src != occ
    src, occ = src[keep], occ[keep]
    if src.size == 0:
        ad.log_structure("shadow_pairs", np.zeros(0, np.int64))
        return np.ones(n)

    origins = ad.take(view.position, src, axis=0)
    centers = ad.take(view.position, occ, axis=0)
    seg = ad.sub(light.position, origins)
    delta = ad.sub(origins, centers)
    a, b, c = _inv_cov_terms(delta, seg,
                             ad.take(view.rotation, occ, axis=0),
                             ad.take(view.log_scale, occ, axis=0))
    t, q = _closest_approach(a, b, c)

    seg_len = np.linalg.norm(light.position - pos_raw[src], axis=-1)
    t_raw = np.asarray(ad.val(t)) * seg_len
    q_raw = np.asarray(ad.val(q))
    live = ((t_raw > SEGMENT_EPS) & (t_raw < seg_len - SEGMENT_EPS)
            & (q_raw <= CUTOFF_SIGMA_SQ))
    ad.log_structure("shadow_pairs", np.concatenate([src[live], occ[live]]))
    if not np.any(live):
        return np.ones(n)
    src, occ = src[live], occ[live]
    q = ad.take(ad.reshape(q, (-1,)), np.flatnonzero(live))

    strength = ad.mul(ad.take(view.opacity, occ, axis=0),
                      ad.take(view.shadow_coeff, occ, axis=0))
    alpha = ad.minimum(ad.mul(strength, ad.exp(ad.mul(-0.5, q))), 0.999)
    logs = ad.scatter_add(ad.log(ad.sub(1.0, alpha)), src, n)
    return ad.exp(logs)
