"""Blinn-Phong shading of Gaussian points under a single point light.

Per-point colors decompose into ambient + diffuse + specular. The diffuse
and specular terms fall off with the squared point-to-light distance and are
scaled by a light-visibility factor in [0, 1]; the light's RGB color
multiplies the specular term only (a colored-diffuse switch exists for
experiments). All functions accept taped Vars or plain arrays; batched
inputs shade every point at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .scene import quat_to_rot

MIN_LIGHT_DISTANCE = 1e-6
HALF_VECTOR_EPS = 1e-8


class ShadingError(RuntimeError):
    pass


@dataclass
class ShadedColor:
    ambient: np.ndarray
    diffuse: np.ndarray
    specular: np.ndarray

    @property
    def total(self):
        return self.ambient + self.diffuse + self.specular


def shortest_axis(rotation, log_scale):
    """Column of the rotation matrix along the smallest scale (ties: lowest index)."""
    R = quat_to_rot(rotation)  # (..., 3, 3)
    ls = ad.val(log_scale)
    arg = np.argmin(ls, axis=-1)
    ad.log_structure("shortest_axis", arg)
    onehot = np.zeros(ls.shape, dtype=np.float64)
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    sel = ad.reshape(onehot, onehot.shape[:-1] + (1, 3))
    return ad.sum_(ad.mul(R, sel), axis=-1)


def oriented_normals(v_axis, residual_out, residual_in, view_dirs):
    """n = normalize(v + dn_out) when the view sees the axis front side,
    else normalize(-(v + dn_in))."""
    outward = np.sum(ad.val(view_dirs) * ad.val(v_axis), axis=-1) > 0.0
    ad.log_structure("normal_branch", outward)
    cand_out = ad.add(v_axis, residual_out)
    cand_in = ad.neg(ad.add(v_axis, residual_in))
    n_raw = ad.where(outward[..., None], cand_out, cand_in)
    norms = np.linalg.norm(ad.val(n_raw), axis=-1)
    if np.any(norms < 1e-12):
        raise ShadingError("degenerate normal: residual cancels the shortest axis")
    return ad.normalize(n_raw)


def gaussian_normals(rotation, log_scale, residual_out, residual_in,
                     positions, camera_center):
    """Shading normals for a batch of points viewed from `camera_center`."""
    v_axis = shortest_axis(rotation, log_scale)
    view = ad.normalize(ad.sub(np.asarray(camera_center, dtype=np.float64), positions))
    return oriented_normals(v_axis, residual_out, residual_in, view)


def gaussian_normal(point, view_dir):
    """Single-point normal given an explicit unit view direction."""
    v_axis = shortest_axis(point.rotation, point.log_scale)
    n = oriented_normals(v_axis, point.normal_residual_out,
                         point.normal_residual_in,
                         np.asarray(view_dir, dtype=np.float64))
    return np.asarray(ad.val(n))


def light_geometry(positions, light_position):
    """Unit point-to-light directions, distances, squared distances."""
    d = ad.sub(np.asarray(light_position, dtype=np.float64), positions)
    r2 = ad.sum_(ad.mul(d, d), axis=-1)
    if np.any(ad.val(r2) < MIN_LIGHT_DISTANCE ** 2):
        raise ShadingError("light coincides with a point")
    r = ad.sqrt(r2)
    l = ad.div(d, ad.reshape(r, np.shape(ad.val(r)) + (1,)))
    return l, r, r2


def diffuse_intensity(n, point_pos, light):
    """(1/r^2) * max(0, n.l) with unit emitted intensity."""
    n = np.asarray(n, dtype=np.float64)
    l, _, r2 = light_geometry(np.asarray(point_pos, dtype=np.float64), light.position)
    return float(ad.val(ad.maximum(np.sum(n * ad.val(l), axis=-1), 0.0) / ad.val(r2)))


def specular_intensity(n, point_pos, camera_pos, light, shininess):
    """(1/r^2) * max(0, n.h)^p, h bisecting view and light directions."""
    if shininess < 1:
        raise ValueError("shininess must be >= 1")
    n = np.asarray(n, dtype=np.float64)
    pos = np.asarray(point_pos, dtype=np.float64)
    l, _, r2 = light_geometry(pos, light.position)
    v = np.asarray(camera_pos, dtype=np.float64) - pos
    v = v / np.linalg.norm(v)
    h_raw = v + np.asarray(ad.val(l))
    h_norm = np.linalg.norm(h_raw)
    if h_norm < HALF_VECTOR_EPS:
        return 0.0  # grazing degenerate: view opposite to light
    h = h_raw / h_norm
    return float(np.maximum(np.sum(n * h, axis=-1), 0.0) ** shininess / ad.val(r2))


def shade_points(positions, normals, ambient, diffuse_color, specular_coeff,
                 camera_center, light, visibility=1.0, shininess=32.0,
                 light_color_on_diffuse=False) -> ShadedColor:
    """Vectorized decomposed shading; `visibility` scales diffuse and specular."""
    l, r, r2 = light_geometry(positions, light.position)
    inv_r2 = ad.div(1.0, r2)
    ndotl = ad.sum_(ad.mul(normals, l), axis=-1)
    i_d = ad.mul(ad.maximum(ndotl, 0.0), inv_r2)

    v = ad.normalize(ad.sub(np.asarray(camera_center, dtype=np.float64), positions))
    h_raw = ad.add(v, l)
    # clamp inside the sqrt so a vanishing half-vector cannot NaN the backward
    h_len2 = ad.maximum(ad.sum_(ad.mul(h_raw, h_raw), axis=-1), HALF_VECTOR_EPS ** 2)
    h_len = ad.sqrt(h_len2)
    ok = np.asarray(ad.val(h_len)) > HALF_VECTOR_EPS
    h = ad.div(h_raw, ad.reshape(h_len, np.shape(ad.val(h_len)) + (1,)))
    ndoth = ad.sum_(ad.mul(normals, h), axis=-1)
    i_s_raw = ad.mul(ad.power(ad.maximum(ndoth, 0.0), float(shininess)), inv_r2)
    i_s = ad.where(ok, i_s_raw, 0.0)

    def col(x):
        return ad.reshape(x, np.shape(ad.val(x)) + (1,))

    vis = visibility if np.ndim(ad.val(visibility)) == 0 else col(visibility)
    diffuse = ad.mul(vis, ad.mul(diffuse_color, col(i_d)))
    if light_color_on_diffuse:
        diffuse = ad.mul(diffuse, light.color)
    specular = ad.mul(vis, ad.mul(ad.mul(col(specular_coeff), light.color), col(i_s)))
    return ShadedColor(ambient=ambient, diffuse=diffuse, specular=specular)


def shade(point, camera, light, visibility, shininess=32.0) -> ShadedColor:
    """Single-point convenience wrapper over the batched shader."""
    if not 0.0 <= visibility <= 1.0:
        raise ValueError("visibility must lie in [0, 1]")
    pos = point.position[None, :]
    n = gaussian_normals(point.rotation[None, :], point.log_scale[None, :],
                         point.normal_residual_out[None, :],
                         point.normal_residual_in[None, :],
                         pos, camera.center)
    sc = shade_points(pos, n, point.ambient_color[None, :],
                      point.diffuse_color[None, :],
                      np.asarray([point.specular_coeff]),
                      camera.center, light, visibility=float(visibility),
                      shininess=shininess)
    return ShadedColor(*(np.asarray(ad.val(x))[0] for x in
                         (sc.ambient, sc.diffuse, sc.specular)))
