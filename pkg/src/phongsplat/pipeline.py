"""One-frame rendering: shading mode selection, projection, and blending."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import ATTRIBUTES, POINT_SIZE, ParamSet, SceneView
from .renderer import FrameBuffers, project, rasterize_arrays
from .scene import Camera, PointLight
from .shading import gaussian_normals, shade_points
from .visibility import Bvh, build_bvh, transmittances

SHADING_MODES = ("ambient", "phong", "shadowed")


@dataclass
class RenderSettings:
    shading: str = "shadowed"
    background: tuple = (0.0, 0.0, 0.0)
    shininess: float = 32.0
    light_color_on_diffuse: bool = False

    def __post_init__(self):
        if self.shading not in SHADING_MODES:
            raise ValueError(f"unknown shading mode {self.shading!r}")


def render_frame(view: SceneView, camera: Camera, light: PointLight,
                 settings: RenderSettings, bvh: Bvh | None = None):
    """Render one frame; returns (FrameBuffers, per-point visibility or None).

    "ambient" blends the ambient colors only (stages 1-2); "phong" shades
    with visibility 1; "shadowed" modulates diffuse/specular by BVH light
    transmittance. Differentiable whenever `view` wraps a taped vector.
    """
    normals_world = gaussian_normals(view.rotation, view.log_scale,
                                     view.normal_residual_out,
                                     view.normal_residual_in,
                                     view.position, camera.center)
    normals_cam = ad.matmul(normals_world, camera.rotation.T)
    proj = project(view.position, view.rotation, view.log_scale, camera)

    channels = {"normal": normals_cam}
    vis = None
    if settings.shading == "ambient":
        channels["ambient"] = view.ambient_color
    else:
        if settings.shading == "shadowed":
            vis = transmittances(bvh if bvh is not None else build_bvh(_raw_params(view)),
                                 view, light)
            visibility = vis
        else:
            visibility = 1.0
        shaded = shade_points(view.position, normals_world, view.ambient_color,
                              view.diffuse_color, view.specular_coeff,
                              camera.center, light, visibility=visibility,
                              shininess=settings.shininess,
                              light_color_on_diffuse=settings.light_color_on_diffuse)
        channels["ambient"] = shaded.ambient
        channels["diffuse"] = shaded.diffuse
        channels["specular"] = shaded.specular

    fb = rasterize_arrays(proj.mean2d, proj.cov2d, proj.depth, view.opacity,
                          channels, camera.height, camera.width,
                          background=settings.background, valid=proj.valid)
    return fb, vis


def _raw_params(view: SceneView) -> ParamSet:
    table = np.empty((view.n_points, POINT_SIZE))
    col = 0
    for name, w in ATTRIBUTES:
        v = np.asarray(ad.val(getattr(view, name)), dtype=np.float64)
        table[:, col:col + w] = v.reshape(view.n_points, w)
        col += w
    return ParamSet(table.reshape(-1))


def render_image(params, camera: Camera, light: PointLight,
                 settings: RenderSettings, bvh: Bvh | None = None) -> FrameBuffers:
    """Plain (untaped) render of a parameter set; fast path for eval/CLI."""
    view = SceneView(np.asarray(params.values, dtype=np.float64), params.n_points)
    fb, _ = render_frame(view, camera, light, settings, bvh=bvh)
    return fb
