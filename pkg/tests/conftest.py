import numpy as np
import pytest

from phongsplat.pipeline import RenderSettings, render_image
from phongsplat.scene import Camera, Dataset, GaussianPoint, OLATCapture, PointLight


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sphere_dirs(rng, n):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def render_olat_dataset(params, n_captures, rng, width=16, height=16,
                        cam_radius=3.2, light_radius=2.4, shading="shadowed",
                        shininess=32.0):
    """OLAT captures produced by the engine's own forward model."""
    settings = RenderSettings(shading=shading, shininess=shininess)
    captures = []
    for d, ld in zip(sphere_dirs(rng, n_captures), sphere_dirs(rng, n_captures)):
        cam = Camera.look_at(eye=d * cam_radius, target=(0, 0, 0),
                             width=width, height=height)
        light = PointLight(ld * light_radius, (1.0, 1.0, 1.0))
        fb = render_image(params, cam, light, settings)
        captures.append(OLATCapture(np.clip(fb.composite, 0.0, 1.0), cam, light))
    return Dataset(captures, name="selfgen")


def random_unit_quat(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def make_random_point(rng, float32=False):
    p = GaussianPoint(
        position=rng.uniform(-1, 1, 3),
        rotation=random_unit_quat(rng),
        log_scale=rng.uniform(-2.5, -0.5, 3),
        opacity_logit=rng.uniform(-1, 3),
        ambient_color=rng.uniform(0, 1, 3),
        normal_residual_out=rng.uniform(-0.1, 0.1, 3),
        normal_residual_in=rng.uniform(-0.1, 0.1, 3),
        diffuse_color=rng.uniform(0, 1, 3),
        specular_coeff=rng.uniform(0, 0.3),
        shadow_coeff_logit=rng.uniform(-1, 1),
    )
    if float32:
        return GaussianPoint.from_vector(p.to_vector().astype(np.float32))
    return p


def make_random_points(rng, n, float32=False):
    return [make_random_point(rng, float32=float32) for _ in range(n)]
