import numpy as np
import pytest

from conftest import make_random_points
from phongsplat import autodiff as ad
from phongsplat.losses import LossWeights, stage_loss
from phongsplat.params import SceneView
from phongsplat.pipeline import RenderSettings, render_frame, render_image
from phongsplat.scene import Camera, PointLight, points_to_params
from phongsplat.visibility import build_bvh


def make_cluster(rng, n, spread=0.45):
    # generic but informative: light near the viewing direction so diffuse AND
    # specular terms land on pixels (otherwise their gradients are ~0 and the
    # fd comparison only measures rounding noise)
    pts = make_random_points(rng, n)
    for p in pts:
        p.position = rng.uniform(-spread, spread, 3)
        p.log_scale = np.log(0.22) + rng.uniform(-0.5, 0.5, 3)
        p.opacity_logit = rng.uniform(0.5, 2.5)
        p.specular_coeff = rng.uniform(0.2, 0.6)
        p.shadow_coeff_logit = rng.uniform(-0.5, 2.0)
    params = points_to_params(pts)
    cam = Camera.look_at(eye=(0.3, -3.0, 1.2), target=(0, 0, 0), width=16, height=16)
    light = PointLight(np.array([0.5, -2.2, 1.4]) + rng.uniform(-0.2, 0.2, 3),
                       (1.0, 0.95, 0.9))
    return params, cam, light


def test_render_frame_ambient_mode(rng):
    params, cam, light = make_cluster(rng, 6)
    view = SceneView(params.values, 6)
    fb, vis = render_frame(view, cam, light, RenderSettings(shading="ambient"))
    assert vis is None
    assert np.all(fb.diffuse == 0) and np.all(fb.specular == 0)
    assert np.abs(fb.composite - fb.ambient).max() < 1e-15  # black background
    assert fb.alpha.max() > 0.2  # something actually rendered


def test_render_frame_component_sum(rng):
    params, cam, light = make_cluster(rng, 8)
    view = SceneView(params.values, 8)
    fb, vis = render_frame(view, cam, light, RenderSettings(shading="shadowed"))
    total = fb.ambient + fb.diffuse + fb.specular
    assert np.abs(fb.composite - total).max() < 1e-9
    assert np.abs(fb.alpha + fb.final_transmittance - 1.0).max() < 1e-12
    assert vis is not None and np.all((vis >= 0) & (np.asarray(ad.val(vis)) <= 1))


def test_shadowed_equals_phong_when_no_shadow_coeff(rng):
    params, cam, light = make_cluster(rng, 6)
    params.attr("shadow_coeff_logit")[:] = -800.0  # occluder strength exactly 0
    view = SceneView(params.values, 6)
    fb_phong, _ = render_frame(view, cam, light, RenderSettings(shading="phong"))
    fb_shadow, vis = render_frame(view, cam, light, RenderSettings(shading="shadowed"))
    assert np.all(np.asarray(ad.val(vis)) == 1.0)
    assert np.abs(fb_phong.composite - fb_shadow.composite).max() < 1e-12


def test_render_deterministic(rng):
    params, cam, light = make_cluster(rng, 10)
    fb1 = render_image(params, cam, light, RenderSettings())
    fb2 = render_image(params, cam, light, RenderSettings())
    assert fb1.composite.tobytes() == fb2.composite.tobytes()


def test_stage2_loss_gradient_fd(rng):
    params, cam, light = make_cluster(rng, 5)
    target = render_image(params, cam, light, RenderSettings(shading="ambient")).composite
    target = np.clip(target + rng.normal(0, 0.05, target.shape), 0, 1)

    def loss(flat):
        view = SceneView(flat, 5)
        fb, _ = render_frame(view, cam, light, RenderSettings(shading="ambient"))
        return stage_loss(2, fb, target, view, cam, LossWeights())

    res = ad.finite_diff_check(loss, params.values, epsilon=1e-6, samples=60,
                               rng=np.random.default_rng(7))
    assert res.n_checked > 30
    assert res.max_rel_err < 1e-4


def test_stage3_loss_gradient_fd_smoke(rng):
    params, cam, light = make_cluster(rng, 3)
    target = render_image(params, cam, light, RenderSettings()).composite
    target = np.clip(target + rng.normal(0, 0.05, target.shape), 0, 1)
    bvh = build_bvh(params)

    def loss(flat):
        view = SceneView(flat, 3)
        fb, vis = render_frame(view, cam, light, RenderSettings(shading="shadowed"),
                               bvh=bvh)
        return stage_loss(3, fb, target, view, cam, LossWeights(), iteration=3,
                          visibilities=vis)

    res = ad.finite_diff_check(loss, params.values, epsilon=1e-6, samples=50,
                               rng=np.random.default_rng(11))
    assert res.n_checked > 25
    assert res.max_rel_err < 1e-4
