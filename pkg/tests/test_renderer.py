import numpy as np
import pytest

from phongsplat import autodiff as ad
from phongsplat.params import ParamSet, SceneView, POINT_SIZE
from phongsplat.renderer import (FrameBuffers, Splat2D, depth_to_pseudo_normal,
                                 project, project_gaussian, rasterize,
                                 rasterize_arrays)
from phongsplat.scene import Camera, GaussianPoint

from conftest import make_random_points
from phongsplat.scene import points_to_params


def _cam(width=8, height=8, f=10.0):
    return Camera(np.eye(4), f, f, width / 2.0, height / 2.0, width, height)


def _pt(position, log_scale=(0, 0, 0)):
    return GaussianPoint(position=position, rotation=[1, 0, 0, 0],
                         log_scale=log_scale, opacity_logit=0.0,
                         ambient_color=[0, 0, 0], normal_residual_out=[0, 0, 0],
                         normal_residual_in=[0, 0, 0], diffuse_color=[0, 0, 0],
                         specular_coeff=0.0, shadow_coeff_logit=0.0)


def test_project_on_axis_isotropic():
    f, z = 10.0, 4.0
    s = project_gaussian(_pt([0, 0, z]), _cam(f=f))
    assert s is not None
    assert np.allclose(s.cov, (f / z) ** 2 * np.eye(2), atol=1e-12)
    assert np.allclose(s.mean, [4.0, 4.0], atol=1e-12)
    assert s.depth == pytest.approx(z)


def test_project_culls_behind_near_plane():
    assert project_gaussian(_pt([0, 0, -1.0]), _cam()) is None
    assert project_gaussian(_pt([0, 0, 0.005]), _cam()) is None


def test_project_focal_linearity_off_axis():
    p = _pt([0.5, 0.25, 4.0])
    s1 = project_gaussian(p, _cam(f=10.0))
    s2 = project_gaussian(p, _cam(f=20.0))
    off1 = s1.mean - np.array([4.0, 4.0])
    off2 = s2.mean - np.array([4.0, 4.0])
    assert np.allclose(off2, 2.0 * off1, rtol=1e-12)


def _center_splat(depth, opacity, pid=0, cam=None, var=0.5):
    # mean on the center of pixel (4,4): pixel centers sit at +0.5
    cam = cam or _cam()
    return Splat2D(mean=np.array([cam.width / 2.0 + 0.5, cam.height / 2.0 + 0.5]),
                   cov=np.eye(2) * var, depth=depth, point_id=pid, opacity=opacity)


def test_rasterize_single_opaque_splat_clamps():
    cam = _cam()
    fb = rasterize([_center_splat(2.0, 1.0)], np.array([[0.2, 0.4, 0.8]]), cam)
    # pixel (4,4) has its center exactly at the splat mean: alpha clamps at 0.999
    assert np.allclose(fb.composite[4, 4], 0.999 * np.array([0.2, 0.4, 0.8]), atol=1e-12)
    assert fb.alpha[4, 4] == pytest.approx(0.999, abs=1e-12)


def test_rasterize_two_splats_hand_blend():
    cam = _cam()
    c1, c2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
    splats = [_center_splat(3.0, 1.0, pid=1), _center_splat(1.0, 0.5, pid=0)]
    fb = rasterize(splats, np.stack([c2, c1]), cam)
    expected = 0.5 * c1 + 0.5 * 0.999 * c2
    assert np.allclose(fb.composite[4, 4], expected, atol=1e-12)


def test_rasterize_empty_gives_background():
    cam = _cam()
    fb = rasterize([], None, cam, background=(0.1, 0.2, 0.3))
    assert np.allclose(fb.composite, np.broadcast_to([0.1, 0.2, 0.3], (8, 8, 3)))
    assert np.all(fb.alpha == 0.0)
    assert np.all(fb.final_transmittance == 1.0)


def test_rasterize_background_only_where_transparent():
    cam = _cam()
    fb = rasterize([_center_splat(2.0, 1.0)], np.array([[1.0, 1.0, 1.0]]), cam,
                   background=(0.0, 0.0, 1.0))
    corner = fb.composite[0, 0]
    assert np.allclose(corner, [0, 0, 1], atol=1e-12)  # splat does not reach corner


def _random_scene_arrays(rng, n, cam):
    mean2d = rng.uniform(-1, cam.width + 1, (n, 2))
    A = rng.uniform(-1, 1, (n, 2, 2))
    cov2d = np.matmul(A, np.swapaxes(A, 1, 2)) + 0.05 * np.eye(2)
    depth = rng.uniform(0.5, 5.0, n)
    opacity = rng.uniform(0.02, 1.0, n)
    channels = {k: rng.uniform(0, 1, (n, 3)) for k in ("ambient", "diffuse", "specular")}
    channels["normal"] = rng.standard_normal((n, 3))
    return mean2d, cov2d, depth, opacity, channels


def test_rasterize_conservation_and_component_sum(rng):
    cam = _cam(16, 16)
    for _ in range(50):
        n = int(rng.integers(1, 40))
        mean2d, cov2d, depth, opacity, channels = _random_scene_arrays(rng, n, cam)
        fb = rasterize_arrays(mean2d, cov2d, depth, opacity, channels,
                              cam.height, cam.width)
        conservation = fb.alpha + fb.final_transmittance
        assert np.abs(conservation - 1.0).max() < 1e-12
        comp_sum = fb.ambient + fb.diffuse + fb.specular
        assert np.abs(fb.composite - comp_sum).max() < 1e-9
        assert fb.alpha.min() >= 0.0 and fb.alpha.max() <= 1.0


def test_rasterize_order_independent_bitwise(rng):
    cam = _cam(12, 12)
    n = 15
    mean2d, cov2d, depth, opacity, channels = _random_scene_arrays(rng, n, cam)
    colors = rng.uniform(0, 1, (n, 3))
    splats = [Splat2D(mean2d[i], cov2d[i], float(depth[i]), i, float(opacity[i]))
              for i in range(n)]
    fb1 = rasterize(splats, colors, cam)
    perm = rng.permutation(n)
    fb2 = rasterize([splats[i] for i in perm], colors[perm], cam)
    assert fb1.composite.tobytes() == fb2.composite.tobytes()
    assert fb1.depth.tobytes() == fb2.depth.tobytes()


def test_rasterize_depth_ties_broken_by_id(rng):
    cam = _cam()
    a = _center_splat(2.0, 0.6, pid=0)
    b = _center_splat(2.0, 0.6, pid=1)
    c1 = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    fb1 = rasterize([a, b], c1, cam)
    fb2 = rasterize([b, a], c1[::-1], cam)
    assert np.array_equal(fb1.composite, fb2.composite)


def test_rasterize_differentiable_matches_fd(rng):
    # 2 Gaussians on an 8x8 image, gradient of a pixel-sum functional
    cam = _cam()
    pts = make_random_points(rng, 2)
    for p in pts:
        p.position = np.array([0.0, 0.0, 3.0]) + rng.uniform(-0.3, 0.3, 3)
        p.log_scale = np.log(0.35) + rng.uniform(-0.4, 0.4, 3)
    params = points_to_params(pts)

    def loss(flat):
        view = SceneView(flat, 2)
        proj = project(view.position, view.rotation, view.log_scale, cam)
        fb = rasterize_arrays(proj.mean2d, proj.cov2d, proj.depth, view.opacity,
                              {"color": view.ambient_color},
                              cam.height, cam.width, valid=proj.valid)
        return ad.mean(ad.mul(fb.composite, fb.composite))

    res = ad.finite_diff_check(loss, params.values, epsilon=1e-6, samples=50,
                               rng=np.random.default_rng(0))
    assert res.n_checked > 25
    assert res.max_rel_err < 1e-5


def test_pseudo_normal_fronto_parallel_plane():
    cam = _cam(8, 8)
    depth = np.full((8, 8), 4.0)
    n, valid = depth_to_pseudo_normal(depth, cam)
    assert valid.all()
    assert np.allclose(n, np.broadcast_to([0, 0, -1.0], (8, 8, 3)), atol=1e-12)


def test_pseudo_normal_tilted_plane():
    # camera-space plane z = z0 - y, normal (0,-1,-1)/sqrt(2) toward the camera
    cam = _cam(32, 32, f=40.0)
    vs = (np.arange(32) + 0.5 - cam.cy) / cam.fy
    depth = np.broadcast_to(4.0 / (1.0 + vs)[:, None], (32, 32)).copy()
    n, _ = depth_to_pseudo_normal(depth, cam)
    expected = np.array([0.0, -1.0, -1.0]) / np.sqrt(2)
    interior = n[2:-2, 2:-2]
    ang = np.degrees(np.arccos(np.clip(interior @ expected, -1, 1)))
    assert ang.max() < 1.0


def test_pseudo_normal_empty_depth_all_invalid():
    cam = _cam(8, 8)
    n, valid = depth_to_pseudo_normal(np.zeros((8, 8)), cam, alpha=np.zeros((8, 8)))
    assert not valid.any()
