import json
import os

import numpy as np
import pytest

from conftest import make_random_points, random_unit_quat
from phongsplat import imgio, scene
from phongsplat.params import ATTRIBUTES, POINT_SIZE, ParamSet, attr_mask
from phongsplat.scene import (Camera, CheckpointError, Dataset, DatasetError,
                              GaussianPoint, OLATCapture, PointLight, covariance,
                              load_checkpoint, load_dataset, points_to_params,
                              quat_to_rot, save_checkpoint, write_dataset)

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


def test_covariance_identity():
    C = covariance(IDENTITY_Q, np.zeros(3))
    assert np.allclose(C, np.eye(3), atol=1e-12)


def test_covariance_axis_scaling():
    C = covariance(IDENTITY_Q, np.array([np.log(2.0), 0.0, 0.0]))
    assert np.allclose(C, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_rotated_90deg_about_z():
    # independent construction: R S S^T R^T with the explicit 90-degree matrix
    q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
    R = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    S = np.diag([2.0, 1.0, 1.0])
    expected = R @ S @ S.T @ R.T
    assert np.allclose(expected, np.diag([1.0, 4.0, 1.0]), atol=1e-12)
    C = covariance(q, np.array([np.log(2.0), 0.0, 0.0]))
    assert np.allclose(C, expected, atol=1e-12)


def test_covariance_psd_property(rng):
    qs = rng.standard_normal((10_000, 4))
    qs /= np.linalg.norm(qs, axis=1, keepdims=True)
    ls = rng.uniform(-4, 1, (10_000, 3))
    C = covariance(qs, ls)
    sym_err = np.abs(C - np.swapaxes(C, -1, -2)).max()
    assert sym_err < 1e-12
    eigs = np.linalg.eigvalsh(C)
    assert eigs.min() >= -1e-10


def test_quat_to_rot_is_orthonormal(rng):
    q = rng.standard_normal((50, 4))
    R = quat_to_rot(q)
    eye = np.matmul(R, np.swapaxes(R, -1, -2))
    assert np.allclose(eye, np.eye(3), atol=1e-12)
    assert np.allclose(np.linalg.det(R), 1.0, atol=1e-12)


# --- dataset IO -------------------------------------------------------------

def _write_manifest(path, frames, w=8, h=8):
    meta = {"fx": 10.0, "fy": 10.0, "cx": w / 2, "cy": h / 2, "w": w, "h": h,
            "frames": frames}
    with open(os.path.join(path, "transforms.json"), "w") as f:
        json.dump(meta, f)


def _frame(i, size=8):
    return {
        "file_path": f"im{i}.png",
        "transform_matrix": np.eye(4).tolist(),
        "light_position": [0.0, 0.0, 3.0],
        "light_color": [1.0, 1.0, 1.0],
    }


def test_load_dataset_single_frame(tmp_path, rng):
    d = str(tmp_path)
    imgio.write_png(os.path.join(d, "im0.png"), rng.random((8, 8, 3)), bits=16)
    _write_manifest(d, [_frame(0)])
    ds = load_dataset(d)
    assert len(ds) == 1
    assert ds.captures[0].image.shape == (8, 8, 3)


def test_load_dataset_missing_light_position(tmp_path, rng):
    d = str(tmp_path)
    imgio.write_png(os.path.join(d, "im0.png"), rng.random((8, 8, 3)))
    fr = _frame(0)
    del fr["light_position"]
    _write_manifest(d, [fr])
    with pytest.raises(DatasetError, match="frame 0"):
        load_dataset(d)


def test_load_dataset_dimension_mismatch(tmp_path, rng):
    d = str(tmp_path)
    imgio.write_png(os.path.join(d, "im0.png"), rng.random((8, 8, 3)))
    imgio.write_png(os.path.join(d, "im1.png"), rng.random((4, 4, 3)))
    _write_manifest(d, [_frame(0), _frame(1)])
    with pytest.raises(DatasetError, match="frame 1"):
        load_dataset(d)


def test_load_dataset_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest"):
        load_dataset(str(tmp_path))


def test_load_dataset_unreadable_image(tmp_path):
    d = str(tmp_path)
    with open(os.path.join(d, "im0.png"), "wb") as f:
        f.write(b"not a png")
    _write_manifest(d, [_frame(0)])
    with pytest.raises(DatasetError, match="frame 0"):
        load_dataset(d)


def test_load_dataset_deterministic(tmp_path, rng):
    d = str(tmp_path)
    imgio.write_png(os.path.join(d, "im0.png"), rng.random((8, 8, 3)), bits=16)
    _write_manifest(d, [_frame(0)])
    a, b = load_dataset(d), load_dataset(d)
    assert np.array_equal(a.captures[0].image, b.captures[0].image)
    assert np.array_equal(a.captures[0].camera.world_to_camera,
                          b.captures[0].camera.world_to_camera)


def test_write_then_load_round_trip(tmp_path, rng):
    cam = Camera.look_at(eye=(0, -4, 1.5), target=(0, 0, 0), width=8, height=8)
    caps = [OLATCapture(rng.random((8, 8, 3)), cam,
                        PointLight(rng.uniform(-3, 3, 3), (1, 0.9, 0.8)))
            for _ in range(3)]
    ds = Dataset(caps, name="t")
    write_dataset(str(tmp_path), ds, splits=["a", "b", "b"])
    back = load_dataset(str(tmp_path))
    assert len(back) == 3
    for a, b in zip(caps, back.captures):
        assert np.abs(a.light.position - b.light.position).max() < 1e-6
        assert np.abs(a.camera.center - b.camera.center).max() < 1e-9
        assert np.abs(a.image - b.image).max() < 2.0 / 65535
    assert scene.read_splits(str(tmp_path), 3) == ["a", "b", "b"]


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_empty_round_trip(tmp_path):
    p = os.path.join(tmp_path, "c.ckpt")
    save_checkpoint([], p)
    assert load_checkpoint(p) == []


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    pts = make_random_points(rng, 3, float32=True)
    p = os.path.join(tmp_path, "c.ckpt")
    save_checkpoint(pts, p)
    back = load_checkpoint(p)
    assert len(back) == 3
    for a, b in zip(pts, back):
        assert a.to_vector().tobytes() == b.to_vector().tobytes()


def test_checkpoint_bad_magic(tmp_path, rng):
    p = os.path.join(tmp_path, "c.ckpt")
    save_checkpoint(make_random_points(rng, 1), p)
    blob = bytearray(open(p, "rb").read())
    blob[0] = ord("X")
    open(p, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_checkpoint_truncated(tmp_path, rng):
    p = os.path.join(tmp_path, "c.ckpt")
    save_checkpoint(make_random_points(rng, 2), p)
    blob = open(p, "rb").read()
    open(p, "wb").write(blob[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(p)


def test_checkpoint_version_mismatch(tmp_path, rng):
    p = os.path.join(tmp_path, "c.ckpt")
    save_checkpoint(make_random_points(rng, 1), p)
    blob = bytearray(open(p, "rb").read())
    blob[4] = 9
    open(p, "wb").write(bytes(blob))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(p)


# --- parameter layout ---------------------------------------------------------

def test_point_size_is_attribute_sum():
    assert POINT_SIZE == sum(w for _, w in ATTRIBUTES) == 25


def test_paramset_offset_bijection(rng):
    ps = ParamSet(rng.standard_normal(POINT_SIZE * 4))
    seen = set()
    for pid in range(4):
        for name, w in ATTRIBUTES:
            for c in range(w):
                seen.add(ps.offset(pid, name, c))
    assert seen == set(range(POINT_SIZE * 4))


def test_paramset_points_round_trip(rng):
    pts = make_random_points(rng, 5)
    ps = points_to_params(pts)
    back = scene.params_to_points(ps)
    for a, b in zip(pts, back):
        assert np.array_equal(a.to_vector(), b.to_vector())


def test_attr_mask_selects_attribute(rng):
    m = attr_mask(["shadow_coeff_logit"], 3)
    assert m.sum() == 3
    ps = ParamSet(np.arange(POINT_SIZE * 3, dtype=float))
    assert np.array_equal(np.sort(ps.values[m]),
                          np.sort(ps.attr("shadow_coeff_logit").ravel()))


def test_camera_rejects_nonorthonormal():
    W = np.eye(4)
    W[0, 0] = 2.0
    with pytest.raises(ValueError):
        Camera(W, 10, 10, 4, 4, 8, 8)


def test_pfm_round_trip(tmp_path, rng):
    d = rng.random((6, 9))
    p = os.path.join(tmp_path, "d.pfm")
    imgio.write_pfm(p, d)
    back = imgio.read_pfm(p)
    assert np.abs(back - d).max() < 1e-6
