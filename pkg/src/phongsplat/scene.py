"""Scene domain types, covariance construction, and dataset/checkpoint IO."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import imgio
from .params import ATTRIBUTES, POINT_SIZE, ParamSet

CHECKPOINT_MAGIC = b"PHGS"
CHECKPOINT_VERSION = 1


class DatasetError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class GaussianPoint:
    """One scene primitive; optimizable attributes only."""

    position: np.ndarray                 # (3,) world units
    rotation: np.ndarray                 # (4,) unit quaternion, wxyz
    log_scale: np.ndarray                # (3,) log of per-axis scale
    opacity_logit: float                 # opacity = sigmoid(opacity_logit)
    ambient_color: np.ndarray            # (3,) linear RGB, degree-0 SH
    normal_residual_out: np.ndarray      # (3,)
    normal_residual_in: np.ndarray       # (3,)
    diffuse_color: np.ndarray            # (3,) linear RGB
    specular_coeff: float                # 1-channel
    shadow_coeff_logit: float            # shadow coeff = sigmoid(...)

    def __post_init__(self):
        for name, width in ATTRIBUTES:
            v = np.asarray(getattr(self, name), dtype=np.float64).reshape(width)
            setattr(self, name, v if width > 1 else float(v[0]))

    @property
    def opacity(self) -> float:
        return float(ad.sigmoid(np.asarray(self.opacity_logit)))

    @property
    def shadow_coeff(self) -> float:
        return float(ad.sigmoid(np.asarray(self.shadow_coeff_logit)))

    def to_vector(self) -> np.ndarray:
        parts = [np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
                 for name, _ in ATTRIBUTES]
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "GaussianPoint":
        v = np.asarray(v, dtype=np.float64).reshape(POINT_SIZE)
        kwargs, off = {}, 0
        for name, width in ATTRIBUTES:
            kwargs[name] = v[off] if width == 1 else v[off:off + width]
            off += width
        return cls(**kwargs)


def points_to_params(points: list[GaussianPoint]) -> ParamSet:
    if not points:
        return ParamSet(np.zeros(0))
    return ParamSet(np.concatenate([p.to_vector() for p in points]))


def params_to_points(params: ParamSet) -> list[GaussianPoint]:
    table = params.values.reshape(params.n_points, POINT_SIZE)
    return [GaussianPoint.from_vector(row) for row in table]


@dataclass
class Camera:
    world_to_camera: np.ndarray  # (4,4) rigid, row-major, +z forward, y down
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        R = self.world_to_camera[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ValueError("world_to_camera rotation block must be orthonormal with det +1")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_deg=40.0,
                width=64, height=64) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - eye
        f = f / np.linalg.norm(f)
        up = np.asarray(up, dtype=np.float64)
        if abs(f @ (up / np.linalg.norm(up))) > 0.999:
            up = np.array([0.0, 1.0, 0.0])
        s = np.cross(f, up)
        s = s / np.linalg.norm(s)
        u = np.cross(s, f)
        R = np.stack([s, -u, f])  # x right, y down, z forward
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ eye
        focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls(W, focal, focal, width / 2.0, height / 2.0, width, height)


@dataclass
class PointLight:
    position: np.ndarray  # (3,) world units
    color: np.ndarray     # (3,) linear RGB, >= 0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.color))):
            raise ValueError("light position and color must be finite")


@dataclass
class OLATCapture:
    image: np.ndarray  # (H, W, 3) linear RGB in [0, 1]
    camera: Camera
    light: PointLight

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        h, w = self.image.shape[:2]
        if (h, w) != (self.camera.height, self.camera.width):
            raise ValueError("image dimensions do not match the camera")


@dataclass
class Dataset:
    captures: list[OLATCapture]
    name: str = "dataset"

    def __post_init__(self):
        if not self.captures:
            raise DatasetError("dataset is empty")
        h, w = self.captures[0].image.shape[:2]
        for i, c in enumerate(self.captures):
            if c.image.shape[:2] != (h, w):
                raise DatasetError(f"frame {i}: image dimensions differ from frame 0")

    def __len__(self):
        return len(self.captures)


# ---------------------------------------------------------------------------
# geometry

def quat_to_rot(q):
    """Rotation matrices (..., 3, 3) from quaternions (..., 4), wxyz order.

    The quaternion is normalized inside, so mid-optimization values that have
    drifted off the unit sphere still produce proper rotations.
    """
    q = ad.normalize(q, axis=-1)
    nd = np.ndim(ad.val(q))
    comps = [ad.reshape(ad.take(q, [i], axis=nd - 1), np.shape(ad.val(q))[:-1])
             for i in range(4)]
    w, x, y, z = comps
    one = 1.0
    r = [
        one - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), one - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), one - 2.0 * (x * x + y * y),
    ]
    flat = ad.stack(r, axis=-1)
    return ad.reshape(flat, np.shape(ad.val(flat))[:-1] + (3, 3))


def covariance(rotation, log_scale):
    """Sigma = R S S^T R^T with S = diag(exp(log_scale)); accepts batches."""
    R = quat_to_rot(rotation)
    s2 = ad.exp(ad.mul(2.0, log_scale))
    # scale columns of R by s^2, then multiply by R^T
    s2b = ad.reshape(s2, np.shape(ad.val(s2))[:-1] + (1, 3))
    return ad.matmul(ad.mul(R, s2b), ad.swap_last2(R))


# ---------------------------------------------------------------------------
# dataset manifest IO

def load_dataset(path: str, srgb: bool = False, name: str | None = None) -> Dataset:
    """Read a capture directory: transforms.json plus the referenced PNGs."""
    manifest = os.path.join(path, "transforms.json")
    if not os.path.isfile(manifest):
        raise DatasetError(f"missing manifest: {manifest}")
    with open(manifest) as f:
        meta = json.load(f)
    for key in ("fx", "fy", "cx", "cy", "w", "h", "frames"):
        if key not in meta:
            raise DatasetError(f"manifest missing '{key}'")
    captures = []
    for i, frame in enumerate(meta["frames"]):
        if "light_position" not in frame:
            raise DatasetError(f"frame {i}: missing light_position")
        if "transform_matrix" not in frame:
            raise DatasetError(f"frame {i}: missing transform_matrix")
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64).reshape(4, 4)
        R = c2w[:3, :3].T
        W = np.eye(4)
        W[:3, :3] = R
        W[:3, 3] = -R @ c2w[:3, 3]
        camera = Camera(W, meta["fx"], meta["fy"], meta["cx"], meta["cy"],
                        int(meta["w"]), int(meta["h"]))
        light = PointLight(frame["light_position"], frame.get("light_color", (1.0, 1.0, 1.0)))
        img_path = os.path.join(path, frame["file_path"])
        try:
            image = imgio.read_png(img_path, srgb=srgb)
        except IOError as e:
            raise DatasetError(f"frame {i}: {e}") from e
        if image.shape[:2] != (camera.height, camera.width):
            raise DatasetError(
                f"frame {i}: image is {image.shape[1]}x{image.shape[0]}, "
                f"manifest says {camera.width}x{camera.height}")
        captures.append(OLATCapture(image, camera, light))
    try:
        return Dataset(captures, name=name or os.path.basename(os.path.normpath(path)))
    except DatasetError as e:
        raise DatasetError(str(e)) from e


def write_dataset(path: str, dataset: Dataset, bits: int = 16,
                  splits: list[str] | None = None) -> None:
    """Write a dataset in the transforms.json layout this package reads back."""
    os.makedirs(path, exist_ok=True)
    cam0 = dataset.captures[0].camera
    frames = []
    for i, cap in enumerate(dataset.captures):
        fname = f"frames/{i:04d}.png"
        imgio.write_png(os.path.join(path, fname), cap.image, bits=bits)
        W = cap.camera.world_to_camera
        c2w = np.eye(4)
        c2w[:3, :3] = W[:3, :3].T
        c2w[:3, 3] = cap.camera.center
        frames.append({
            "file_path": fname,
            "transform_matrix": c2w.tolist(),
            "light_position": cap.light.position.tolist(),
            "light_color": cap.light.color.tolist(),
        })
    meta = {"fx": cam0.fx, "fy": cam0.fy, "cx": cam0.cx, "cy": cam0.cy,
            "w": cam0.width, "h": cam0.height, "frames": frames}
    with open(os.path.join(path, "transforms.json"), "w") as f:
        json.dump(meta, f, indent=1)
    if splits is not None:
        with open(os.path.join(path, "splits.json"), "w") as f:
            json.dump(list(splits), f)


def read_splits(path: str, n: int) -> list[str]:
    """Per-frame split labels if a splits.json sidecar exists, else 'test'."""
    p = os.path.join(path, "splits.json")
    if os.path.isfile(p):
        with open(p) as f:
            labels = json.load(f)
        if len(labels) != n:
            raise DatasetError(f"splits.json has {len(labels)} labels for {n} frames")
        return [str(s) for s in labels]
    return ["test"] * n


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(points, path: str) -> None:
    """Binary checkpoint: magic, version, count, then float32 records."""
    if isinstance(points, ParamSet):
        table = points.values.reshape(points.n_points, POINT_SIZE)
    else:
        table = (np.stack([p.to_vector() for p in points])
                 if points else np.zeros((0, POINT_SIZE)))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", table.shape[0]))
        f.write(np.ascontiguousarray(table, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> list[GaussianPoint]:
    return params_to_points(load_checkpoint_params(path))


def load_checkpoint_params(path: str) -> ParamSet:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<Q", blob, 8)
    body = blob[16:]
    expect = n * POINT_SIZE * 4
    if len(body) != expect:
        raise CheckpointError(f"truncated checkpoint: {len(body)} of {expect} payload bytes")
    table = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, POINT_SIZE)
    return ParamSet(table.reshape(-1))
