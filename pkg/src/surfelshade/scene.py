"""Splat storage, pinhole cameras and NeRF-synthetic style dataset loading.

Camera convention used everywhere downstream: world-to-camera rigid transform,
camera looks down +z, x to the right, y down (pixel rows grow downward).
Manifests store OpenGL camera-to-world matrices (camera looks down -z, y up);
:func:`load_dataset` flips the y and z axes and inverts on load, and
:func:`write_manifest` undoes exactly that.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

SPLAT_FIELDS = (
    "center",
    "rotation",
    "log_scale",
    "opacity_raw",
    "diffuse_raw",
    "roughness_raw",
    "feature",
)

_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_matrix(q):
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order.

    The quaternion is normalized first so the result is always a rotation.
    """
    q = np.asarray(q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_matrix_backward(q, grad_R):
    """Gradient w.r.t. the raw (unnormalized) quaternion given dL/dR."""
    q = np.asarray(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    g = grad_R
    gw = 2 * (
        -z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
        - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1]
    )
    gx = 2 * (
        y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0]
        - 2 * x * g[..., 1, 1] - w * g[..., 1, 2] + z * g[..., 2, 0]
        + w * g[..., 2, 1] - 2 * x * g[..., 2, 2]
    )
    gy = 2 * (
        -2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2]
        + x * g[..., 1, 0] + z * g[..., 1, 2] - w * g[..., 2, 0]
        + z * g[..., 2, 1] - 2 * y * g[..., 2, 2]
    )
    gz = 2 * (
        -2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2]
        + w * g[..., 1, 0] - 2 * z * g[..., 1, 1] + y * g[..., 1, 2]
        + x * g[..., 2, 0] + y * g[..., 2, 1]
    )
    gqn = np.stack([gw, gx, gy, gz], axis=-1)
    # project out the radial component of the normalization
    return (gqn - qn * np.sum(gqn * qn, axis=-1, keepdims=True)) / norm


@dataclass
class Splats:
    """Structure-of-arrays storage for N oriented 2D Gaussian surfels.

    Raw fields are unconstrained; activations (sigmoid for opacity, diffuse
    and roughness, exp for scale) are applied by the accessors below.
    """

    center: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_raw: np.ndarray
    diffuse_raw: np.ndarray
    roughness_raw: np.ndarray
    feature: np.ndarray

    def __len__(self):
        return self.center.shape[0]

    @classmethod
    def empty(cls, feature_dim=4, dtype=np.float64):
        return cls.zeros(0, feature_dim, dtype)

    @classmethod
    def zeros(cls, n, feature_dim=4, dtype=np.float64):
        rotation = np.zeros((n, 4), dtype)
        rotation[:, 0] = 1.0
        return cls(
            center=np.zeros((n, 3), dtype),
            rotation=rotation,
            log_scale=np.zeros((n, 2), dtype),
            opacity_raw=np.zeros(n, dtype),
            diffuse_raw=np.zeros((n, 3), dtype),
            roughness_raw=np.zeros(n, dtype),
            feature=np.zeros((n, feature_dim), dtype),
        )

    @property
    def dtype(self):
        return self.center.dtype

    @property
    def opacity(self):
        return sigmoid(self.opacity_raw)

    @property
    def diffuse(self):
        return sigmoid(self.diffuse_raw)

    @property
    def roughness(self):
        return sigmoid(self.roughness_raw)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in SPLAT_FIELDS}

    def copy(self) -> "Splats":
        return Splats(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "Splats":
        return Splats(**{k: v.astype(dtype) for k, v in self.arrays().items()})

    def select(self, index) -> "Splats":
        return Splats(**{k: v[index] for k, v in self.arrays().items()})

    @staticmethod
    def concat(parts) -> "Splats":
        parts = list(parts)
        return Splats(
            **{k: np.concatenate([getattr(p, k) for p in parts]) for k in SPLAT_FIELDS}
        )

    def frames(self):
        """World-space tangent frames (t_u, t_v, n), each (N, 3)."""
        R = quat_to_matrix(self.rotation)
        return R[..., 0], R[..., 1], R[..., 2]

    def normalize_rotations(self):
        self.rotation /= np.linalg.norm(self.rotation, axis=1, keepdims=True)

    def validate(self, atol=1e-6):
        """Raise ``ValueError`` if any splat breaks its type invariants."""
        n = len(self)
        for name, arr in self.arrays().items():
            if arr.shape[0] != n:
                raise ValueError(f"field {name} has {arr.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"field {name} has non-finite values")
        qn = np.linalg.norm(self.rotation, axis=1)
        if n and np.max(np.abs(qn - 1.0)) > atol:
            raise ValueError("rotation quaternions are not unit length")
        for name in ("opacity", "diffuse", "roughness"):
            v = getattr(self, name)
            if np.any(v <= 0.0) or np.any(v >= 1.0):
                raise ValueError(f"{name} left the open interval (0, 1)")
        tu, tv, nrm = self.frames()
        if n:
            frame_err = max(
                np.abs(np.sum(tu * tv, axis=1)).max(),
                np.abs(np.linalg.norm(nrm - np.cross(tu, tv), axis=1)).max(),
            )
            if frame_err > atol:
                raise ValueError("tangent frame is not orthonormal")


def splat_frame(rotation):
    """Tangent frame ``(t_u, t_v, n)`` from unit quaternion(s) of shape (..., 4)."""
    R = quat_to_matrix(np.asarray(rotation, dtype=np.float64))
    t_u, t_v = R[..., :, 0], R[..., :, 1]
    return t_u, t_v, np.cross(t_u, t_v)


@dataclass
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if abs(np.linalg.det(self.R) - 1.0) > 1e-6:
            raise ValueError("camera rotation must have determinant +1")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def camera_to_world(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R.T
        M[:3, 3] = self.center
        return M

    def camera_rays(self, dtype=np.float64) -> np.ndarray:
        """Unit ray directions in camera space through pixel centers, (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.cx) / self.fx
        ys = (np.arange(self.height) + 0.5 - self.cy) / self.fy
        d = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], 1.0), axis=-1)
        d = d / np.linalg.norm(d, axis=-1, keepdims=True)
        return d.astype(dtype)

    def world_rays(self, dtype=np.float64) -> np.ndarray:
        return (self.camera_rays(np.float64) @ self.R).astype(dtype)

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_x):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        fx = width / (2.0 * math.tan(fov_x / 2.0))
        return cls(width, height, fx, fx, width / 2.0, height / 2.0, R, -R @ eye)


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray  # (H, W, 3) sRGB in [0, 1]
    name: str = ""
    alpha: np.ndarray | None = None
    normal: np.ndarray | None = None  # world-space ground-truth normals


@dataclass
class Dataset:
    frames: list[Frame] = field(default_factory=list)
    split: str = "train"
    camera_angle_x: float | None = None

    def __len__(self):
        return len(self.frames)

    @property
    def resolution(self):
        img = self.frames[0].image
        return img.shape[0], img.shape[1]


class DatasetError(ValueError):
    pass


def _manifest_path(path, split):
    for name in (f"transforms_{split}.json", "transforms.json"):
        candidate = os.path.join(path, name)
        if os.path.isfile(candidate):
            return candidate
    raise DatasetError(f"no transforms manifest for split {split!r} in {path}")


def _resolve_image(root, file_path):
    candidate = os.path.normpath(os.path.join(root, file_path))
    if os.path.splitext(candidate)[1] == "":
        candidate += ".png"
    if not os.path.isfile(candidate):
        raise DatasetError(f"image not found: {candidate}")
    return candidate


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L"):
            im = im.convert("RGBA")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=-1)
    return arr


def write_png(path, image):
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.round(arr * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path)


def pose_to_camera(transform_matrix, width, height, camera_angle_x) -> Camera:
    c2w = np.asarray(transform_matrix, dtype=np.float64)
    if c2w.shape != (4, 4):
        raise DatasetError("transform_matrix must be 4x4")
    rot = c2w[:3, :3]
    det = np.linalg.det(rot)
    if not np.isfinite(det) or abs(det) < 1e-9:
        raise DatasetError("non-invertible pose")
    if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-6 or det < 0:
        raise DatasetError("pose is not a rigid transform")
    c2w = c2w @ _GL_TO_CV
    R = c2w[:3, :3].T
    t = -R @ c2w[:3, 3]
    fx = width / (2.0 * math.tan(camera_angle_x / 2.0))
    return Camera(width, height, fx, fx, width / 2.0, height / 2.0, R, t)


def camera_to_pose(camera: Camera) -> np.ndarray:
    return camera.camera_to_world @ _GL_TO_CV


def load_dataset(path, split="train", background=(0.0, 0.0, 0.0)) -> Dataset:
    """Read a ``transforms_<split>.json`` (or ``transforms.json``) directory.

    RGBA images are composited over ``background``; the alpha plane is kept on
    the frame for masking. Optional per-frame ``alpha_path`` entries supply a
    coverage mask for RGB images without compositing them, and ``normal_path``
    entries point at ground-truth normal maps stored as (n + 1) / 2 PNGs.
    """
    manifest = _manifest_path(path, split)
    try:
        with open(manifest) as f:
            meta = json.load(f)
        angle = float(meta["camera_angle_x"])
        entries = meta["frames"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"unparsable manifest {manifest}: {exc}") from exc

    bg = np.asarray(background, dtype=np.float64)
    frames = []
    shape = None
    for entry in entries:
        img = read_png(_resolve_image(path, entry["file_path"]))
        if shape is None:
            shape = img.shape[:2]
        elif img.shape[:2] != shape:
            raise DatasetError(
                f"image size mismatch: {entry['file_path']} is {img.shape[:2]}, expected {shape}"
            )
        alpha = None
        if img.shape[2] == 4:
            alpha = img[..., 3]
            img = img[..., :3] * alpha[..., None] + bg * (1.0 - alpha[..., None])
        if "alpha_path" in entry:
            alpha = read_png(_resolve_image(path, entry["alpha_path"]))[..., 0]
        normal = None
        if "normal_path" in entry:
            normal = read_png(_resolve_image(path, entry["normal_path"]))[..., :3] * 2.0 - 1.0
            normal /= np.maximum(np.linalg.norm(normal, axis=-1, keepdims=True), 1e-12)
        cam = pose_to_camera(entry["transform_matrix"], shape[1], shape[0], angle)
        frames.append(Frame(cam, img, entry["file_path"], alpha, normal))
    return Dataset(frames, split, angle)


def write_manifest(dataset: Dataset, path, split=None, extra=None):
    """Serialize the camera poses of ``dataset`` back into a manifest file."""
    angle = dataset.camera_angle_x
    if angle is None:
        cam = dataset.frames[0].camera
        angle = 2.0 * math.atan(cam.width / (2.0 * cam.fx))
    frames = []
    for i, fr in enumerate(dataset.frames):
        entry = {"file_path": fr.name, "transform_matrix": camera_to_pose(fr.camera).tolist()}
        if extra is not None:
            entry.update(extra[i])
        frames.append(entry)
    name = f"transforms_{split or dataset.split}.json"
    with open(os.path.join(path, name), "w") as f:
        json.dump({"camera_angle_x": angle, "frames": frames}, f, indent=2)


def init_splats(dataset: Dataset, count, seed, box=(-1, -1, -1, 1, 1, 1), k_init=1.0,
                feature_dim=4, dtype=np.float32) -> Splats:
    """Random-in-box initialization (no structure-from-motion points)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if len(dataset) == 0:
        raise DatasetError("cannot initialize from an empty dataset")
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(box[:3], np.float64), np.asarray(box[3:], np.float64)
    extent = float(np.max(hi - lo))

    quats = rng.standard_normal((count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    mean_color = np.mean([fr.image.reshape(-1, 3).mean(axis=0) for fr in dataset.frames], axis=0)
    scale = extent * count ** (-1.0 / 3.0) * k_init

    splats = Splats(
        center=lo + (hi - lo) * rng.random((count, 3)),
        rotation=quats,
        log_scale=np.full((count, 2), math.log(scale)),
        opacity_raw=np.full(count, logit(0.5)),
        diffuse_raw=np.tile(logit(np.clip(mean_color, 0.05, 0.95)), (count, 1)),
        roughness_raw=np.full(count, logit(0.5)),
        feature=np.zeros((count, feature_dim)),
    )
    return splats.astype(dtype)
