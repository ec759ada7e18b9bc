"""Pinhole rays, stratified sampling and alpha compositing."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

FAR_SENTINEL = 1e10


class CameraError(ValueError):
    pass


@dataclass
class Camera:
    """OpenCV-style pinhole: x_pix = K (R x_world + t); +z looks forward, +y down."""

    K: np.ndarray  # (3, 3)
    world_to_camera: np.ndarray  # (4, 4)
    width: int
    height: int

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64)
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise CameraError("focal lengths must be positive")
        if abs(np.linalg.det(self.world_to_camera[:3, :3])) < 1e-9:
            raise CameraError("extrinsic matrix is not invertible")

    @property
    def camera_to_world(self) -> np.ndarray:
        return np.linalg.inv(self.world_to_camera)

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    def project(self, points: np.ndarray) -> np.ndarray:
        cam = points @ self.world_to_camera[:3, :3].T + self.world_to_camera[:3, 3]
        pix = cam @ self.K.T
        return pix[:, :2] / pix[:, 2:3]

    @classmethod
    def look_at(cls, eye, target, up, focal: float, width: int, height: int) -> Camera:
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        w2c = np.eye(4)
        w2c[:3, :3] = rot
        w2c[:3, 3] = -rot @ eye
        K = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
        return cls(K, w2c, width, height)


@dataclass
class RayBundle:
    origins: np.ndarray  # (B, 3)
    directions: np.ndarray  # (B, 3), unit
    near_far: np.ndarray  # (B, 2)
    hit: np.ndarray  # (B,) False where the ray misses the box (background)
    pixel_coords: np.ndarray  # (B, 2) integer (x, y)
    sample_depths: np.ndarray | None = None  # (B, D)
    delta: np.ndarray | None = None  # (B, D)

    def __len__(self) -> int:
        return len(self.origins)

    def points(self) -> np.ndarray:
        return self.origins[:, None] + self.sample_depths[..., None] * self.directions[:, None]

    def select(self, rows) -> RayBundle:
        pick = lambda a: None if a is None else a[rows]  # noqa: E731
        return RayBundle(*(pick(getattr(self, f)) for f in ("origins", "directions", "near_far", "hit", "pixel_coords", "sample_depths", "delta")))


def ray_box_intersection(origins: np.ndarray, directions: np.ndarray, box: np.ndarray):
    """Slab test. Returns (near, far, hit); near is clamped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (box[0] - origins) * inv
        t1 = (box[1] - origins) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf).max(1)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf).min(1)
    near = np.maximum(tmin, 0.0)
    hit = tmax > near
    return near, tmax, hit


def generate_rays(camera: Camera, pixels: np.ndarray, box: np.ndarray | None = None) -> RayBundle:
    """Rays through pixel centres (x + 0.5, y + 0.5) for integer (x, y) pixels.

    ``box`` is the (2, 3) region to bound near/far; rays missing it are flagged.
    """
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    c2w = camera.camera_to_world
    uv1 = np.concatenate([pixels + 0.5, np.ones((len(pixels), 1))], 1)
    d_cam = uv1 @ np.linalg.inv(camera.K).T
    d = d_cam @ c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(c2w[:3, 3], d.shape).copy()
    if box is None:
        near, far, hit = np.zeros(len(d)), np.full(len(d), np.inf), np.ones(len(d), bool)
    else:
        near, far, hit = ray_box_intersection(o, d, np.asarray(box, dtype=np.float64))
    near_far = np.stack([near, np.where(hit, far, near + 1.0)], 1)
    return RayBundle(o, d, near_far, hit, pixels)


def image_pixels(width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], 1)


def stratified_samples(bundle: RayBundle, count: int, jitter: bool = False, rng: np.random.Generator | None = None) -> RayBundle:
    """One depth per uniform bin of [near, far]: bin centres, or uniform within each bin with jitter."""
    near, far = bundle.near_far[:, :1], bundle.near_far[:, 1:]
    width = (far - near) / count
    if jitter:
        rng = rng or np.random.default_rng()
        offs = rng.random((len(bundle), count))
    else:
        offs = np.full((len(bundle), count), 0.5)
    depths = near + (np.arange(count) + offs) * width
    delta = np.concatenate([np.diff(depths, axis=1), np.full((len(bundle), 1), FAR_SENTINEL)], 1)
    return replace(bundle, sample_depths=depths, delta=delta)


@dataclass
class CompositeResult:
    color: torch.Tensor  # (B, 3)
    opacity: torch.Tensor  # (B, 1)
    depth: torch.Tensor  # (B, 1)
    weights: torch.Tensor  # (B, D)
    transmittance: torch.Tensor  # (B, D)


def composite(sigmas: torch.Tensor, colors: torch.Tensor, deltas: torch.Tensor, background=(0.0, 0.0, 0.0), depths: torch.Tensor | None = None) -> CompositeResult:
    """alpha_i = 1 - exp(-sigma_i dt_i), T_i = prod_{j<i} (1 - alpha_j), C = sum T_i alpha_i c_i + (1 - opacity) bg."""
    sigmas = torch.as_tensor(sigmas)
    deltas = torch.as_tensor(deltas, dtype=sigmas.dtype)
    alpha = 1.0 - torch.exp(-sigmas * deltas)
    ones = torch.ones_like(alpha[:, :1])
    trans = torch.cumprod(torch.cat([ones, 1.0 - alpha[:, :-1]], 1), 1)
    weights = trans * alpha
    opacity = weights.sum(1, keepdim=True)
    bg = torch.as_tensor(background, dtype=sigmas.dtype)
    color = (weights.unsqueeze(-1) * colors).sum(1) + (1.0 - opacity) * bg
    if depths is None:
        depth = torch.zeros_like(opacity)
    else:
        depth = (weights * torch.as_tensor(depths, dtype=sigmas.dtype)).sum(1, keepdim=True)
    return CompositeResult(color, opacity, depth, weights, trans)
