"""Pinhole cameras, rays, depth sampling and bilinear lookups into source views.

Conventions: poses are world-to-camera, the camera looks down +z, image rows
grow downwards (+y), and pixel (u, v) = (column, row) has its center at the
integer coordinate.
"""
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx, sy = width / self.width, height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform ``x_cam = R @ x_world + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det=+1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0)) -> "Pose":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(R, -R @ eye)

    def __eq__(self, other):
        return (isinstance(other, Pose) and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))


class Ray(NamedTuple):
    origin: torch.Tensor
    direction: torch.Tensor


def _pose_tensors(pose: Pose, like: torch.Tensor):
    R = torch.as_tensor(pose.rotation, dtype=like.dtype, device=like.device)
    t = torch.as_tensor(pose.translation, dtype=like.dtype, device=like.device)
    return R, t


def pixel_to_ray(intr: Intrinsics, pose: Pose, u, v) -> Ray:
    """Back-project pixel coordinates to world-space rays.

    ``u`` and ``v`` may be scalars or tensors of any (matching) shape; the
    returned origin/direction carry a trailing dimension of 3.
    """
    if not torch.is_tensor(u):
        u = torch.tensor(u, dtype=torch.get_default_dtype())
    v = torch.as_tensor(v, dtype=u.dtype)
    R, t = _pose_tensors(pose, u)
    d_cam = torch.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, torch.ones_like(u)], dim=-1)
    d_world = d_cam @ R  # R^T d for row vectors
    d_world = d_world / torch.linalg.norm(d_world, dim=-1, keepdim=True)
    origin = (-(R.T @ t)).expand_as(d_world)
    return Ray(origin, d_world)


def project(points: torch.Tensor, intr: Intrinsics, pose: Pose):
    """Project world points to ``(u, v, depth)``; depth is camera-frame z.

    Points at or behind the camera plane get finite but meaningless pixel
    coordinates; callers decide validity from the depth.
    """
    R, t = _pose_tensors(pose, points)
    x_cam = points @ R.T + t
    z = x_cam[..., 2]
    z_safe = torch.where(z.abs() < 1e-12, torch.full_like(z, 1e-12), z)
    u = intr.fx * x_cam[..., 0] / z_safe + intr.cx
    v = intr.fy * x_cam[..., 1] / z_safe + intr.cy
    return u, v, z


def bilinear_sample(fmap: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Sample an ``H x W x C`` map at continuous pixel coordinates.

    Coordinates outside ``[0, W-1] x [0, H-1]`` are clamped to the border;
    callers are expected to mask them out. Differentiable w.r.t. ``fmap``.
    """
    H, W = fmap.shape[0], fmap.shape[1]
    u = torch.as_tensor(u, dtype=fmap.dtype)
    v = torch.as_tensor(v, dtype=fmap.dtype)
    u = u.clamp(0, W - 1)
    v = v.clamp(0, H - 1)
    u0 = torch.floor(u)
    v0 = torch.floor(v)
    wu = (u - u0).unsqueeze(-1)
    wv = (v - v0).unsqueeze(-1)
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=W - 1)
    v1 = (v0 + 1).clamp(max=H - 1)

    flat = fmap.reshape(H * W, -1)

    def at(vi, ui):
        return flat[(vi * W + ui).reshape(-1)].reshape(*ui.shape, -1)

    top = at(v0, u0) * (1 - wu) + at(v0, u1) * wu
    bottom = at(v1, u0) * (1 - wu) + at(v1, u1) * wu
    return top * (1 - wv) + bottom * wv


def sample_along_ray(near: float, far: float, n_samples: int, stratified: bool = False,
                     generator: Optional[torch.Generator] = None, n_rays: int = 1,
                     dtype=None) -> torch.Tensor:
    """Depths in ``[near, far]``, one per equal-width bin. Shape ``(n_rays, K)``."""
    if n_samples < 1:
        raise ValueError("need at least one sample per ray")
    if not near < far:
        raise ValueError("near must be smaller than far")
    dtype = dtype or torch.get_default_dtype()
    step = (far - near) / n_samples
    lower = near + step * torch.arange(n_samples, dtype=dtype)
    if stratified:
        jitter = torch.rand(n_rays, n_samples, generator=generator, dtype=dtype)
    else:
        jitter = torch.full((n_rays, n_samples), 0.5, dtype=dtype)
    return lower + step * jitter


@dataclass
class SourceView:
    image: torch.Tensor  # H x W x 3
    features: torch.Tensor  # h x w x C
    intr: Intrinsics
    pose: Pose


@dataclass
class SampleSet:
    depths: torch.Tensor  # R x K
    points: torch.Tensor  # R x K x 3
    dirs: torch.Tensor  # R x 3
    features: torch.Tensor  # N x R x K x C
    colors: torch.Tensor  # N x R x K x 3
    valid: torch.Tensor  # N x R x K, bool


def _grid_bilinear(fmap: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Same interpolation as :func:`bilinear_sample` via the fused ``grid_sample`` kernel.

    Used for wide feature maps where the gather-based version dominates the
    step time. Agrees with ``bilinear_sample`` up to rounding of the
    coordinate normalization.
    """
    h, w = fmap.shape[:2]
    gx = (u.clamp(0, w - 1) * (2.0 / max(w - 1, 1)) - 1).to(fmap.dtype)
    gy = (v.clamp(0, h - 1) * (2.0 / max(h - 1, 1)) - 1).to(fmap.dtype)
    grid = torch.stack([gx, gy], -1).reshape(1, 1, -1, 2)
    out = F.grid_sample(fmap.permute(2, 0, 1).unsqueeze(0), grid, mode="bilinear", align_corners=True)
    return out[0, :, 0].T.reshape(*u.shape, -1)


def gather_source_samples(points: torch.Tensor, sources: Sequence[SourceView]):
    """Project ``points`` (any leading shape, last dim 3) into every source view.

    Returns stacked ``(features, colors, valid)`` with a leading view axis.
    Invalid entries (behind the camera or outside the image) are zero-filled.
    """
    feats: List[torch.Tensor] = []
    colors: List[torch.Tensor] = []
    valids: List[torch.Tensor] = []
    for src in sources:
        H, W = src.image.shape[:2]
        h, w = src.features.shape[:2]
        u, v, z = project(points, src.intr, src.pose)
        valid = (z > 1e-6) & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
        mask = valid.unsqueeze(-1).to(points.dtype)
        c = bilinear_sample(src.image.to(points.dtype), u, v) * mask
        f = _grid_bilinear(src.features, u * (w / W), v * (h / H))
        feats.append(f * mask.to(f.dtype))
        colors.append(c)
        valids.append(valid)
    return torch.stack(feats), torch.stack(colors), torch.stack(valids)


def build_sample_set(origins: torch.Tensor, dirs: torch.Tensor, depths: torch.Tensor,
                     sources: Sequence[SourceView]) -> SampleSet:
    points = origins.unsqueeze(-2) + depths.unsqueeze(-1) * dirs.unsqueeze(-2)
    feats, colors, valid = gather_source_samples(points, sources)
    return SampleSet(depths, points, dirs, feats, colors, valid)
