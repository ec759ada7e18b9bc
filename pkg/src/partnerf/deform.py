"""Bidirectional deformation between observation and canonical space.

Rigid part: linear blend skinning with weights taken from the nearest point
on the (posed or rest) mesh. Non-rigid part: per-part offset networks driven
by the surface-time coordinates (u, v, t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .body import PosedBody, Pose, SkinnedBody, SurfaceIndex, apply_blended, blend_transforms, interpolate_on_faces


class OutsideBodyError(ValueError):
    """Raised when a single query point lies beyond the surface cutoff."""


def sinusoidal_encoding(x: torch.Tensor, bands: int) -> torch.Tensor:
    """[sin(2^k pi x_i) for i, k] followed by [cos(2^k pi x_i) for i, k]."""
    freqs = math.pi * 2.0 ** torch.arange(bands, dtype=x.dtype)
    angles = (x.unsqueeze(-1) * freqs).flatten(-2)
    return torch.cat([torch.sin(angles), torch.cos(angles)], -1)


def uvt_input(uv: torch.Tensor, t, ablate_uvt: bool = False, xyz: torch.Tensor | None = None, bands: int = 6):
    """Encoder input for the offset networks.

    Default: encoding of (u, v, t). With ``ablate_uvt`` the surface
    coordinates are replaced by the 3D point, giving an encoding of (x, y, z, t).
    """
    ref = xyz if ablate_uvt else uv
    t_col = torch.as_tensor(t, dtype=ref.dtype).expand(ref.shape[:-1]).unsqueeze(-1)
    return sinusoidal_encoding(torch.cat([ref, t_col], -1), bands)


class OffsetField(nn.Module):
    """MLP from an encoded (u, v, t) to a 3D offset with norm at most ``cap``."""

    def __init__(self, in_dim: int, hidden: int = 128, layers: int = 4, cap: float = 0.1):
        super().__init__()
        dims = [in_dim] + [hidden] * layers
        blocks = []
        for a, b in zip(dims[:-1], dims[1:]):
            blocks += [nn.Linear(a, b), nn.ReLU()]
        self.trunk = nn.Sequential(*blocks)
        self.head = nn.Linear(hidden, 3)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        self.cap = cap

    def forward(self, enc: torch.Tensor) -> torch.Tensor:
        raw = self.head(self.trunk(enc))
        norm = raw.norm(dim=-1, keepdim=True)
        safe = torch.where(norm > 1e-12, norm, torch.ones_like(norm))
        scale = torch.where(norm > 1e-12, self.cap * torch.tanh(norm / self.cap) / safe, torch.ones_like(norm))
        return raw * scale


class PartOffsets(nn.Module):
    """One offset network per body part."""

    def __init__(self, num_parts: int, in_dim: int, hidden: int, layers: int, cap: float):
        super().__init__()
        self.fields = nn.ModuleList(OffsetField(in_dim, hidden, layers, cap) for _ in range(num_parts))

    def forward(self, enc: torch.Tensor, part: np.ndarray) -> torch.Tensor:
        out = enc.new_zeros(enc.shape[0], 3)
        for k, net in enumerate(self.fields):
            sel = np.nonzero(part == k)[0]
            if len(sel):
                idx = torch.from_numpy(sel)
                out = out.index_put((idx,), net(enc[idx]))
        return out


@dataclass
class CanonicalSamples:
    """Observation samples within the surface cutoff, mapped to canonical space."""

    index: np.ndarray  # (M,) rows of the query that fall inside the cutoff
    x_obs: torch.Tensor  # (M, 3)
    x_canonical: torch.Tensor  # (M, 3), differentiable w.r.t. the inverse offsets
    weights: np.ndarray  # (M, J) skinning weights from the posed surface
    uv: np.ndarray  # (M, 2)
    part: np.ndarray  # (M,) part of the dominant weight
    distance: np.ndarray  # (M,) distance to the posed surface
    offset: torch.Tensor  # (M, 3) non-rigid inverse offset


@dataclass
class DeformationResidual:
    d: torch.Tensor  # (M,) ||x_o - x_o'||
    threshold: float

    def hinge(self) -> torch.Tensor:
        """Mean of max(d - threshold, 0); d equal to the threshold contributes nothing."""
        if self.d.numel() == 0:
            return self.d.new_zeros(())
        return torch.clamp(self.d - self.threshold, min=0.0).mean()

    def active(self) -> torch.Tensor:
        return self.d > self.threshold


class Deformer(nn.Module):
    """Holds the body and both directions of per-part offset fields."""

    def __init__(
        self,
        body: SkinnedBody,
        hidden: int = 128,
        layers: int = 4,
        bands: int = 6,
        offset_cap: float = 0.1,
        cutoff: float = 0.1,
        threshold: float = 0.02,
        ablate_uvt: bool = False,
    ):
        super().__init__()
        self.body = body
        self.bands = bands
        self.cutoff = cutoff
        self.threshold = threshold
        self.ablate_uvt = ablate_uvt
        self.offset_cap = offset_cap
        in_dim = (4 if ablate_uvt else 3) * 2 * bands
        self.inverse_offsets = PartOffsets(body.num_parts, in_dim, hidden, layers, offset_cap)
        self.forward_offsets = PartOffsets(body.num_parts, in_dim, hidden, layers, offset_cap)
        self._rest_index = None
        self._joint_to_part = body.joint_to_part

    @property
    def rest_index(self) -> SurfaceIndex:
        if self._rest_index is None:
            self._rest_index = SurfaceIndex(self.body.vertices, self.body.faces)
        return self._rest_index

    def _dtype(self) -> torch.dtype:
        return self.inverse_offsets.fields[0].head.weight.dtype

    def encode(self, uv, t, xyz) -> torch.Tensor:
        return uvt_input(uv, t, self.ablate_uvt, xyz, self.bands)

    def to_canonical(self, posed: PosedBody, x_obs, cutoff: float | None = None) -> CanonicalSamples:
        """Inverse deformation of every query point within ``cutoff`` of the posed surface."""
        cutoff = self.cutoff if cutoff is None else cutoff
        dtype = self._dtype()
        pts = np.asarray(x_obs.detach().cpu() if isinstance(x_obs, torch.Tensor) else x_obs, dtype=np.float64)
        pts = pts.reshape(-1, 3)
        hit = posed.index.query(pts, cutoff)
        weights = interpolate_on_faces(self.body, hit.face, hit.bary, self.body.blend_weights)
        weights = np.maximum(weights, 0.0)
        weights /= np.maximum(weights.sum(1, keepdims=True), 1e-12)
        uv = interpolate_on_faces(self.body, hit.face, hit.bary, self.body.uv_coords)
        part = self._joint_to_part[np.argmax(weights, axis=1)] if len(weights) else np.zeros(0, np.int64)
        inside = pts[hit.index]
        mats = blend_transforms(weights, posed.transforms)
        x_rigid = apply_blended(mats, inside, inverse=True) if len(inside) else inside
        x_o = torch.as_tensor(inside, dtype=dtype)
        enc = self.encode(torch.as_tensor(uv, dtype=dtype), posed.pose.time, x_o)
        offset = self.inverse_offsets(enc, part)
        x_c = torch.as_tensor(x_rigid, dtype=dtype) + offset
        return CanonicalSamples(hit.index, x_o, x_c, weights, uv, part, hit.distance, offset)

    def to_observation(self, posed: PosedBody, x_canonical: torch.Tensor, weights=None, part=None):
        """Forward deformation x_o' = LBS(x_c) + forward offset at the rest-surface (u, v, t).

        ``weights``/``part`` default to the nearest rest-surface values; passing the
        weights used by the inverse step gives a fixed-weight round trip.
        """
        dtype = x_canonical.dtype
        rest = self.rest_index
        hit = rest.query(x_canonical.detach().cpu().numpy())
        bary = rest.query_torch(x_canonical, hit.face)
        uv = interpolate_on_faces(self.body, hit.face, bary, self.body.uv_coords)
        if weights is None:
            w = interpolate_on_faces(self.body, hit.face, hit.bary, self.body.blend_weights)
            w = np.maximum(w, 0.0)
            weights = w / w.sum(1, keepdims=True)
        if part is None:
            part = self._joint_to_part[np.argmax(weights, axis=1)]
        mats = blend_transforms(torch.as_tensor(weights, dtype=dtype), posed.transforms)
        x_rigid = apply_blended(mats, x_canonical)
        enc = self.encode(uv, posed.pose.time, x_canonical)
        return x_rigid + self.forward_offsets(enc, np.asarray(part))

    def consistency_residuals(self, posed: PosedBody, samples: CanonicalSamples | np.ndarray) -> DeformationResidual:
        """Round-trip distances d = ||x_o - x_o'|| for observation samples."""
        if not isinstance(samples, CanonicalSamples):
            samples = self.to_canonical(posed, samples)
        if len(samples.index) == 0:
            return DeformationResidual(samples.x_canonical.new_zeros(0), self.threshold)
        x_back = self.to_observation(posed, samples.x_canonical, samples.weights, samples.part)
        d = (samples.x_obs - x_back).norm(dim=-1)
        return DeformationResidual(d, self.threshold)


def subset(samples: CanonicalSamples, rows) -> CanonicalSamples:
    rows = np.asarray(rows)
    idx = torch.from_numpy(rows).long()
    return CanonicalSamples(
        samples.index[rows], samples.x_obs[idx], samples.x_canonical[idx], samples.weights[rows],
        samples.uv[rows], samples.part[rows], samples.distance[rows], samples.offset[idx],
    )  # fmt: skip


def deform_obs_to_canonical(deformer: Deformer, pose: Pose | PosedBody, x_o):
    """Single-point inverse deformation: returns (x_c, uv, part).

    Raises OutsideBodyError when x_o is beyond the surface cutoff.
    """
    posed = pose if isinstance(pose, PosedBody) else PosedBody(deformer.body, pose)
    s = deformer.to_canonical(posed, np.asarray(x_o, dtype=np.float64).reshape(1, 3))
    if len(s.index) == 0:
        raise OutsideBodyError("point lies beyond the surface cutoff")
    return s.x_canonical[0], s.uv[0], int(s.part[0])


def deform_canonical_to_obs(deformer: Deformer, pose: Pose | PosedBody, x_c, weights=None):
    posed = pose if isinstance(pose, PosedBody) else PosedBody(deformer.body, pose)
    x = torch.as_tensor(np.asarray(x_c, dtype=np.float64) if not isinstance(x_c, torch.Tensor) else x_c)
    x = x.to(deformer._dtype()).reshape(-1, 3)
    w = None if weights is None else np.asarray(weights, dtype=np.float64).reshape(1, -1)
    return deformer.to_observation(posed, x, w)[0]


def consistency_residuals(deformer: Deformer, pose: Pose | PosedBody, samples) -> DeformationResidual:
    posed = pose if isinstance(pose, PosedBody) else PosedBody(deformer.body, pose)
    return deformer.consistency_residuals(posed, samples)
