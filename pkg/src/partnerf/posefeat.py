"""Part-level pose embedding: per-pose tri-plane features, key-pose retrieval
and cross-attention fusion with learnable appearance latents."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .body import Pose, SkinnedBody
from .geometry import geodesic_angle, rotvec_to_matrix


class RetrievalError(LookupError):
    pass


def extract_part_rotations(pose: Pose, part: int, body: SkinnedBody) -> np.ndarray:
    """Axis-angle rotations of the part's joints, ordered by joint index."""
    joints = sorted(body.part_joint_sets[part])
    return pose.joint_rotations[joints].copy()


def pose_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean geodesic angle (radians) between corresponding joint rotations."""
    a, b = np.asarray(a, dtype=np.float64).reshape(-1, 3), np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if a.shape != b.shape:
        raise ValueError(f"joint count mismatch: {len(a)} vs {len(b)}")
    return float(geodesic_angle(rotvec_to_matrix(a), rotvec_to_matrix(b)).mean())


def pose_distances(target: np.ndarray, bank_rotations: np.ndarray) -> np.ndarray:
    """Vectorised pose_distance of one (n, 3) target against (E, n, 3) entries."""
    target = np.asarray(target, dtype=np.float64)
    bank_rotations = np.asarray(bank_rotations, dtype=np.float64)
    if bank_rotations.shape[1:] != target.shape:
        raise ValueError("joint count mismatch between target and bank")
    rt = rotvec_to_matrix(target)
    rb = rotvec_to_matrix(bank_rotations)
    return geodesic_angle(rt[None], rb).mean(-1)


class PoseBank(nn.Module):
    """One entry per training frame: its per-part rotations and learnable tri-planes.

    ``planes`` has shape (E, K, 3, C, R, R); plane 0 is indexed by (y, z),
    plane 1 by (x, z) and plane 2 by (x, y), each normalised to the part's
    canonical box.
    """

    def __init__(self, body: SkinnedBody, poses: list[Pose], part_boxes: np.ndarray, resolution: int = 32, channels: int = 16):
        super().__init__()
        self.frame_indices = [int(p.frame_index) for p in poses]
        self.part_joints = [sorted(s) for s in body.part_joint_sets]
        self.rotations = [
            np.stack([extract_part_rotations(p, k, body) for p in poses]) if poses else np.zeros((0, len(j), 3))
            for k, j in enumerate(self.part_joints)
        ]
        self.register_buffer("part_boxes", torch.as_tensor(part_boxes, dtype=torch.float32))
        # identical (zero) start for every entry; entries only diverge through their own frames
        self.planes = nn.Parameter(torch.zeros(len(poses), body.num_parts, 3, channels, resolution, resolution))

    def __len__(self) -> int:
        return len(self.frame_indices)

    @property
    def num_parts(self) -> int:
        return len(self.part_joints)

    def slot(self, frame_index: int) -> int:
        return self.frame_indices.index(int(frame_index))

    def part_features(self, entry: int, part: int) -> torch.Tensor:
        return self.planes[entry, part]

    def retrieved_features(self, pose: Pose, part: int, top: int = 5, tau: float = 0.1) -> torch.Tensor:
        target = pose.joint_rotations[self.part_joints[part]]
        idx, w = retrieve_keyposes(target, self, part, top, tau)
        entries = self.planes[torch.from_numpy(idx), part]
        return interpolate_part_features(entries, torch.as_tensor(w, dtype=entries.dtype))


def retrieve_keyposes(target: np.ndarray, bank: PoseBank, part: int, top: int = 5, tau: float = 0.1):
    """Indices of the ``top`` closest bank entries for one part, and softmax(-d/tau) weights.

    Ties in distance go to the lower frame index. ``top`` is clamped to the
    bank size.
    """
    if len(bank) == 0:
        raise RetrievalError("pose bank is empty")
    dist = pose_distances(np.asarray(target).reshape(-1, 3), bank.rotations[part])
    order = np.lexsort((np.asarray(bank.frame_indices), dist))[: min(top, len(bank))]
    logits = -dist[order] / tau
    w = np.exp(logits - logits.max())
    return order, w / w.sum()


def interpolate_part_features(entries: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted sum over the leading axis of (n, 3, C, R, R) plane stacks."""
    if entries.shape[0] != weights.shape[0]:
        raise ValueError("one weight per entry required")
    return torch.tensordot(weights, entries, dims=1)


def normalize_to_box(x: torch.Tensor, box) -> torch.Tensor:
    box = torch.as_tensor(box, dtype=x.dtype)
    return ((x - box[0]) / (box[1] - box[0])).clamp(0.0, 1.0)


def sample_pose_feature(planes: torch.Tensor, x_canonical: torch.Tensor, box) -> torch.Tensor:
    """Bilinear tri-plane lookup, concatenated in x, y, z order: (M, 3C).

    ``planes`` is (3, C, R, R) with node (i, j) at normalised coordinates
    (i / (R-1), j / (R-1)); points outside the box clamp to its boundary.
    """
    u = normalize_to_box(x_canonical, box)
    pairs = torch.stack([u[:, [1, 2]], u[:, [0, 2]], u[:, [0, 1]]])  # (3, M, 2): (row coord, col coord)
    grid = (pairs.flip(-1) * 2.0 - 1.0).unsqueeze(2)  # grid_sample wants (col, row)
    feats = F.grid_sample(planes, grid, mode="bilinear", padding_mode="border", align_corners=True)
    return feats[..., 0].permute(2, 0, 1).reshape(x_canonical.shape[0], -1)


class AppearanceBank(nn.Module):
    def __init__(self, count: int = 16, dim: int = 32):
        super().__init__()
        self.latents = nn.Parameter(torch.randn(count, dim))

    def __len__(self) -> int:
        return self.latents.shape[0]


class CrossAttentionFusion(nn.Module):
    """Single-head attention from a part's pose feature onto the appearance latents.

    Output is [P_k, attention] by default. ``use_attention_output=False``
    returns P_k alone; ``use_pose_feature=False`` returns the attention
    output alone.
    """

    def __init__(
        self,
        pose_dim: int,
        latent_dim: int,
        attn_dim: int = 32,
        use_attention_output: bool = True,
        use_pose_feature: bool = True,
    ):
        super().__init__()
        self.query = nn.Linear(pose_dim, attn_dim)
        self.key = nn.Linear(latent_dim, attn_dim)
        self.value = nn.Linear(latent_dim, attn_dim)
        self.attn_dim = attn_dim
        self.pose_dim = pose_dim
        self.use_attention_output = use_attention_output
        self.use_pose_feature = use_pose_feature

    @property
    def out_dim(self) -> int:
        return self.pose_dim * self.use_pose_feature + self.attn_dim * self.use_attention_output

    def attend(self, pose_feature: torch.Tensor, latents: torch.Tensor):
        q = self.query(pose_feature)
        k = self.key(latents)
        v = self.value(latents)
        attn = torch.softmax(q @ k.T / math.sqrt(self.attn_dim), dim=-1)
        return attn @ v, attn

    def forward(self, pose_feature: torch.Tensor, latents: torch.Tensor | None) -> torch.Tensor:
        parts = []
        if self.use_pose_feature:
            parts.append(pose_feature)
        if self.use_attention_output and latents is not None:
            parts.append(self.attend(pose_feature, latents)[0])
        return torch.cat(parts, -1)


def fuse_appearance(pose_feature: torch.Tensor, bank: AppearanceBank, fusion: CrossAttentionFusion) -> torch.Tensor:
    if len(bank) == 0:
        raise ValueError("appearance bank is empty")
    return fusion(pose_feature, bank.latents)


@dataclass
class RetrievalRecord:
    frame_index: int
    part: int
    indices: list[int]
    frames: list[int]
    weights: list[float]
