"""Skinned body model: procedural toy body, file I/O, part segmentation,
linear blend skinning and nearest-surface queries."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .geometry import (
    build_face_grid,
    canonical_rotvec,
    closest_point_barycentric,
    grid_nearest_faces,
    NearSurfaceFilter,
    rotvec_to_matrix,
)

PART_NAMES = ("torso", "legs", "head", "left_arm", "right_arm")
NUM_PARTS = len(PART_NAMES)
TORSO, LEGS, HEAD, LEFT_ARM, RIGHT_ARM = range(NUM_PARTS)

BODY_FORMAT = "partnerf-body"
BODY_FORMAT_VERSION = 1

# SMPL joint order -> part, for loading SMPL-shaped exports.
SMPL_JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar",
    "right_collar", "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hand", "right_hand",
)  # fmt: skip
SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
SMPL_JOINT_TO_PART = (
    TORSO, LEGS, LEGS, TORSO, LEGS, LEGS, TORSO, LEGS, LEGS, TORSO, LEGS, LEGS, HEAD, TORSO,
    TORSO, HEAD, LEFT_ARM, RIGHT_ARM, LEFT_ARM, RIGHT_ARM, LEFT_ARM, RIGHT_ARM, LEFT_ARM, RIGHT_ARM,
)  # fmt: skip


def smpl_part_joint_sets() -> list[list[int]]:
    """Five-part grouping of the 24 SMPL joints."""
    return [[j for j, k in enumerate(SMPL_JOINT_TO_PART) if k == part] for part in range(NUM_PARTS)]


class BodySpecError(ValueError):
    pass


class BodyFormatError(ValueError):
    pass


class DegenerateSkinningError(ArithmeticError):
    pass


@dataclass
class SkinnedBody:
    vertices: np.ndarray  # (N, 3) float32, rest pose
    faces: np.ndarray  # (F, 3) int32
    blend_weights: np.ndarray  # (N, J) float32, row-stochastic
    joint_parents: np.ndarray  # (J,) int, root = -1
    joint_rest_positions: np.ndarray  # (J, 3) float32
    uv_coords: np.ndarray  # (N, 2) float32 in [0, 1]
    part_labels: np.ndarray  # (N,) int32
    part_joint_sets: list[list[int]]
    joint_names: list[str] = field(default_factory=list)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_joints(self) -> int:
        return len(self.joint_parents)

    @property
    def num_parts(self) -> int:
        return len(self.part_joint_sets)

    @property
    def joint_to_part(self) -> np.ndarray:
        out = np.full(self.num_joints, -1, dtype=np.int64)
        for k, joints in enumerate(self.part_joint_sets):
            out[list(joints)] = k
        return out

    def part_bounds(self, vertices: np.ndarray | None = None, pad: float = 0.0) -> np.ndarray:
        """(K, 2, 3) axis-aligned boxes of each part's vertices, dilated by ``pad``."""
        verts = self.vertices if vertices is None else vertices
        boxes = np.empty((self.num_parts, 2, 3), dtype=np.float64)
        for k in range(self.num_parts):
            pts = verts[self.part_labels == k]
            boxes[k, 0] = pts.min(0) - pad
            boxes[k, 1] = pts.max(0) + pad
        return boxes

    def bounds(self, vertices: np.ndarray | None = None, pad: float = 0.0) -> np.ndarray:
        verts = self.vertices if vertices is None else vertices
        return np.stack([verts.min(0) - pad, verts.max(0) + pad])

    def validate(self) -> None:
        """Raise BodyFormatError naming the first violated invariant."""
        n, j = self.num_vertices, self.num_joints
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3 or n == 0:
            raise BodyFormatError("vertices: expected a nonempty (N, 3) array")
        if self.blend_weights.shape != (n, j):
            raise BodyFormatError(f"blend_weights: expected shape {(n, j)}, got {self.blend_weights.shape}")
        if not np.all(np.isfinite(self.vertices)):
            raise BodyFormatError("vertices: non-finite entries")
        if np.any(self.blend_weights < 0):
            raise BodyFormatError("blend_weights: negative entries")
        row_sums = self.blend_weights.astype(np.float64).sum(1)
        bad = np.abs(row_sums - 1.0) > 1e-6
        if np.any(bad):
            i = int(np.argmax(bad))
            raise BodyFormatError(f"blend_weights: row {i} sums to {row_sums[i]:.6f}, expected 1")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise BodyFormatError("faces: expected an (F, 3) array")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise BodyFormatError("faces: index out of range")
        if self.uv_coords.shape != (n, 2):
            raise BodyFormatError(f"uv_coords: expected shape {(n, 2)}")
        if np.any(self.uv_coords < 0) or np.any(self.uv_coords > 1):
            raise BodyFormatError("uv_coords: values outside [0, 1]")
        if self.joint_rest_positions.shape != (j, 3):
            raise BodyFormatError(f"joint_rest_positions: expected shape {(j, 3)}")
        parents = np.asarray(self.joint_parents)
        if parents[0] != -1 or np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, j)):
            raise BodyFormatError("joint_parents: root must be first and parents must precede children")
        covered = sorted(i for joints in self.part_joint_sets for i in joints)
        if covered != list(range(j)):
            raise BodyFormatError("part_joint_sets: must partition the joint indices")
        if self.part_labels.shape != (n,):
            raise BodyFormatError("part_labels: expected shape (N,)")
        if not np.array_equal(self.part_labels, segment_parts(self.blend_weights, self.joint_to_part)):
            raise BodyFormatError("part_labels: inconsistent with the dominant blend weight")


@dataclass
class Pose:
    joint_rotations: np.ndarray  # (J, 3) axis-angle
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time: float = 0.0
    frame_index: int = 0

    def __post_init__(self):
        self.joint_rotations = canonical_rotvec(np.asarray(self.joint_rotations, dtype=np.float64).reshape(-1, 3))
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls, num_joints: int, time: float = 0.0, frame_index: int = 0) -> Pose:
        return cls(np.zeros((num_joints, 3)), np.zeros(3), time, frame_index)

    def rotation_matrices(self) -> np.ndarray:
        return rotvec_to_matrix(self.joint_rotations)


# ---------------------------------------------------------------------------
# procedural toy body


@dataclass
class BodySpec:
    """Parameters of the procedural capsule body.

    The skeleton is six chains (torso, head, two arms, two legs). A body with
    ``joint_count`` joints gets one joint per chain plus the remainder spread
    round-robin over arms, legs, torso and head.
    """

    joint_count: int = 16
    ring_segments: int = 12
    body_rings: int = 6
    cap_rings: int = 2
    torso_length: float = 0.5
    head_length: float = 0.35
    arm_length: float = 0.62
    leg_length: float = 0.85
    torso_radius: float = 0.13
    head_radius: float = 0.085
    arm_radius: float = 0.05
    leg_radius: float = 0.065
    atlas_texels: int = 512


# chain order used when distributing extra joints
_CHAIN_FILL_ORDER = ("left_arm", "right_arm", "left_leg", "right_leg", "torso", "head")


def _chain_layout(spec: BodySpec):
    shoulder_y = spec.torso_length - 0.06
    shoulder_x = spec.torso_radius + 0.04
    hip_x = 0.65 * spec.torso_radius
    return {
        "torso": ((0.0, 0.0, 0.0), (0.0, 1.0, 0.0), spec.torso_length, spec.torso_radius, TORSO),
        "head": ((0.0, spec.torso_length, 0.0), (0.0, 1.0, 0.0), spec.head_length, spec.head_radius, HEAD),
        "left_arm": ((shoulder_x, shoulder_y, 0.0), (1.0, 0.0, 0.0), spec.arm_length, spec.arm_radius, LEFT_ARM),
        "right_arm": ((-shoulder_x, shoulder_y, 0.0), (-1.0, 0.0, 0.0), spec.arm_length, spec.arm_radius, RIGHT_ARM),
        "left_leg": ((hip_x, -0.02, 0.0), (0.0, -1.0, 0.0), spec.leg_length, spec.leg_radius, LEGS),
        "right_leg": ((-hip_x, -0.02, 0.0), (0.0, -1.0, 0.0), spec.leg_length, spec.leg_radius, LEGS),
    }


def _capsule(p0, p1, radius, around, body_rings, cap_rings):
    """Vertices, faces and chart coordinates (a, l) of a closed capsule."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    d = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)

    # profile: (axial position, radial distance)
    profile = []
    for k in range(1, cap_rings + 1):
        phi = -math.pi / 2 + k * (math.pi / 2) / cap_rings
        profile.append((radius * math.sin(phi), radius * math.cos(phi)))
    for m in range(1, body_rings + 1):
        profile.append((length * m / (body_rings + 1), radius))
    for k in range(cap_rings):
        phi = k * (math.pi / 2) / cap_rings
        profile.append((length + radius * math.sin(phi), radius * math.cos(phi)))
    full = [(-radius, 0.0)] + profile + [(length + radius, 0.0)]
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(np.diff([p[0] for p in full]), np.diff([p[1] for p in full])))])
    along = arc / arc[-1]

    verts, chart = [], []
    verts.append(p0 - radius * d)
    chart.append((0.5, 0.0))
    for r_idx, (ax_pos, rad) in enumerate(profile):
        for s in range(around + 1):
            theta = 2 * math.pi * s / around
            verts.append(p0 + ax_pos * d + rad * (math.cos(theta) * e1 + math.sin(theta) * e2))
            chart.append((s / around, along[r_idx + 1]))
    verts.append(p1 + radius * d)
    chart.append((0.5, 1.0))

    faces = []
    ring = around + 1
    first = 1
    for s in range(around):
        faces.append((0, first + s + 1, first + s))
    for r in range(len(profile) - 1):
        base0 = first + r * ring
        base1 = base0 + ring
        for s in range(around):
            a, b = base0 + s, base0 + s + 1
            c, e = base1 + s, base1 + s + 1
            faces.append((a, b, e))
            faces.append((a, e, c))
    last = first + (len(profile) - 1) * ring
    tip = len(verts) - 1
    for s in range(around):
        faces.append((last + s, last + s + 1, tip))
    return np.array(verts), np.array(faces, dtype=np.int64), np.array(chart)


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def build_toy_body(spec: BodySpec | None = None) -> SkinnedBody:
    """Procedural capsule-limb figure with five parts and a packed UV atlas."""
    spec = spec or BodySpec()
    if spec.joint_count < 6:
        raise BodySpecError(f"joint_count must be >= 6 to form five parts, got {spec.joint_count}")
    if spec.ring_segments < 3 or spec.body_rings < 1 or spec.cap_rings < 1:
        raise BodySpecError("mesh resolution too low")

    counts = {name: 1 for name in _CHAIN_FILL_ORDER}
    for i in range(spec.joint_count - 6):
        counts[_CHAIN_FILL_ORDER[i % len(_CHAIN_FILL_ORDER)]] += 1

    layout = _chain_layout(spec)
    joint_pos, parents, joint_part, names = [], [], [], []
    segments = []  # (start, end, radius, joint)
    chain_joints = {}
    for name in ("torso", "head", "left_arm", "right_arm", "left_leg", "right_leg"):
        start, direction, length, radius, part = layout[name]
        start, direction = np.asarray(start), np.asarray(direction)
        n = counts[name]
        idx = []
        for s in range(n):
            j = len(joint_pos)
            a = start + direction * length * s / n
            b = start + direction * length * (s + 1) / n
            joint_pos.append(a)
            joint_part.append(part)
            names.append(f"{name}_{s}")
            if s > 0:
                parents.append(idx[-1])
            elif name == "torso":
                parents.append(-1)
            elif name in ("head", "left_arm", "right_arm"):
                parents.append(chain_joints["torso"][-1])
            else:
                parents.append(chain_joints["torso"][0])
            idx.append(j)
            segments.append((a, b, radius, j))
        chain_joints[name] = idx

    num_joints = len(joint_pos)
    cols = math.ceil(math.sqrt(num_joints))
    rows = math.ceil(num_joints / cols)
    gutter = 2.0 / spec.atlas_texels
    tile_w, tile_h = 1.0 / cols, 1.0 / rows

    all_v, all_f, all_uv, owner = [], [], [], []
    offset = 0
    for a, b, radius, j in segments:
        v, f, chart = _capsule(a, b, radius, spec.ring_segments, spec.body_rings, spec.cap_rings)
        col, row = j % cols, j // cols
        u = col * tile_w + gutter + chart[:, 0] * (tile_w - 2 * gutter)
        w = row * tile_h + gutter + chart[:, 1] * (tile_h - 2 * gutter)
        all_v.append(v)
        all_f.append(f + offset)
        all_uv.append(np.stack([u, w], 1))
        owner.append(np.full(len(v), j))
        offset += len(v)
    vertices = np.concatenate(all_v)
    faces = np.concatenate(all_f)
    uv = np.clip(np.concatenate(all_uv), 0.0, 1.0)

    # inverse-distance falloff over the two nearest bones, distances in units of bone radius
    dist = np.stack([_segment_distance(vertices, a, b) / r for a, b, r, _ in segments], 1)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :2]
    d2 = np.take_along_axis(dist, nearest, 1)
    falloff = 1.0 / np.maximum(d2, 1e-3) ** 4
    weights = np.zeros((len(vertices), num_joints))
    rows_idx = np.arange(len(vertices))[:, None]
    weights[rows_idx, nearest] = falloff
    weights = _normalize_rows_f32(weights)

    part_sets = [[j for j in range(num_joints) if joint_part[j] == k] for k in range(NUM_PARTS)]
    joint_to_part = np.asarray(joint_part)
    body = SkinnedBody(
        vertices=vertices.astype(np.float32),
        faces=faces.astype(np.int32),
        blend_weights=weights,
        joint_parents=np.asarray(parents, dtype=np.int64),
        joint_rest_positions=np.asarray(joint_pos, dtype=np.float32),
        uv_coords=uv.astype(np.float32),
        part_labels=segment_parts(weights, joint_to_part).astype(np.int32),
        part_joint_sets=part_sets,
        joint_names=names,
    )
    body.validate()
    return body


def _normalize_rows_f32(weights: np.ndarray) -> np.ndarray:
    w = weights / weights.sum(1, keepdims=True)
    w32 = w.astype(np.float32)
    # push the float32 rounding residue onto the largest entry
    resid = 1.0 - w32.astype(np.float64).sum(1)
    top = np.argmax(w32, axis=1)
    w32[np.arange(len(w32)), top] += resid.astype(np.float32)
    return w32


def segment_parts(weights: np.ndarray, joint_to_part) -> np.ndarray:
    """Part of each vertex's dominant joint; ties go to the lowest joint index."""
    dominant = np.argmax(np.asarray(weights), axis=1)  # argmax returns the first maximum
    return np.asarray(joint_to_part)[dominant]


# ---------------------------------------------------------------------------
# file format


def save_body(body: SkinnedBody, path: str | Path) -> None:
    """Write ``<stem>.json`` + ``<stem>.bin``; ``path`` may name either file or the stem."""
    json_path, bin_path = _body_paths(path)
    arrays = [
        ("vertices", "<f4", body.vertices),
        ("blend_weights", "<f4", body.blend_weights),
        ("uv_coords", "<f4", body.uv_coords),
        ("joint_rest_positions", "<f4", body.joint_rest_positions),
        ("faces", "<i4", body.faces),
        ("part_labels", "<i4", body.part_labels),
    ]
    layout, blobs, offset = [], [], 0
    for name, dtype, arr in arrays:
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        layout.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    meta = {
        "format": BODY_FORMAT,
        "version": BODY_FORMAT_VERSION,
        "N": body.num_vertices,
        "J": body.num_joints,
        "K": body.num_parts,
        "F": len(body.faces),
        "parents": [int(p) for p in body.joint_parents],
        "part_joint_sets": [[int(j) for j in s] for s in body.part_joint_sets],
        "part_names": list(PART_NAMES[: body.num_parts]),
        "joint_names": list(body.joint_names),
        "binary": bin_path.name,
        "layout": layout,
    }
    json_path.write_text(json.dumps(meta, indent=1))
    bin_path.write_bytes(b"".join(blobs))


def _body_paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def load_skinned_body(path: str | Path) -> SkinnedBody:
    json_path, bin_path = _body_paths(path)
    try:
        meta = json.loads(json_path.read_text())
    except FileNotFoundError as e:
        raise BodyFormatError(f"body metadata not found: {json_path}") from e
    for key in ("format", "version", "N", "J", "parents", "part_joint_sets", "layout"):
        if key not in meta:
            raise BodyFormatError(f"{key}: missing field in {json_path.name}")
    if meta["format"] != BODY_FORMAT or meta["version"] != BODY_FORMAT_VERSION:
        raise BodyFormatError(f"format: unsupported {meta['format']} v{meta['version']}")
    bin_path = json_path.parent / meta.get("binary", bin_path.name)
    raw = bin_path.read_bytes()
    arrays = {}
    for entry in meta["layout"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(raw):
            raise BodyFormatError(f"{entry['name']}: block exceeds binary file size")
        arrays[entry["name"]] = np.frombuffer(raw[start : start + nbytes], dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    for key in ("vertices", "blend_weights", "uv_coords", "joint_rest_positions", "faces", "part_labels"):
        if key not in arrays:
            raise BodyFormatError(f"{key}: missing block")
    if arrays["vertices"].shape[0] != meta["N"] or arrays["blend_weights"].shape != (meta["N"], meta["J"]):
        raise BodyFormatError("N/J: header does not match array shapes")
    body = SkinnedBody(
        vertices=arrays["vertices"],
        faces=arrays["faces"],
        blend_weights=arrays["blend_weights"],
        joint_parents=np.asarray(meta["parents"], dtype=np.int64),
        joint_rest_positions=arrays["joint_rest_positions"],
        uv_coords=arrays["uv_coords"],
        part_labels=arrays["part_labels"],
        part_joint_sets=[list(s) for s in meta["part_joint_sets"]],
        joint_names=list(meta.get("joint_names", [])),
    )
    if len(body.joint_parents) != meta["J"]:
        raise BodyFormatError("parents: length does not match J")
    body.validate()
    return body


# ---------------------------------------------------------------------------
# skinning


def skinning_matrices(body: SkinnedBody, pose: Pose) -> np.ndarray:
    """(J, 4, 4) per-joint transforms mapping rest-pose points to the posed space."""
    rots = pose.rotation_matrices()
    rest = body.joint_rest_positions.astype(np.float64)
    parents = body.joint_parents
    world = np.zeros((body.num_joints, 4, 4))
    for j in range(body.num_joints):
        local = np.eye(4)
        local[:3, :3] = rots[j]
        p = parents[j]
        local[:3, 3] = rest[j] - (rest[p] if p >= 0 else 0.0)
        world[j] = local if p < 0 else world[p] @ local
    out = world.copy()
    out[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], rest)
    out[:, :3, 3] += pose.root_translation
    return out


def blend_transforms(point_weights, transforms):
    """Blend (J, 4, 4) transforms with (M, J) weights into (M, 4, 4)."""
    if isinstance(point_weights, torch.Tensor):
        mats = torch.as_tensor(transforms, dtype=point_weights.dtype)
        return torch.einsum("mj,jab->mab", point_weights, mats)
    return np.einsum("mj,jab->mab", point_weights, transforms)


def apply_blended(mats, points, inverse: bool = False):
    """Apply (M, 4, 4) affine blends to (M, 3) points, or their matrix inverse."""
    is_torch = isinstance(points, torch.Tensor)
    lib = torch if is_torch else np
    lin = mats[:, :3, :3]
    trans = mats[:, :3, 3]
    if not inverse:
        return lib.einsum("mab,mb->ma", lin, points) + trans
    det = torch.linalg.det(lin) if is_torch else np.linalg.det(lin)
    if (det.abs() if is_torch else np.abs(det)).min() < 1e-9:
        raise DegenerateSkinningError("blended skinning matrix is singular")
    rhs = points - trans
    if is_torch:
        return torch.linalg.solve(lin, rhs.unsqueeze(-1)).squeeze(-1)
    return np.linalg.solve(lin, rhs[..., None])[..., 0]


def lbs_transform(body: SkinnedBody, pose: Pose, direction: str, points, point_weights):
    """Blend the per-joint transforms with ``point_weights`` and apply them.

    ``direction="inverse"`` applies the inverse of the blended matrix, so a
    forward/inverse pair with the same weights is an exact round trip.
    Works on numpy arrays and torch tensors alike.
    """
    if direction not in ("forward", "inverse"):
        raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
    mats = blend_transforms(point_weights, skinning_matrices(body, pose))
    return apply_blended(mats, points, inverse=direction == "inverse")


def posed_vertices(body: SkinnedBody, pose: Pose) -> np.ndarray:
    verts = body.vertices.astype(np.float64)
    return lbs_transform(body, pose, "forward", verts, body.blend_weights.astype(np.float64))


# ---------------------------------------------------------------------------
# nearest surface queries


@dataclass
class SurfaceHit:
    face: np.ndarray  # (M,) int64
    bary: np.ndarray  # (M, 3)
    distance: np.ndarray  # (M,)
    index: np.ndarray  # (M,) rows of the query these hits belong to


_FILTER_MAX_VOXELS = 8_000_000


class SurfaceIndex:
    """Exact nearest-triangle queries on a fixed (posed or rest) mesh.

    Faces are bucketed in a uniform grid; a query scans rings of cells around
    the point until the distance to the unscanned region exceeds the best
    face found so far.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, cell: float | None = None):
        if len(vertices) == 0 or len(faces) == 0:
            raise BodyFormatError("empty mesh")
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(faces, dtype=np.int64)
        if cell is None:
            tri = self.vertices[self.faces]
            cell = 1.2 * float(np.linalg.norm(tri - np.roll(tri, 1, axis=1), axis=2).mean())
        self.cell = cell
        self.lo, self.dims, self.cell_start, self.cell_faces = build_face_grid(self.vertices, self.faces, cell, cell)
        self._filters: dict[float, NearSurfaceFilter] = {}

    def _maybe_near(self, pts: np.ndarray, max_distance: float) -> np.ndarray:
        """Rows that may lie within ``max_distance`` of the mesh (conservative)."""
        voxel = self.cell / 2
        extent = self.vertices.max(0) - self.vertices.min(0) + 2 * (max_distance + voxel)
        if np.prod(extent / voxel + 2) > _FILTER_MAX_VOXELS:
            # the prefilter only saves work; a generous cutoff would need a huge grid
            return np.arange(len(pts))
        if max_distance not in self._filters:
            self._filters[max_distance] = NearSurfaceFilter(self.vertices, self.faces, max_distance, voxel)
        return self._filters[max_distance](pts)

    def nearest(self, points: np.ndarray, max_distance: float = np.inf):
        """(face, distance); face is -1 (distance inf) where nothing lies within ``max_distance``."""
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        max_distance = float(max_distance)
        rows = self._maybe_near(pts, max_distance) if np.isfinite(max_distance) else None
        sub = pts if rows is None else np.ascontiguousarray(pts[rows])
        f, d2 = grid_nearest_faces(
            sub, self.vertices, self.faces, self.lo, self.cell, self.dims, self.cell_start, self.cell_faces, max_distance
        )
        if rows is None:
            return f, np.sqrt(d2)
        face = np.full(len(pts), -1, dtype=np.int64)
        dist = np.full(len(pts), np.inf)
        face[rows] = f
        dist[rows] = np.sqrt(d2)
        return face, dist

    def query(self, points: np.ndarray, max_distance: float = np.inf) -> SurfaceHit:
        """Nearest face, closest-point barycentrics and distance for each point.

        With a finite ``max_distance`` the result covers only points within
        that distance; ``SurfaceHit.index`` maps rows back to the input.
        """
        pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        face, dist = self.nearest(pts, max_distance)
        keep = np.nonzero(face >= 0)[0]
        face, dist = face[keep], dist[keep]
        tri = torch.from_numpy(self.vertices[self.faces[face]])
        bary = closest_point_barycentric(torch.from_numpy(pts[keep]), tri[:, 0], tri[:, 1], tri[:, 2]).numpy()
        return SurfaceHit(face, bary, dist, keep)

    def query_torch(self, points: torch.Tensor, face: np.ndarray) -> torch.Tensor:
        """Differentiable barycentrics of ``points`` on the given (fixed) faces."""
        tri = torch.as_tensor(self.vertices[self.faces[face]], dtype=points.dtype)
        return closest_point_barycentric(points, tri[:, 0], tri[:, 1], tri[:, 2])


def interpolate_on_faces(body: SkinnedBody, face: np.ndarray, bary, attribute: np.ndarray):
    """Barycentric interpolation of a per-vertex attribute over the given faces."""
    corners = body.faces[face]
    if isinstance(bary, torch.Tensor):
        vals = torch.as_tensor(attribute[corners], dtype=bary.dtype)
        return (bary.unsqueeze(-1) * vals).sum(-2)
    return np.einsum("mk,mkc->mc", bary, attribute[corners].astype(np.float64))


def nearest_surface_weights(body: SkinnedBody, posed_vertices: np.ndarray, query, index: SurfaceIndex | None = None):
    """Blend weights, uv and surface distance for query point(s).

    Returns ``(point_weights, uv, surface_distance)`` with shapes (J,), (2,), ()
    for a single 3-vector or (M, J), (M, 2), (M,) for a batch.
    """
    if body.num_vertices == 0 or len(body.faces) == 0:
        raise BodyFormatError("empty mesh")
    index = index or SurfaceIndex(posed_vertices, body.faces)
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    hit = index.query(q.reshape(-1, 3))
    weights = interpolate_on_faces(body, hit.face, hit.bary, body.blend_weights)
    weights = np.maximum(weights, 0.0)
    weights /= weights.sum(1, keepdims=True)
    uv = interpolate_on_faces(body, hit.face, hit.bary, body.uv_coords)
    if single:
        return weights[0], uv[0], float(hit.distance[0])
    return weights, uv, hit.distance


class PosedBody:
    """A body under one pose, with its skinning transforms and surface index."""

    def __init__(self, body: SkinnedBody, pose: Pose):
        self.body = body
        self.pose = pose
        self.transforms = skinning_matrices(body, pose)
        self.vertices = lbs_transform(body, pose, "forward", body.vertices.astype(np.float64), body.blend_weights.astype(np.float64))
        self._index = None

    @property
    def index(self) -> SurfaceIndex:
        if self._index is None:
            self._index = SurfaceIndex(self.vertices, self.body.faces)
        return self._index

    def part_bounds(self, pad: float = 0.0) -> np.ndarray:
        return self.body.part_bounds(self.vertices, pad)

    def bounds(self, pad: float = 0.0) -> np.ndarray:
        return self.body.bounds(self.vertices, pad)
