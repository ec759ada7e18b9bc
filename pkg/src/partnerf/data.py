"""Synthetic articulated-body sequences and the on-disk dataset layout.

A dataset holds one pose per frame (strictly increasing time) and a list of
images; each image pairs a frame with its own camera and a split tag. The
generator renders the posed toy body with an unlit albedo texture and a z-buffer
rasterizer, so masks match silhouettes exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .body import BodySpec, Pose, SkinnedBody, build_toy_body, load_skinned_body, posed_vertices, save_body
from .render import Camera

SPLITS = ("train", "novel-view", "novel-pose")
MOTIONS = ("arm-swing", "static")
DATASET_FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class ImageRecord:
    index: int
    frame: int
    split: str
    camera: Camera
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray | None  # (H, W) bool


@dataclass
class Dataset:
    body: SkinnedBody
    poses: list[Pose]
    images: list[ImageRecord]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ImageRecord]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return [im for im in self.images if im.split == name]

    def train_frames(self) -> list[int]:
        return sorted({im.frame for im in self.split("train")})

    @property
    def resolution(self) -> tuple[int, int]:
        im = self.images[0].image
        return im.shape[1], im.shape[0]


@dataclass
class SequenceSpec:
    frames: int = 12
    resolution: int = 64
    motion: str = "arm-swing"
    seed: int = 0
    fps: float = 30.0
    camera_distance: float = 3.2
    camera_height: float = 0.5
    focal_scale: float = 1.524  # focal length in units of image width
    swing_period: float = 8.0  # frames per arm-swing cycle
    orbit_step: float | None = None  # degrees per frame; default covers a full turn over the train frames
    train_fraction: float = 2.0 / 3.0
    novel_views: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    body: BodySpec = field(default_factory=BodySpec)


# ---------------------------------------------------------------------------
# motion and texture programs


def motion_pose(body: SkinnedBody, frame: int, count: int, spec: SequenceSpec, phases: np.ndarray) -> Pose:
    rot = np.zeros((body.num_joints, 3))
    if spec.motion == "arm-swing":
        swing = math.sin(2 * math.pi * frame / spec.swing_period)
        # small sways on every joint so that no two frames share a pose exactly
        rot += 0.04 * np.sin(2 * math.pi * frame / (1.7 * spec.swing_period) + phases)
        names = body.joint_names
        for j, name in enumerate(names):
            if name == "left_arm_0":
                rot[j, 2] = -0.75 + 0.55 * swing
            elif name == "right_arm_0":
                rot[j, 2] = 0.75 + 0.55 * swing
            elif name.startswith("left_arm_") and name != "left_arm_0":
                rot[j, 1] += 0.25 * (1 + swing)
            elif name.startswith("right_arm_") and name != "right_arm_0":
                rot[j, 1] -= 0.25 * (1 + swing)
    elif spec.motion != "static":
        raise DatasetError(f"unknown motion {spec.motion!r} (choose from {', '.join(MOTIONS)})")
    return Pose(rot, np.zeros(3), frame / max(count - 1, 1), frame)


PART_COLORS = np.array(
    [
        [0.75, 0.45, 0.30],  # torso
        [0.25, 0.35, 0.70],  # legs
        [0.85, 0.70, 0.55],  # head
        [0.30, 0.65, 0.35],  # left arm
        [0.70, 0.30, 0.55],  # right arm
    ]
)


def albedo(uv: np.ndarray, body: SkinnedBody) -> np.ndarray:
    """Unlit texture as a function of atlas coordinates: per-part base colour,
    a gradient along each chart and a coarse low-contrast checker."""
    cols = math.ceil(math.sqrt(body.num_joints))
    rows = math.ceil(body.num_joints / cols)
    tx = np.clip((uv[:, 0] * cols).astype(np.int64), 0, cols - 1)
    ty = np.clip((uv[:, 1] * rows).astype(np.int64), 0, rows - 1)
    tile = np.minimum(ty * cols + tx, body.num_joints - 1)
    part = body.joint_to_part[tile]
    local_u = uv[:, 0] * cols - tx
    local_v = uv[:, 1] * rows - ty
    base = PART_COLORS[part]
    grad = 0.8 + 0.25 * local_v
    checker = ((np.floor(local_u * 4) + np.floor(local_v * 3)) % 2) * 2 - 1
    return np.clip(base * grad[:, None] + 0.07 * checker[:, None], 0.0, 1.0)


# ---------------------------------------------------------------------------
# rasterizer


def rasterize(vertices: np.ndarray, faces: np.ndarray, uv: np.ndarray, camera: Camera):
    """Z-buffered rasterization with perspective-correct uv at pixel centres.

    Returns (uv_image (H, W, 2), mask (H, W), depth (H, W)).
    """
    W, H = camera.width, camera.height
    cam = vertices @ camera.world_to_camera[:3, :3].T + camera.world_to_camera[:3, 3]
    z = cam[:, 2]
    pix = cam @ camera.K.T
    xy = pix[:, :2] / pix[:, 2:3]
    tri = xy[faces]  # (F, 3, 2)
    tz = z[faces]
    ok = (tz > 1e-6).all(1)
    lo = np.floor(tri.min(1) - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(1) - 0.5).astype(np.int64)
    lo = np.clip(lo, 0, [W - 1, H - 1])
    hi = np.clip(hi, 0, [W - 1, H - 1])
    ok &= (hi >= lo).all(1)
    fid = np.nonzero(ok)[0]
    nx = hi[fid, 0] - lo[fid, 0] + 1
    ny = hi[fid, 1] - lo[fid, 1] + 1
    counts = nx * ny
    pf = np.repeat(fid, counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = np.repeat(lo[fid, 0], counts) + local % np.repeat(nx, counts)
    py = np.repeat(lo[fid, 1], counts) + local // np.repeat(nx, counts)

    p = np.stack([px + 0.5, py + 0.5], 1)
    a, b, c = tri[pf, 0], tri[pf, 1], tri[pf, 2]

    def edge(p0, p1, q):
        return (p1[:, 0] - p0[:, 0]) * (q[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (q[:, 0] - p0[:, 0])

    area = edge(a, b, c)
    good = np.abs(area) > 1e-12
    safe = np.where(good, area, 1.0)
    w0 = edge(b, c, p) / safe
    w1 = edge(c, a, p) / safe
    w2 = edge(a, b, p) / safe
    inside = good & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    pf, px, py, w = pf[inside], px[inside], py[inside], np.stack([w0, w1, w2], 1)[inside]
    inv_z = w / tz[pf]
    depth = 1.0 / inv_z.sum(1)
    flat = py * W + px
    order = np.lexsort((pf, depth, flat))
    first = np.ones(len(order), bool)
    first[1:] = flat[order][1:] != flat[order][:-1]
    win = order[first]

    persp = inv_z[win] * depth[win, None]
    uv_pix = np.einsum("mk,mkc->mc", persp, uv[faces[pf[win]]])
    uv_img = np.zeros((H * W, 2))
    mask = np.zeros(H * W, bool)
    depth_img = np.zeros(H * W)
    uv_img[flat[win]] = uv_pix
    mask[flat[win]] = True
    depth_img[flat[win]] = depth[win]
    return uv_img.reshape(H, W, 2), mask.reshape(H, W), depth_img.reshape(H, W)


def render_body_image(body: SkinnedBody, pose: Pose, camera: Camera, background=(0.0, 0.0, 0.0)):
    verts = posed_vertices(body, pose)
    uv_img, mask, _ = rasterize(verts, body.faces, body.uv_coords.astype(np.float64), camera)
    color = np.empty(uv_img.shape[:2] + (3,))
    color[:] = background
    color[mask] = albedo(uv_img[mask], body)
    # store exactly what an 8-bit PNG would hold
    color = np.round(color * 255.0) / 255.0
    return color.astype(np.float32), mask


def orbit_camera(angle_deg: float, spec: SequenceSpec) -> Camera:
    a = math.radians(angle_deg)
    eye = (spec.camera_distance * math.sin(a), spec.camera_height, spec.camera_distance * math.cos(a))
    res = spec.resolution
    return Camera.look_at(eye, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), spec.focal_scale * res, res, res)


def generate_synthetic_sequence(spec: SequenceSpec | None = None) -> Dataset:
    """Deterministic in ``spec`` (including its seed)."""
    spec = spec or SequenceSpec()
    if spec.frames < 1:
        raise DatasetError("frames must be positive")
    if spec.motion not in MOTIONS:
        raise DatasetError(f"unknown motion {spec.motion!r} (choose from {', '.join(MOTIONS)})")
    body = build_toy_body(spec.body)
    rng = np.random.default_rng(spec.seed)
    phases = rng.uniform(0, 2 * math.pi, (body.num_joints, 3))
    poses = [motion_pose(body, f, spec.frames, spec, phases) for f in range(spec.frames)]
    n_train = train_count(spec.frames, spec.train_fraction)
    step = spec.orbit_step if spec.orbit_step is not None else 360.0 / max(n_train, 1)
    start = float(rng.uniform(0, 360))

    images = []
    for f, pose in enumerate(poses):
        cam = orbit_camera(start + step * f, spec)
        img, mask = render_body_image(body, pose, cam, spec.background)
        images.append(ImageRecord(len(images), f, "train" if f < n_train else "novel-pose", cam, img, mask))
    if spec.novel_views:
        for f in range(n_train):
            cam = orbit_camera(start + step * (f + 0.5), spec)
            img, mask = render_body_image(body, poses[f], cam, spec.background)
            images.append(ImageRecord(len(images), f, "novel-view", cam, img, mask))
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "fps": spec.fps,
        "stride": 1,
        "resolution": [spec.resolution, spec.resolution],
        "seed": spec.seed,
        "motion": spec.motion,
        "background": list(spec.background),
    }
    return Dataset(body, poses, images, meta)


def train_count(frames: int, fraction: float = 2.0 / 3.0) -> int:
    return min(frames, max(1, int(round(frames * fraction))))


def default_splits(num_frames: int, stride: int = 5, fraction: float = 2.0 / 3.0) -> dict[str, list[int]]:
    """Take every ``stride``-th frame, then the first ~2/3 for training and the rest for novel poses."""
    picked = list(range(0, num_frames, stride))
    n = train_count(len(picked), fraction)
    return {"train": picked[:n], "novel-view": [], "novel-pose": picked[n:]}


# ---------------------------------------------------------------------------
# on-disk layout


def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    save_body(ds.body, root / "body.json")
    cams, entries = [], []
    for im in ds.images:
        Image.fromarray(np.round(np.clip(im.image, 0, 1) * 255).astype(np.uint8)).save(root / "frames" / f"{im.index:06d}.png")
        if im.mask is not None:
            Image.fromarray(im.mask.astype(np.uint8) * 255).save(root / "masks" / f"{im.index:06d}.png")
        cams.append({"image": im.index, "K": im.camera.K.tolist(), "world_to_camera": im.camera.world_to_camera.tolist()})
        entries.append({"image": im.index, "frame": im.frame})
    splits = {name: [im.index for im in ds.images if im.split == name] for name in SPLITS}
    meta = dict(ds.meta, images=entries, splits=splits)
    _write_json(root / "meta.json", meta)
    _write_json(root / "cameras.json", cams)
    poses = [
        {
            "frame": p.frame_index,
            "joint_rotations": p.joint_rotations.tolist(),
            "root_translation": p.root_translation.tolist(),
            "time": p.time,
        }
        for p in ds.poses
    ]
    _write_json(root / "poses.json", poses)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"missing {path.name} in {path.parent}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed {path.name}: {exc}") from exc


def load_dataset(path, stride: int = 5) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    meta = _read_json(root / "meta.json")
    cams = _read_json(root / "cameras.json")
    raw_poses = _read_json(root / "poses.json")
    body = load_skinned_body(root / "body.json")

    poses = []
    for i, p in enumerate(raw_poses):
        if p.get("frame", i) != i:
            raise DatasetError(f"poses.json entry {i} has frame {p.get('frame')}")
        rot = np.asarray(p["joint_rotations"], dtype=np.float64)
        if rot.shape != (body.num_joints, 3):
            raise DatasetError(f"pose {i}: expected {body.num_joints}x3 joint rotations, got {rot.shape}")
        poses.append(Pose(rot, np.asarray(p["root_translation"], dtype=np.float64), float(p["time"]), i))
    times = [p.time for p in poses]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise DatasetError("pose times must increase strictly with frame index")

    entries = meta.get("images") or [{"image": i, "frame": i} for i in range(len(cams))]
    if len(entries) != len(cams):
        raise DatasetError(f"camera count {len(cams)} does not match image count {len(entries)}")
    frame_of = {e["image"]: e["frame"] for e in entries}
    if meta.get("splits"):
        splits = {k: list(v) for k, v in meta["splits"].items()}
        unknown = set(splits) - set(SPLITS)
        if unknown:
            raise DatasetError(f"unknown split names: {sorted(unknown)}")
    else:
        if any(frame_of[i] != i for i in frame_of):
            raise DatasetError("manifest without splits must have one image per frame")
        splits = default_splits(len(poses), int(meta.get("stride", stride)))
    seen: dict[int, str] = {}
    for name, ids in splits.items():
        for i in ids:
            if i in seen:
                raise DatasetError(f"image {i} appears in both {seen[i]} and {name} splits")
            seen[i] = name
    train_frames = {frame_of[i] for i in splits.get("train", [])}
    if any(frame_of[i] in train_frames for i in splits.get("novel-pose", [])):
        raise DatasetError("novel-pose frames overlap the training frames")

    cam_of = {c["image"]: c for c in cams}
    images = []
    for i in sorted(seen):
        if i not in cam_of:
            raise DatasetError(f"no camera for image {i}")
        f = frame_of[i]
        if not 0 <= f < len(poses):
            raise DatasetError(f"image {i} refers to missing frame {f}")
        img_path = root / "frames" / f"{i:06d}.png"
        if not img_path.exists():
            raise DatasetError(f"missing frame image {img_path.name}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        mask_path = root / "masks" / f"{i:06d}.png"
        mask = np.asarray(Image.open(mask_path).convert("L")) > 127 if mask_path.exists() else None
        c = cam_of[i]
        cam = Camera(np.asarray(c["K"]), np.asarray(c["world_to_camera"]), img.shape[1], img.shape[0])
        images.append(ImageRecord(i, f, seen[i], cam, img, mask))
    if not images:
        raise DatasetError("dataset has no images in any split")
    meta = {k: v for k, v in meta.items() if k not in ("images", "splits")}
    return Dataset(body, poses, images, meta)
