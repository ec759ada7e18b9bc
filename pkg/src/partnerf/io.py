"""Image and diagnostic-map writers."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

# one colour per part id; background (-1) stays black
PART_PALETTE = np.array(
    [[230, 120, 60], [60, 90, 200], [240, 200, 140], [70, 180, 90], [190, 70, 150], [120, 120, 120], [200, 200, 60]],
    dtype=np.uint8,
)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)


def part_map_image(part: np.ndarray) -> np.ndarray:
    out = np.zeros(part.shape + (3,), np.uint8)
    fg = part >= 0
    out[fg] = PART_PALETTE[part[fg] % len(PART_PALETTE)]
    return out


def save_part_map(path, part: np.ndarray) -> None:
    Image.fromarray(part_map_image(part)).save(path)


def save_depth_map(path, depth: np.ndarray, opacity: np.ndarray | None = None) -> None:
    """Expected depth normalised over the foreground to 8 bits (near = bright)."""
    fg = opacity > 0.5 if opacity is not None else depth > 0
    out = np.zeros(depth.shape, np.uint8)
    if fg.any():
        d = depth[fg] / np.maximum(opacity[fg], 1e-6) if opacity is not None else depth[fg]
        lo, hi = d.min(), d.max()
        out[fg] = np.round(255 * (1 - (d - lo) / max(hi - lo, 1e-9)) * 0.8 + 51).astype(np.uint8)
    Image.fromarray(out).save(path)


def save_float_dump(path, img: np.ndarray) -> None:
    """Raw little-endian float32 array plus a JSON sidecar with its shape."""
    path = Path(path)
    arr = np.ascontiguousarray(img, dtype="<f4")
    path.write_bytes(arr.tobytes())
    path.with_suffix(path.suffix + ".json").write_text(json.dumps({"dtype": "<f4", "shape": list(arr.shape)}) + "\n")


def load_float_dump(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return np.frombuffer(path.read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"]).copy()


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
