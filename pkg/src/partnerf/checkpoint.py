"""Single-file checkpoints: magic, version, JSON header, then raw little-endian blocks.

Layout::

    8 bytes   b"PNRFCKPT"
    4 bytes   format version, uint32 LE
    8 bytes   header length H, uint64 LE
    H bytes   UTF-8 JSON header (sorted keys)
    ...       blocks, back to back, in header order

Each header block entry gives name, dtype ("<f4" or "<i4"), shape, offset
(from the start of the block area) and nbytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .body import Pose, SkinnedBody
from .config import RunConfig
from .model import PartNeRF

MAGIC = b"PNRFCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _body_blocks(body: SkinnedBody) -> dict[str, np.ndarray]:
    return {
        "body.vertices": body.vertices.astype("<f4"),
        "body.blend_weights": body.blend_weights.astype("<f4"),
        "body.uv_coords": body.uv_coords.astype("<f4"),
        "body.joint_rest_positions": body.joint_rest_positions.astype("<f4"),
        "body.faces": body.faces.astype("<i4"),
        "body.part_labels": body.part_labels.astype("<i4"),
    }


def _param_names(model: PartNeRF) -> list[str]:
    return [n for n, _ in model.named_parameters()]


def encode_checkpoint(model: PartNeRF, optimizer: torch.optim.Optimizer | None, step: int, extra: dict | None = None) -> bytes:
    blocks: dict[str, np.ndarray] = {}
    blocks.update(_body_blocks(model.body))
    for name, t in model.state_dict().items():
        if t.is_floating_point():
            blocks[f"model.{name}"] = t.detach().cpu().numpy().astype("<f4")
    opt_meta = None
    if optimizer is not None:
        names = _param_names(model)
        sd = optimizer.state_dict()
        steps = {}
        # state order follows first-gradient order; sort so the file only depends on values
        for pid, state in sorted(sd["state"].items()):
            name = names[pid]
            for key in ("exp_avg", "exp_avg_sq"):
                blocks[f"optim.{key}.{name}"] = state[key].detach().cpu().numpy().astype("<f4")
            steps[name] = float(state["step"])
        group = {k: v for k, v in sd["param_groups"][0].items() if k != "params"}
        opt_meta = {"type": type(optimizer).__name__, "group": _jsonable(group), "steps": steps}
    body = model.body
    header = {
        "version": CHECKPOINT_VERSION,
        "step": int(step),
        "config": model.cfg.to_dict(),
        "body": {
            "joint_parents": body.joint_parents.tolist(),
            "part_joint_sets": [list(map(int, s)) for s in body.part_joint_sets],
            "joint_names": list(body.joint_names),
        },
        "train_poses": [
            {"frame": p.frame_index, "time": p.time, "joint_rotations": p.joint_rotations.tolist(), "root_translation": p.root_translation.tolist()}
            for p in _bank_poses(model)
        ],
        "optimizer": opt_meta,
        "extra": extra or {},
        "blocks": [],
    }
    offset = 0
    payload = []
    for name, arr in blocks.items():
        raw = np.ascontiguousarray(arr).tobytes()
        header["blocks"].append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + struct.pack("<Q", len(head)) + head + b"".join(payload)


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, tuple):
            v = list(v)
        if isinstance(v, (bool, int, float, str, list)) or v is None:
            out[k] = v
    return out


def _bank_poses(model: PartNeRF) -> list[Pose]:
    return list(model.train_poses)


def save_checkpoint(path, model: PartNeRF, optimizer=None, step: int = 0, extra: dict | None = None) -> None:
    data = encode_checkpoint(model, optimizer, step, extra)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def decode_checkpoint(data: bytes):
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[8:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    (hlen,) = struct.unpack("<Q", data[12:20])
    header = json.loads(data[20 : 20 + hlen].decode())
    base = 20 + hlen
    blocks = {}
    for b in header["blocks"]:
        start = base + b["offset"]
        raw = data[start : start + b["nbytes"]]
        if len(raw) != b["nbytes"]:
            raise CheckpointError(f"truncated block {b['name']}")
        blocks[b["name"]] = np.frombuffer(raw, dtype=np.dtype(b["dtype"])).reshape(b["shape"]).copy()
    return header, blocks


def load_checkpoint(path, with_optimizer: bool = True):
    """Returns (model, optimizer or None, step, header)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    header, blocks = decode_checkpoint(data)
    cfg = RunConfig.from_dict(header["config"])
    hb = header["body"]
    body = SkinnedBody(
        vertices=blocks["body.vertices"],
        faces=blocks["body.faces"],
        blend_weights=blocks["body.blend_weights"],
        joint_parents=np.asarray(hb["joint_parents"], dtype=np.int64),
        joint_rest_positions=blocks["body.joint_rest_positions"],
        uv_coords=blocks["body.uv_coords"],
        part_labels=blocks["body.part_labels"],
        part_joint_sets=[list(s) for s in hb["part_joint_sets"]],
        joint_names=list(hb["joint_names"]),
    )
    poses = [
        Pose(np.asarray(p["joint_rotations"]), np.asarray(p["root_translation"]), p["time"], p["frame"])
        for p in header["train_poses"]
    ]
    model = PartNeRF(body, poses, cfg)
    state = model.state_dict()
    for name in state:
        if state[name].is_floating_point():
            key = f"model.{name}"
            if key not in blocks:
                raise CheckpointError(f"checkpoint lacks tensor {name}")
            state[name] = torch.from_numpy(blocks[key])
    model.load_state_dict(state)
    optimizer = None
    om = header.get("optimizer")
    if with_optimizer and om is not None:
        optimizer = make_optimizer(model, cfg)
        names = _param_names(model)
        sd = optimizer.state_dict()
        sd["param_groups"][0].update({k: (tuple(v) if isinstance(v, list) else v) for k, v in om["group"].items()})
        for pid, name in enumerate(names):
            if name in om["steps"]:
                sd["state"][pid] = {
                    "step": torch.tensor(om["steps"][name]),
                    "exp_avg": torch.from_numpy(blocks[f"optim.exp_avg.{name}"]),
                    "exp_avg_sq": torch.from_numpy(blocks[f"optim.exp_avg_sq.{name}"]),
                }
        optimizer.load_state_dict(sd)
    return model, optimizer, header["step"], header


def make_optimizer(model: PartNeRF, cfg: RunConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.train.lr)
