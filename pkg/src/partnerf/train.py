"""Training loop, evaluation and ablation orchestration."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .body import PosedBody
from .checkpoint import load_checkpoint, make_optimizer, save_checkpoint
from .config import LOSS_WEIGHT_GRID, RunConfig, config_diff, copy_config
from .data import Dataset, DatasetError, ImageRecord
from .losses import LossWeights, total_loss
from .io import save_png
from .metrics import image_metrics, psnr
from .model import PartNeRF
from .render import generate_rays

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "L_mse", "L_perc", "L_consis", "total", "lr")


class NumericalError(ArithmeticError):
    pass


class EvaluationError(ValueError):
    pass


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def build_model(cfg: RunConfig, dataset: Dataset) -> PartNeRF:
    frames = dataset.train_frames()
    if not frames:
        raise DatasetError("dataset has no training images")
    return PartNeRF(dataset.body, [dataset.poses[f] for f in frames], cfg)


def sample_patches(record: ImageRecord, count: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """(count, size, size, 2) integer pixel grids; patch centres fall inside the
    foreground bounding box when a mask is available."""
    H, W = record.image.shape[:2]
    size = min(size, H, W)
    if record.mask is not None and record.mask.any():
        ys, xs = np.nonzero(record.mask)
        x_lo, x_hi, y_lo, y_hi = xs.min(), xs.max(), ys.min(), ys.max()
    else:
        x_lo, x_hi, y_lo, y_hi = 0, W - 1, 0, H - 1
    out = []
    for _ in range(count):
        cx = rng.integers(x_lo, x_hi + 1)
        cy = rng.integers(y_lo, y_hi + 1)
        x0 = int(np.clip(cx - size // 2, 0, W - size))
        y0 = int(np.clip(cy - size // 2, 0, H - size))
        ys_, xs_ = np.mgrid[y0 : y0 + size, x0 : x0 + size]
        out.append(np.stack([xs_, ys_], -1))
    return np.stack(out)


@dataclass
class TrainResult:
    model: PartNeRF
    optimizer: torch.optim.Optimizer
    log_rows: list[dict] = field(default_factory=list)
    val_rows: list[dict] = field(default_factory=list)
    step: int = 0


class PosedCache:
    def __init__(self, body):
        self.body = body
        self._cache: dict[int, PosedBody] = {}

    def get(self, pose) -> PosedBody:
        key = pose.frame_index
        if key not in self._cache:
            self._cache[key] = PosedBody(self.body, pose)
        return self._cache[key]


def train_step(model, optimizer, cfg: RunConfig, dataset: Dataset, record: ImageRecord, posed: PosedBody, rng):
    tc, rc, lc = cfg.train, cfg.render, cfg.loss
    patches = sample_patches(record, tc.patches, tc.patch_size, rng)
    n, ps = patches.shape[0], patches.shape[1]
    pixels = patches.reshape(-1, 2)
    box = posed.bounds(pad=cfg.deform.offset_cap)
    rays = generate_rays(record.camera, pixels, box)
    planes = model.part_planes(posed.pose, use_own=True)
    background = rc.background
    target = record.image[pixels[:, 1], pixels[:, 0]].astype(np.float64)
    if tc.random_background and record.mask is not None:
        # a fresh background colour each step makes stray density outside the silhouette visible to the loss
        background = rng.random(3)
        fg = record.mask[pixels[:, 1], pixels[:, 0]][:, None]
        target = np.where(fg, target, background)
    out = model.render_bundle(posed, rays, planes, rc.samples, rc.jitter, rng, background)
    target = torch.from_numpy(target).to(out.color.dtype)
    weights = LossWeights(lc.lambda_m, lc.lambda_p, lc.lambda_c)
    residuals = model.consistency(posed, out.samples, lc.consistency_samples, rng) if lc.lambda_c > 0 else None
    patch_pair = (out.color.reshape(n, ps, ps, 3), target.reshape(n, ps, ps, 3))
    loss = total_loss(out.color, target, residuals, weights, lc.perceptual, patch_pair)
    optimizer.zero_grad(set_to_none=True)
    loss.total.backward()
    return loss, residuals


def _finite(model) -> bool:
    return all(torch.isfinite(p).all() for p in model.parameters())


def train(cfg: RunConfig, dataset: Dataset, out_dir=None, steps: int | None = None, progress=None) -> TrainResult:
    """Train from scratch. Writes train_log.csv, val_log.csv and checkpoints under ``out_dir`` when given."""
    steps = cfg.train.steps if steps is None else steps
    rng = seed_everything(cfg.train.seed)
    model = build_model(cfg, dataset)
    optimizer = make_optimizer(model, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    train_images = dataset.split("train")
    val_images = _validation_images(dataset, cfg.train.val_frames)
    cache = PosedCache(dataset.body)
    result = TrainResult(model, optimizer)
    log_file = None
    writer = None
    if out is not None:
        log_file = open(out / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
        writer.writeheader()
    t0 = time.time()
    try:
        for step in range(1, steps + 1):
            record = train_images[int(rng.integers(len(train_images)))]
            posed = cache.get(dataset.poses[record.frame])
            loss, _ = train_step(model, optimizer, cfg, dataset, record, posed, rng)
            if not torch.isfinite(loss.total):
                _abort(out, model, optimizer, step - 1, loss)
            optimizer.step()
            if not _finite(model):
                raise NumericalError(f"non-finite parameters after step {step}")
            vals = loss.as_floats()
            row = {
                "step": step,
                "L_mse": _fmt(vals["mse"]),
                "L_perc": _fmt(vals["perceptual"]) if cfg.loss.lambda_p > 0 else "",
                "L_consis": _fmt(vals["consistency"]) if cfg.loss.lambda_c > 0 else "",
                "total": _fmt(vals["total"]),
                "lr": _fmt(optimizer.param_groups[0]["lr"]),
            }
            result.log_rows.append(row)
            result.step = step
            if writer is not None:
                writer.writerow(row)
            if progress is not None:
                progress(step, row)
            if cfg.train.val_every and step % cfg.train.val_every == 0 and val_images:
                val = validate(model, dataset, val_images, cfg)
                val["step"] = step
                result.val_rows.append(val)
                log.info("step %d  val psnr %.2f  (%.1fs)", step, val["psnr"], time.time() - t0)
            if out is not None and cfg.train.checkpoint_every and step % cfg.train.checkpoint_every == 0:
                save_checkpoint(out / "checkpoint.bin", model, optimizer, step)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", model, optimizer, result.step)
        if result.val_rows:
            write_csv(out / "val_log.csv", result.val_rows)
    return result


def _fmt(x: float) -> str:
    return repr(float(x))


def _abort(out, model, optimizer, step, loss):
    if out is not None:
        # parameters are still those of the last successful step
        save_checkpoint(out / "checkpoint_last_good.bin", model, optimizer, step)
        (out / "nan_diagnostics.json").write_text(json.dumps({"step": step + 1, "loss": {k: str(v) for k, v in loss.as_floats().items()}}, indent=1))
    raise NumericalError(f"non-finite loss at step {step + 1}")


def _validation_images(dataset: Dataset, count: int) -> list[ImageRecord]:
    held = dataset.split("novel-view") or dataset.split("novel-pose")
    return held[:count]


def validate(model: PartNeRF, dataset: Dataset, images: list[ImageRecord], cfg: RunConfig) -> dict:
    psnrs = []
    for rec in images:
        img = model.render_image(rec.camera, dataset.poses[rec.frame], use_own_features=False)["color"]
        psnrs.append(psnr(img, rec.image))
    return {"psnr": float(np.mean(psnrs))}


# ---------------------------------------------------------------------------
# evaluation


def render_record(model: PartNeRF, dataset: Dataset, rec: ImageRecord, split: str):
    # training frames use their own bank entries; everything else goes through retrieval
    return model.render_image(rec.camera, dataset.poses[rec.frame], use_own_features=split == "train")


def evaluate(model: PartNeRF, dataset: Dataset, split: str, backend: str | None = None, out_csv=None, render_dir=None) -> dict:
    """Per-image and mean PSNR / SSIM / LPIPS* on one split."""
    backend = backend or model.cfg.loss.perceptual
    images = dataset.split(split)
    if not images:
        raise EvaluationError(f"split {split!r} is empty")
    rows = []
    for rec in images:
        out = render_record(model, dataset, rec, split)
        m = image_metrics(out["color"], rec.image, backend)
        rows.append({"image": rec.index, "frame": rec.frame, **m})
        if render_dir is not None:
            save_png(Path(render_dir) / f"{split}_{rec.index:06d}.png", out["color"])
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "lpips_star")}
    report = {"split": split, "backend": backend, "rows": rows, "mean": mean}
    if out_csv is not None:
        write_metrics_csv(out_csv, report)
    return report


def write_metrics_csv(path, report: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# split={report['split']} perceptual_backend={report['backend']}\n")
        w = csv.writer(fh)
        w.writerow(["image", "frame", "PSNR", "SSIM", "LPIPS*"])
        for r in report["rows"]:
            w.writerow([r["image"], r["frame"], f"{r['psnr']:.4f}", f"{r['ssim']:.5f}", f"{r['lpips_star']:.3f}"])
        m = report["mean"]
        w.writerow(["mean", "", f"{m['psnr']:.4f}", f"{m['ssim']:.5f}", f"{m['lpips_star']:.3f}"])


def write_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def summary_table(report: dict) -> str:
    m = report["mean"]
    return (
        f"split {report['split']} ({len(report['rows'])} images, perceptual backend {report['backend']})\n"
        f"{'PSNR':>8} {'SSIM':>8} {'LPIPS*':>8}\n"
        f"{m['psnr']:8.3f} {m['ssim']:8.4f} {m['lpips_star']:8.2f}"
    )


# ---------------------------------------------------------------------------
# ablations


def run_ablation(cfg: RunConfig, dataset: Dataset, mode: str, split: str = "novel-view", out_dir=None, steps: int | None = None, full=None) -> dict:
    """Train the full and the ablated configuration with the same seed and budget.

    ``full`` may pass (model, report) of an earlier full run with the same config
    so that several modes share it.
    """
    ablated = cfg.with_ablation(mode)
    reports = {}
    models = {}
    runs = [("full", cfg), (mode, ablated)]
    if full is not None:
        models["full"], reports["full"] = full
        runs = runs[1:]
    for name, c in runs:
        sub = None if out_dir is None else Path(out_dir) / name
        res = train(c, dataset, sub, steps)
        models[name] = res.model
        reports[name] = evaluate(res.model, dataset, split, out_csv=None if sub is None else sub / f"metrics_{split}.csv")
    delta = {k: reports[mode]["mean"][k] - reports["full"]["mean"][k] for k in ("psnr", "ssim", "lpips_star")}
    return {"mode": mode, "diff": config_diff(cfg, ablated), "reports": reports, "delta": delta, "models": models}


def loss_weight_configs(cfg: RunConfig) -> list[RunConfig]:
    """One config per (lambda_m, lambda_p, lambda_c) entry of the sweep grid."""
    out = []
    for lm, lp, lc in LOSS_WEIGHT_GRID:
        c = copy_config(cfg)
        c.loss.lambda_m, c.loss.lambda_p, c.loss.lambda_c = lm, lp, lc
        out.append(c)
    return out


def resume(path):
    model, optimizer, step, header = load_checkpoint(path)
    return model, optimizer, step


def moving_average(values, window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window

