"""Command-line entry point: gen, train, render, eval, ablate.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .body import PosedBody, Pose
from .checkpoint import CheckpointError, load_checkpoint
from .config import ABLATIONS, ConfigError, config_diff, config_keys, load_config, to_toml
from .data import MOTIONS, SPLITS, DatasetError, SequenceSpec, generate_synthetic_sequence, load_dataset, orbit_camera, save_dataset
from .io import load_png, save_depth_map, save_float_dump, save_part_map, save_png
from .posefeat import RetrievalError
from .render import Camera, CameraError
from .train import EvaluationError, NumericalError, evaluate, loss_weight_configs, run_ablation, summary_table, train, write_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

log = logging.getLogger("partnerf")

DUMP_KINDS = ("part", "depth")


def _config_epilog() -> str:
    lines = ["config keys (set in the TOML file or with --set section.key=value):"]
    for key, default in config_keys():
        lines.append(f"  {key} (default: {json.dumps(default)})")
    return "\n".join(lines)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="TOML config file; omitted keys keep their defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--no-prune", action="store_true", help="evaluate every part field at every sample (same output, slower)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="partnerf", description="Part-based human radiance fields from monocular video.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic toy-body dataset", formatter_class=fmt)
    g.add_argument("out", help="output dataset directory (created if missing)")
    g.add_argument("--frames", type=int, default=12)
    g.add_argument("--res", type=int, default=64, help="image width and height in pixels")
    g.add_argument("--motion", choices=MOTIONS, default="arm-swing")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=2.0 / 3.0, help="leading share of frames used for training")
    g.add_argument("--no-novel-views", action="store_true", help="skip the held-out orbit views of the training frames")

    epilog = _config_epilog()
    t = sub.add_parser("train", help="train a model", epilog=epilog, formatter_class=fmt)
    _add_config_args(t)
    t.add_argument("--data", help="dataset directory (default: data.path)")
    t.add_argument("--out", help="run directory (default: train.out)")
    t.add_argument("--steps", type=int, help="number of steps (default: train.steps)")
    t.add_argument("--ablate", choices=sorted(ABLATIONS), help="train the ablated variant")

    r = sub.add_parser("render", help="render images from a checkpoint", epilog=epilog, formatter_class=fmt)
    _add_config_args(r)
    r.add_argument("checkpoint")
    r.add_argument("--data", help="dataset directory, needed for dataset cameras and non-training poses")
    r.add_argument("--out", default="renders", help="output directory")
    r.add_argument("--view", default="orbit:12", help="orbit:N for N evenly spaced orbit cameras, or split:NAME for the dataset cameras of a split")
    r.add_argument("--pose", help="train:I (I-th training pose), frame:F (dataset frame), or novel-pose-split; default train:0 for orbits and every frame of the split otherwise")
    r.add_argument("--res", type=int, help="orbit image size (default: the dataset image size, else 64)")
    r.add_argument("--dump", default="", help="comma list of extra maps to write: part, depth")
    r.add_argument("--dump-retrieval", metavar="CSV", help="write the per-part retrieved frames and weights for every rendered pose")

    e = sub.add_parser("eval", help="compute PSNR / SSIM / LPIPS* on a split", epilog=epilog, formatter_class=fmt)
    _add_config_args(e)
    e.add_argument("checkpoint")
    e.add_argument("--data", help="dataset directory (default: data.path from the checkpoint config)")
    e.add_argument("--split", choices=SPLITS, default="novel-view")
    e.add_argument("--out", help="metrics CSV path (default: <checkpoint dir>/metrics_<split>.csv)")
    e.add_argument("--renders", help="also save the rendered images to this directory")

    a = sub.add_parser("ablate", help="train full and ablated variants with matched seeds", epilog=epilog, formatter_class=fmt)
    _add_config_args(a)
    a.add_argument("--mode", choices=sorted(ABLATIONS), action="append", help="ablation mode (repeatable)")
    a.add_argument("--loss-grid", action="store_true", help="sweep the loss-weight grid instead of ablation modes")
    a.add_argument("--data", help="dataset directory (default: data.path)")
    a.add_argument("--out", default="ablation", help="output directory")
    a.add_argument("--steps", type=int, help="steps per run (default: train.steps)")
    a.add_argument("--split", choices=SPLITS, default="novel-view")
    return parser


# ---------------------------------------------------------------------------


def _config(args):
    cfg = load_config(args.config, args.overrides)
    if getattr(args, "no_prune", False):
        cfg.field.prune = False
    return cfg


def cmd_gen(args) -> int:
    spec = SequenceSpec(
        frames=args.frames,
        resolution=args.res,
        motion=args.motion,
        seed=args.seed,
        train_fraction=args.train_fraction,
        novel_views=not args.no_novel_views,
    )
    if spec.resolution < 8:
        raise ConfigError("--res must be at least 8")
    ds = generate_synthetic_sequence(spec)
    save_dataset(ds, args.out)
    counts = {s: len(ds.split(s)) for s in SPLITS}
    print(f"wrote {len(ds.images)} images of {len(ds.poses)} frames to {args.out} ({counts})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.ablate:
        base = cfg
        cfg = cfg.with_ablation(args.ablate)
        for key, old, new in config_diff(base, cfg):
            print(f"ablation {args.ablate}: {key} {old} -> {new}")
    if args.data:
        cfg.data.path = args.data
    if args.out:
        cfg.train.out = args.out
    if args.steps is not None:
        if args.steps < 0:
            raise ConfigError("--steps must be non-negative")
        cfg.train.steps = args.steps
    ds = load_dataset(cfg.data.path)
    out = Path(cfg.train.out)

    def progress(step, row):
        if step % 100 == 0 or step == cfg.train.steps:
            log.info("step %d  total %s", step, row["total"])

    res = train(cfg, ds, out, progress=progress)
    if res.log_rows:
        from .plotting import plot_loss_curve

        plot_loss_curve(res.log_rows, out / "loss_curve.png")
    print(f"trained {res.step} steps; checkpoint {out / 'checkpoint.bin'}")
    return EXIT_OK


def _load(args):
    model, _, step, header = load_checkpoint(args.checkpoint, with_optimizer=False)
    # checkpointed config, then the command line on top
    cfg = model.cfg
    if args.config:
        cfg = load_config(args.config)
    for item in args.overrides:
        cfg.override(item)
    if args.no_prune:
        cfg.field.prune = False
    model.cfg = cfg
    model.eval()
    return model, step


def _parse_dump(text: str) -> set[str]:
    kinds = {k.strip() for k in text.split(",") if k.strip()}
    bad = kinds - set(DUMP_KINDS)
    if bad:
        raise ConfigError(f"unknown --dump kinds {sorted(bad)} (choose from {', '.join(DUMP_KINDS)})")
    return kinds


def _render_poses(args, model, ds) -> list[Pose]:
    spec = args.pose or "train:0"
    if spec == "novel-pose-split":
        if ds is None:
            raise ConfigError("--pose novel-pose-split needs --data")
        frames = sorted({im.frame for im in ds.split("novel-pose")})
        if not frames:
            raise DatasetError("dataset has no novel-pose frames")
        return [ds.poses[f] for f in frames]
    kind, _, value = spec.partition(":")
    try:
        i = int(value)
    except ValueError:
        raise ConfigError(f"bad --pose {spec!r}; use train:I, frame:F or novel-pose-split") from None
    if kind == "train":
        if not 0 <= i < len(model.train_poses):
            raise ConfigError(f"--pose train:{i} out of range (model has {len(model.train_poses)} training poses)")
        return [model.train_poses[i]]
    if kind == "frame":
        for p in model.train_poses:
            if p.frame_index == i:
                return [p]
        if ds is None:
            raise ConfigError(f"frame {i} is not a training frame; pass --data to use dataset poses")
        if not 0 <= i < len(ds.poses):
            raise DatasetError(f"dataset has no frame {i}")
        return [ds.poses[i]]
    raise ConfigError(f"bad --pose {spec!r}; use train:I, frame:F or novel-pose-split")


def _orbit_cameras(count: int, ds, res: int | None, center) -> list[Camera]:
    spec = SequenceSpec()
    if ds is not None:
        ref = ds.images[0].camera
        eye = ref.center
        spec.resolution = res or ref.width
        spec.focal_scale = float(ref.K[0, 0]) / ref.width
        spec.camera_distance = float(np.hypot(eye[0] - center[0], eye[2] - center[2]))
        spec.camera_height = float(eye[1])
    elif res:
        spec.resolution = res
    cams = []
    for i in range(count):
        cam = orbit_camera(360.0 * i / count, spec)
        if center is not None:
            # orbit around the posed body rather than the origin
            eye = cam.center + np.array([center[0], 0.0, center[2]])
            cam = Camera.look_at(eye, (center[0], 0.0, center[2]), (0.0, 1.0, 0.0), spec.focal_scale * spec.resolution, spec.resolution, spec.resolution)
        cams.append(cam)
    return cams


def _jobs(args, model, ds):
    """(name, camera, pose) triples to render."""
    poses = _render_poses(args, model, ds)
    kind, _, value = args.view.partition(":")
    jobs = []
    if kind == "orbit":
        try:
            n = int(value)
        except ValueError:
            raise ConfigError(f"bad --view {args.view!r}") from None
        if n < 1:
            raise ConfigError("--view orbit:N needs N >= 1")
        for pi, pose in enumerate(poses):
            center = PosedBody(model.body, pose).bounds().mean(0)
            for vi, cam in enumerate(_orbit_cameras(n, ds, args.res, center)):
                jobs.append((f"f{pose.frame_index:04d}_v{vi:03d}", cam, pose))
    elif kind == "split":
        if ds is None:
            raise ConfigError("--view split:NAME needs --data")
        if value not in SPLITS:
            raise ConfigError(f"unknown split {value!r}")
        wanted = {p.frame_index for p in poses} if args.pose else None
        for rec in ds.split(value):
            if wanted is None or rec.frame in wanted:
                jobs.append((f"f{rec.frame:04d}_i{rec.index:06d}", rec.camera, ds.poses[rec.frame]))
        if not jobs:
            raise DatasetError(f"no images to render for split {value!r}")
    else:
        raise ConfigError(f"bad --view {args.view!r}; use orbit:N or split:NAME")
    return jobs


def cmd_render(args) -> int:
    dumps = _parse_dump(args.dump)
    model, _ = _load(args)
    ds = load_dataset(args.data) if args.data else None
    jobs = _jobs(args, model, ds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, cam, pose in jobs:
        img = model.render_image(cam, pose, use_own_features=True)
        save_png(out / f"{name}.png", img["color"])
        if "part" in dumps:
            save_part_map(out / f"{name}_part.png", img["part"])
        if "depth" in dumps:
            save_depth_map(out / f"{name}_depth.png", img["depth"], img["opacity"])
            save_float_dump(out / f"{name}_depth.f32", img["depth"].astype(np.float32))
    if args.dump_retrieval:
        _dump_retrieval(args.dump_retrieval, model, [p for _, _, p in jobs])
    print(f"rendered {len(jobs)} images to {out}")
    return EXIT_OK


def _dump_retrieval(path, model, poses) -> None:
    seen = set()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "part", "rank", "bank_frame", "weight"])
        for pose in poses:
            if pose.frame_index in seen:
                continue
            seen.add(pose.frame_index)
            for part, frames, weights in model.retrieval_table(pose):
                for rank, (f, wt) in enumerate(zip(frames, weights)):
                    w.writerow([pose.frame_index, part, rank, int(f), f"{wt:.6f}"])


def cmd_eval(args) -> int:
    model, step = _load(args)
    ds = load_dataset(args.data or model.cfg.data.path)
    out_csv = Path(args.out) if args.out else Path(args.checkpoint).parent / f"metrics_{args.split}.csv"
    report = evaluate(model, ds, args.split, out_csv=out_csv, render_dir=args.renders)
    from .plotting import plot_comparison_grid, plot_metrics

    plot_metrics(report, out_csv.with_suffix(".png"))
    if args.renders:
        pairs, titles = [], []
        for rec in ds.split(args.split)[:4]:
            pairs.append((load_png(Path(args.renders) / f"{args.split}_{rec.index:06d}.png"), rec.image))
            titles.append(f"image {rec.index}")
        plot_comparison_grid(pairs, Path(args.renders) / f"comparison_{args.split}.png", titles)
    print(f"checkpoint step {step}")
    print(summary_table(report))
    print(f"metrics written to {out_csv}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.data:
        cfg.data.path = args.data
    if args.steps is not None:
        cfg.train.steps = args.steps
    if not args.mode and not args.loss_grid:
        raise ConfigError("ablate needs --mode or --loss-grid")
    ds = load_dataset(cfg.data.path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "base_config.toml").write_text(to_toml(cfg))
    from .plotting import plot_ablation

    rows = []
    if args.loss_grid:
        reports = {}
        for c in loss_weight_configs(cfg):
            name = f"m{c.loss.lambda_m:g}_p{c.loss.lambda_p:g}_c{c.loss.lambda_c:g}"
            res = train(c, ds, out / name)
            reports[name] = evaluate(res.model, ds, args.split, out_csv=out / name / f"metrics_{args.split}.csv")
            rows.append({"run": name, "lambda_m": c.loss.lambda_m, "lambda_p": c.loss.lambda_p, "lambda_c": c.loss.lambda_c, **_means(reports[name])})
        write_csv(out / "loss_grid.csv", rows)
        plot_ablation(reports, out / "loss_grid.png")
    else:
        reports = {}
        full = None
        for mode in args.mode:
            # the full model is trained once, in the first mode's directory
            result = run_ablation(cfg, ds, mode, args.split, out / mode, full=full)
            full = (result["models"]["full"], result["reports"]["full"])
            reports.setdefault("full", result["reports"]["full"])
            reports[mode] = result["reports"][mode]
            changed = ";".join(f"{k}={new}" for k, _, new in result["diff"])
            rows.append({"mode": mode, "changed": changed, **{f"delta_{k}": f"{v:.4f}" for k, v in result["delta"].items()}, **_means(reports[mode])})
            print(f"{mode}: changed {changed}; delta PSNR {result['delta']['psnr']:+.3f} dB")
        rows.insert(0, {"mode": "full", "changed": "", **{f"delta_{k}": "0.0000" for k in ("psnr", "ssim", "lpips_star")}, **_means(reports["full"])})
        write_csv(out / "ablation.csv", rows)
        plot_ablation(reports, out / "ablation.png")
    print(f"results written to {out}")
    return EXIT_OK


def _means(report: dict) -> dict:
    m = report["mean"]
    return {"PSNR": f"{m['psnr']:.4f}", "SSIM": f"{m['ssim']:.5f}", "LPIPS*": f"{m['lpips_star']:.3f}"}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors, which is already the config-error code
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, EvaluationError, CameraError, RetrievalError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
