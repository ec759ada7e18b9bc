"""Run configuration: TOML file plus ``section.key=value`` overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from dataclasses import field as _field

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = "data"


@dataclass
class DeformConfig:
    hidden: int = 128
    layers: int = 4
    bands: int = 6
    offset_cap: float = 0.1
    cutoff: float = 0.1
    threshold: float = 0.02
    use_uvt: bool = True


@dataclass
class PosefeatConfig:
    resolution: int = 32
    channels: int = 16
    top_k: int = 5
    tau: float = 0.1
    latents: int = 16
    latent_dim: int = 32
    attn_dim: int = 32
    use_attention_output: bool = True
    use_rgb_latent: bool = True
    use_pose_feature: bool = True


@dataclass
class FieldConfig:
    levels: int = 8
    min_res: int = 16
    max_res: int = 256
    log2_table: int = 15
    features: int = 2
    hidden: int = 64
    geo_dim: int = 15
    density_scale: float = 100.0
    density_bias: float = -3.0
    prune: bool = True


@dataclass
class RenderConfig:
    samples: int = 64
    ray_batch: int = 4096
    background: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    jitter: bool = True


@dataclass
class LossConfig:
    lambda_m: float = 1.0
    lambda_p: float = 1.0
    lambda_c: float = 1.0
    perceptual: str = "builtin"
    consistency_samples: int = 2048


@dataclass
class TrainConfig:
    steps: int = 4000
    lr: float = 5e-4
    patches: int = 4
    patch_size: int = 32
    random_background: bool = True
    seed: int = 0
    val_every: int = 500
    val_frames: int = 2
    checkpoint_every: int = 500
    out: str = "run"


SECTIONS = {
    "data": DataConfig,
    "deform": DeformConfig,
    "posefeat": PosefeatConfig,
    "field": FieldConfig,
    "render": RenderConfig,
    "loss": LossConfig,
    "train": TrainConfig,
}

ABLATIONS = {
    "no-uvt": [("deform", "use_uvt", False)],
    "no-fk": [("posefeat", "use_attention_output", False)],
    "no-consistency": [("loss", "lambda_c", 0.0)],
    "no-rgb-latent": [("posefeat", "use_rgb_latent", False)],
    "no-pose-feature": [("posefeat", "use_pose_feature", False)],
}

# loss-weight grid for the (lambda_m, lambda_p, lambda_c) sweep: each weight halved in turn, then the default
LOSS_WEIGHT_GRID = [
    (1.0, 1.0, 0.5),
    (1.0, 0.5, 1.0),
    (0.5, 1.0, 1.0),
    (1.0, 1.0, 1.0),
]


@dataclass
class RunConfig:
    data: DataConfig = _field(default_factory=DataConfig)
    deform: DeformConfig = _field(default_factory=DeformConfig)
    posefeat: PosefeatConfig = _field(default_factory=PosefeatConfig)
    field: FieldConfig = _field(default_factory=FieldConfig)
    render: RenderConfig = _field(default_factory=RenderConfig)
    loss: LossConfig = _field(default_factory=LossConfig)
    train: TrainConfig = _field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> RunConfig:
        cfg = cls()
        for sec, values in raw.items():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section: {sec}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {sec} must be a table")
            for key, value in values.items():
                cfg.set(sec, key, value)
        return cfg

    def set(self, section: str, key: str, value) -> None:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section: {section}")
        target = getattr(self, section)
        known = {f.name: f for f in fields(target)}
        if key not in known:
            raise ConfigError(f"unknown config key: {section}.{key}")
        setattr(target, key, _coerce(f"{section}.{key}", getattr(target, key), value))

    def override(self, assignment: str) -> None:
        """Apply ``section.key=value``; the value is parsed as TOML when possible."""
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {assignment!r}")
        lhs, rhs = assignment.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        try:
            value = tomllib.loads(f"v = {rhs.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            value = rhs.strip()
        self.set(section, key, value)

    def with_ablation(self, mode: str) -> RunConfig:
        if mode not in ABLATIONS:
            raise ConfigError(f"unknown ablation mode: {mode} (choose from {', '.join(ABLATIONS)})")
        out = copy_config(self)
        for sec, key, value in ABLATIONS[mode]:
            out.set(sec, key, value)
        return out


def _coerce(name: str, current, value):
    if isinstance(current, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{name} expects a boolean, got {value!r}")
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} expects an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} expects a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} expects a list, got {value!r}")
        return [float(v) for v in value]
    if not isinstance(value, str):
        raise ConfigError(f"{name} expects a string, got {value!r}")
    return value


def copy_config(cfg: RunConfig) -> RunConfig:
    return RunConfig.from_dict(cfg.to_dict())


def load_config(path=None, overrides=()) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        cfg = RunConfig.from_dict(raw)
    for item in overrides:
        cfg.override(item)
    return cfg


def config_diff(a: RunConfig, b: RunConfig) -> list[tuple[str, object, object]]:
    """Flattened ``section.key`` entries whose values differ."""
    da, db = a.to_dict(), b.to_dict()
    out = []
    for sec in SECTIONS:
        for key in da[sec]:
            if da[sec][key] != db[sec][key]:
                out.append((f"{sec}.{key}", da[sec][key], db[sec][key]))
    return out


def config_keys() -> list[tuple[str, object]]:
    """Every ``section.key`` with its default, for help text and docs."""
    cfg = RunConfig()
    out = []
    for sec in SECTIONS:
        for f in fields(getattr(cfg, sec)):
            out.append((f"{sec}.{f.name}", getattr(getattr(cfg, sec), f.name)))
    return out


def to_toml(cfg: RunConfig) -> str:
    lines = []
    for sec in SECTIONS:
        lines.append(f"[{sec}]")
        for key, value in asdict(getattr(cfg, sec)).items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)

