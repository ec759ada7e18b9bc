import pytest

from partnerf.config import (
    ABLATIONS,
    LOSS_WEIGHT_GRID,
    ConfigError,
    RunConfig,
    config_diff,
    config_keys,
    copy_config,
    load_config,
    to_toml,
)


def test_defaults_match_documented_values():
    cfg = RunConfig()
    assert (cfg.loss.lambda_m, cfg.loss.lambda_p, cfg.loss.lambda_c) == (1.0, 1.0, 1.0)
    assert cfg.train.lr == 5e-4
    assert cfg.train.steps == 4000 and cfg.train.patches == 4 and cfg.train.patch_size == 32
    assert cfg.render.samples == 64 and cfg.render.background == [0.0, 0.0, 0.0]
    assert cfg.posefeat.top_k == 5 and cfg.posefeat.tau == 0.1
    assert (cfg.posefeat.resolution, cfg.posefeat.channels) == (32, 16)
    assert (cfg.posefeat.latents, cfg.posefeat.latent_dim) == (16, 32)
    assert (cfg.field.levels, cfg.field.min_res, cfg.field.max_res, cfg.field.log2_table, cfg.field.features) == (8, 16, 256, 15, 2)
    assert cfg.deform.threshold == 0.02


def test_unknown_keys_rejected():
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="train.stepz"):
        cfg.override("train.stepz=3")
    with pytest.raises(ConfigError, match="section"):
        cfg.override("nope.steps=3")
    with pytest.raises(ConfigError):
        cfg.override("steps=3")
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"bogus": 1}})


def test_override_types():
    cfg = RunConfig()
    cfg.override("train.steps=12")
    cfg.override("loss.lambda_c=0")
    cfg.override("deform.use_uvt=false")
    cfg.override("render.background=[1, 0.5, 0]")
    cfg.override("loss.perceptual=lpips")
    assert cfg.train.steps == 12
    assert cfg.loss.lambda_c == 0.0 and isinstance(cfg.loss.lambda_c, float)
    assert cfg.deform.use_uvt is False
    assert cfg.render.background == [1.0, 0.5, 0.0]
    assert cfg.loss.perceptual == "lpips"
    with pytest.raises(ConfigError, match="integer"):
        cfg.override("train.steps=1.5")
    with pytest.raises(ConfigError, match="boolean"):
        cfg.override("deform.use_uvt=3")


def test_toml_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.override("train.steps=77")
    cfg.override("posefeat.use_rgb_latent=false")
    path = tmp_path / "c.toml"
    path.write_text(to_toml(cfg))
    back = load_config(path, ["loss.lambda_p=0.5"])
    assert config_diff(cfg, back) == [("loss.lambda_p", 1.0, 0.5)]
    assert copy_config(cfg) == cfg


def test_bad_config_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[train\nsteps = 1")
    with pytest.raises(ConfigError):
        load_config(bad)


@pytest.mark.parametrize("mode", sorted(ABLATIONS))
def test_ablation_touches_only_documented_fields(mode):
    cfg = RunConfig()
    diff = config_diff(cfg, cfg.with_ablation(mode))
    assert [d[0] for d in diff] == [f"{s}.{k}" for s, k, _ in ABLATIONS[mode]]


def test_ablation_modes_documented_effects():
    cfg = RunConfig()
    assert config_diff(cfg, cfg.with_ablation("no-consistency")) == [("loss.lambda_c", 1.0, 0.0)]
    assert config_diff(cfg, cfg.with_ablation("no-uvt")) == [("deform.use_uvt", True, False)]
    assert config_diff(cfg, cfg.with_ablation("no-rgb-latent")) == [("posefeat.use_rgb_latent", True, False)]
    assert config_diff(cfg, cfg.with_ablation("no-pose-feature")) == [("posefeat.use_pose_feature", True, False)]
    with pytest.raises(ConfigError):
        cfg.with_ablation("no-everything")


def test_loss_weight_grid_rows():
    # the four weight settings of the loss-weight ablation table
    assert sorted(LOSS_WEIGHT_GRID) == sorted([(1.0, 1.0, 0.5), (1.0, 0.5, 1.0), (0.5, 1.0, 1.0), (1.0, 1.0, 1.0)])


def test_config_keys_cover_every_field():
    keys = dict(config_keys())
    d = RunConfig().to_dict()
    assert set(keys) == {f"{s}.{k}" for s in d for k in d[s]}
    assert keys["train.lr"] == 5e-4
