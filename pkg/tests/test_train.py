import json

import numpy as np
import pytest
import torch
from PIL import Image

from dyngrain import train
from dyngrain.io import save_grain_png
from dyngrain.tensor import Rng
from helpers import tiny_config


def run_all(cfg):
    train.save_run_config(cfg)
    train.calibrate(cfg)
    train.train_dvae(cfg)
    train.train_grain(cfg)
    train.train_content(cfg)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("run"))
    run_all(cfg)
    return cfg


def test_config_roundtrip_and_validation(tmp_path):
    cfg = tiny_config(tmp_path, thresholds=[1.5, float("-inf")])
    back = train.RunConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    with pytest.raises(train.ConfigError):
        train.RunConfig.from_dict({"bogus": 1})
    with pytest.raises(train.ConfigError):
        train.RunConfig.from_dict({"ratios": [0.9, 0.9]})


def test_reference_optimizer_presets():
    d = train.reference_dvae_optim(16)
    assert d.name == "adam" and d.betas == (0.5, 0.9) and d.lr == pytest.approx(4.5e-6 * 16)
    t = train.reference_transformer_optim()
    assert (t.name, t.lr, t.weight_decay) == ("adamw", 1e-4, 0.01)


def test_stage_dag(tmp_path):
    cfg = tiny_config(tmp_path)
    with pytest.raises(train.MissingArtifactError) as err:
        train.train_content(cfg)
    assert err.value.stage == "calibrate"
    train.calibrate(cfg)
    for fn in (train.train_content, train.train_grain):
        with pytest.raises(train.MissingArtifactError) as err:
            fn(cfg)
        assert err.value.stage == "dvae"
    with pytest.raises(train.MissingArtifactError) as err:
        train.sample_pipeline(cfg, 1)
    assert err.value.stage == "content"


def test_calibration_persists_thresholds(trained):
    on_disk = train.load_run_config(f"{trained.out_dir}/config.json")
    assert on_disk.thresholds is not None and on_disk.thresholds[-1] == float("-inf")
    grains = train.load_grain_maps(on_disk)
    assert grains.shape == (16, 8, 8) and abs((grains == 1).float().mean().item() - 0.5) <= 1 / grains.numel()


def test_manifests(trained):
    for stage in ("calibrate", "dvae", "grain", "content"):
        m = json.loads((train.Path(trained.out_dir) / stage / "run_manifest.json").read_text())
        assert m["seed"] == trained.seed and len(m["config_hash"]) == 64 and len(m["code_hash"]) == 64
        assert train.RunConfig.from_dict(m["config"]).dvae_steps == trained.dvae_steps
    rows = (train.Path(trained.out_dir) / "content" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "step,loss,component" and len(rows) == 1 + trained.content_steps


def test_reruns_are_bit_identical(tmp_path):
    logs = []
    for name in ("a", "b"):
        cfg = tiny_config(tmp_path / name)
        run_all(cfg)
        logs.append([(tmp_path / name / s / "metrics.csv").read_bytes() for s in ("dvae", "grain", "content")])
    assert logs[0] == logs[1]


@pytest.mark.parametrize("stage", ["dvae", "content"])
def test_resume_replays_identical_losses(tmp_path, stage):
    steps = {f"{stage}_steps": 6}
    full = tiny_config(tmp_path / "full", **steps)
    part = tiny_config(tmp_path / "part", **{f"{stage}_steps": 3})
    for cfg in (full, part):
        train.save_run_config(cfg)
        train.calibrate(cfg)
        if stage == "content":
            train.train_dvae(cfg)
    fn = train.train_dvae if stage == "dvae" else train.train_content
    fn(full)
    fn(part)
    setattr(part, f"{stage}_steps", 6)
    fn(part)
    a = (tmp_path / "full" / stage / "metrics.csv").read_bytes()
    b = (tmp_path / "part" / stage / "metrics.csv").read_bytes()
    assert a == b


def test_batch_size_one(tmp_path):
    cfg = tiny_config(tmp_path, dvae_batch=1, grain_batch=1, content_batch=1, dvae_steps=2, grain_steps=2, content_steps=2)
    run_all(cfg)
    assert len(train.read_metrics(tmp_path / "content" / "metrics.csv")) == 2


def test_sample_sources(trained, tmp_path):
    for source in ("model", "ground-truth", "random"):
        paths = train.sample_pipeline(trained, 2, class_id=1, grain_source=source, out_dir=tmp_path / source)
        assert len(paths) == 2
        img = np.asarray(Image.open(paths[0]))
        assert img.shape == (64, 64, 3)
        assert (tmp_path / source / "grain_000.png").exists() and (tmp_path / source / "pair_001.png").exists()


def test_fixed_file_heatmap_is_pixel_identical(trained, tmp_path):
    g = np.where(np.random.default_rng(0).random((8, 8)) < 0.3, 1, 2)
    save_grain_png(tmp_path / "in.png", g, 2, 8)
    train.sample_pipeline(trained, 1, grain_source="fixed-file", grain_file=tmp_path / "in.png", out_dir=tmp_path / "o")
    a = np.asarray(Image.open(tmp_path / "in.png"))
    b = np.asarray(Image.open(tmp_path / "o" / "grain_000.png"))
    assert np.array_equal(a, b)
    with pytest.raises(train.ConfigError):
        train.sample_pipeline(trained, 1, grain_source="fixed-file")
    with pytest.raises(train.ConfigError):
        train.sample_pipeline(trained, 1, grain_source="sideways")


def test_zero_samples_writes_nothing(trained, tmp_path):
    assert train.sample_pipeline(trained, 0, out_dir=tmp_path / "none") == []
    assert list((tmp_path / "none").iterdir()) == []


def test_random_grain_fraction():
    g = train.random_grain_maps(Rng(0, "r"), 100, 8, 8, 0.5)
    assert abs((g == 1).float().mean().item() - 0.5) <= 0.05


@pytest.mark.slow
def test_dvae_beats_all_coarse_baseline(tmp_path):
    """Reported comparison: dynamic grain vs all-coarse at equal steps."""
    steps = 200
    dyn = train.RunConfig(out_dir=str(tmp_path / "dyn"), dvae_steps=steps, data={**train.RunConfig().data, "count": 256})
    train.save_run_config(dyn)
    train.calibrate(dyn)
    grains = train.load_grain_maps(dyn)
    train.train_dvae(dyn)
    coarse = train.RunConfig(**{**dyn.__dict__, "out_dir": str(tmp_path / "coarse")})
    train.train_dvae(coarse, grains=torch.full_like(grains, 2))
    images, _ = train.load_corpus(dyn)
    x = train.to_nchw(images)
    mse_dyn = train.dvae_eval_mse(train.load_dvae(dyn), x, grains)
    mse_coarse = train.dvae_eval_mse(train.load_dvae(coarse), x, torch.full_like(grains, 2))
    print(f"\nDVAE recon MSE after {steps} steps: dynamic {mse_dyn:.5f} vs all-coarse {mse_coarse:.5f}")
    assert mse_dyn < mse_coarse
