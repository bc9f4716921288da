"""Stage orchestration: calibration, the three training loops, sampling."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import grained
from .content import DynamicContentTransformer, ModelConfig, multi_grained_loss, preset
from .data import SyntheticSpec, load_image_dir, synthetic_corpus
from .diffusion import DiffusionSchedule, Ema, q_sample, sample
from .dvae import DVAE, FactorLadder, dvae_loss, mix_latents
from .grain_prior import GRAIN_PRESETS, GrainTransformer, grain_ce_loss, sample_grain_map
from .io import load_checkpoint, load_grain_png, save_checkpoint, save_grain_png, save_pgm, save_png, side_by_side
from .tensor import Rng, load_tensors, save_tensors

log = logging.getLogger(__name__)

STAGES = ("calibrate", "dvae", "grain", "content")


class ConfigError(ValueError):
    pass


class MissingArtifactError(ConfigError):
    def __init__(self, stage: str, path):
        self.stage = stage
        super().__init__(f"missing prerequisite from stage {stage!r}: {path} (run `{_command(stage)}` first)")


def _command(stage: str) -> str:
    return {"calibrate": "calibrate", "dvae": "train-dvae", "grain": "train-grain", "content": "train-content"}[stage]


@dataclass
class OptimConfig:
    name: str = "adamw"
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    warmup_steps: int = 0

    def build(self, params) -> torch.optim.Optimizer:
        if self.name == "adam":
            return torch.optim.Adam(params, lr=self.lr, betas=tuple(self.betas), weight_decay=self.weight_decay)
        if self.name == "adamw":
            return torch.optim.AdamW(params, lr=self.lr, betas=tuple(self.betas), weight_decay=self.weight_decay)
        raise ConfigError(f"unknown optimizer {self.name!r}")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr


def _optim_dict(*args) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(OptimConfig(*args))))


def reference_dvae_optim(batch_size: int) -> OptimConfig:
    # base LR 4.5e-6 scaled by batch size
    return OptimConfig("adam", 4.5e-6 * batch_size, (0.5, 0.9), 0.0)


def reference_transformer_optim() -> OptimConfig:
    return OptimConfig("adamw", 1e-4, (0.9, 0.999), 0.01)


@dataclass
class RunConfig:
    out_dir: str = "runs/toy"
    seed: int = 0
    data: dict = field(default_factory=lambda: dataclasses.asdict(SyntheticSpec()))
    corpus_dir: str | None = None
    factors: list = field(default_factory=lambda: [4, 8])
    n_z: int = 4
    ratios: list = field(default_factory=lambda: [0.5, 0.5])
    sigma: float = grained.DEFAULT_SIGMA
    per_image_thresholds: bool = False
    thresholds: list | None = None

    dvae_channels: list = field(default_factory=lambda: [32, 64])
    dvae_grain_input: bool = False
    kl_weight: float = 1e-6
    dvae_steps: int = 500
    dvae_batch: int = 8
    dvae_optim: dict = field(default_factory=lambda: _optim_dict("adam", 1e-3, (0.5, 0.9), 0.0))

    grain_preset: str = "toy"
    grain_steps: int = 300
    grain_batch: int = 32
    grain_optim: dict = field(default_factory=lambda: _optim_dict("adamw", 1e-3))

    model_preset: str = "d2it-toy"
    model_overrides: dict = field(default_factory=dict)
    content_steps: int = 1000
    content_batch: int = 32
    content_optim: dict = field(default_factory=lambda: _optim_dict("adamw", 3e-4))
    ema_decay: float = 0.995

    diffusion_steps: int = 1000
    sample_steps: int = 250
    guidance: float = 1.0
    ckpt_every: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("thresholds") is not None:
            d["thresholds"] = [float(v) for v in d["thresholds"]]  # "-inf" is stored as a string
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            FactorLadder(tuple(self.factors), self.n_z)
            grained.validate_ratios(self.ratios)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if len(self.ratios) != len(self.factors):
            raise ConfigError("need one grain ratio per factor")

    def to_json(self) -> str:
        return json.dumps(_jsonable(dataclasses.asdict(self)), indent=2, sort_keys=True)

    @property
    def ladder(self) -> FactorLadder:
        return FactorLadder(tuple(self.factors), self.n_z)

    def optim(self, stage: str) -> OptimConfig:
        return OptimConfig(**getattr(self, f"{stage}_optim"))

    def stage_dir(self, stage: str) -> Path:
        return Path(self.out_dir) / stage


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _thresholds_from_json(values) -> np.ndarray:
    return np.array([float(v) for v in values], dtype=np.float64)


def load_run_config(path) -> RunConfig:
    return RunConfig.from_dict(json.loads(Path(path).read_text()))


def save_run_config(cfg: RunConfig) -> Path:
    path = Path(cfg.out_dir) / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_json())
    return path


def code_hash() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(cfg: RunConfig, stage: str, extra: dict | None = None) -> Path:
    text = cfg.to_json()
    body = {
        "stage": stage,
        "seed": cfg.seed,
        "config": json.loads(text),
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
        "code_hash": code_hash(),
        "torch": torch.__version__,
    }
    body.update(extra or {})
    d = cfg.stage_dir(stage)
    d.mkdir(parents=True, exist_ok=True)
    path = d / "run_manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True))
    return path


# -- corpus --------------------------------------------------------------------------

def load_corpus(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.corpus_dir:
        return load_image_dir(cfg.corpus_dir, SyntheticSpec(**cfg.data).image_size)
    return synthetic_corpus(SyntheticSpec(**cfg.data))


def to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).float()


def calibrate(cfg: RunConfig) -> np.ndarray:
    """Entropy maps, thresholds and ground-truth grain maps for the corpus."""
    images, labels = load_corpus(cfg)
    S = cfg.ladder.region_size
    maps = [grained.image_entropy_map(im, S, cfg.sigma) for im in images]
    if cfg.per_image_thresholds:
        grains = grained.grain_maps_for_corpus(maps, cfg.ratios, per_image=True)
        thresholds = grained.calibrate_thresholds(maps, cfg.ratios)
    else:
        thresholds = grained.calibrate_thresholds(maps, cfg.ratios)
        grains = [grained.assign_grain_map(m, thresholds) for m in maps]
    d = cfg.stage_dir("calibrate")
    d.mkdir(parents=True, exist_ok=True)
    save_tensors(d / "entropy.gft1", [np.stack(maps)])
    save_tensors(d / "grain.gft1", [np.stack(grains)])
    save_pgm(d / "gray_0.pgm", grained.to_grayscale(images[0]))
    save_grain_png(d / "grain_0.png", grains[0], cfg.ladder.k, S)
    cfg.thresholds = [float(t) for t in thresholds]
    save_run_config(cfg)
    fine = float(np.mean([grained.fine_fraction(g) for g in grains]))
    write_manifest(cfg, "calibrate", {"fine_fraction": fine, "n_regions": int(sum(m.size for m in maps))})
    log.info("thresholds %s, fine fraction %.4f", thresholds, fine)
    return thresholds


def load_grain_maps(cfg: RunConfig) -> torch.Tensor:
    path = cfg.stage_dir("calibrate") / "grain.gft1"
    if cfg.thresholds is None or not path.exists():
        raise MissingArtifactError("calibrate", path)
    (g,) = load_tensors(path)
    return g.round().long()


# -- generic loop ----------------------------------------------------------------------

class MetricsLog:
    HEADER = ["step", "loss", "component"]

    def __init__(self, path: Path, resume_step: int):
        self.path = path
        rows = []
        if resume_step > 0 and path.exists():
            with open(path, newline="") as f:
                rows = [r for r in csv.DictReader(f) if int(r["step"]) < resume_step]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.HEADER)
            for r in rows:
                w.writerow([r["step"], r["loss"], r["component"]])

    def append(self, step: int, values: dict) -> None:
        with open(self.path, "a", newline="") as f:
            w = csv.writer(f)
            for name, v in values.items():
                w.writerow([step, repr(float(v)), name])


def read_metrics(path, component: str = "total") -> np.ndarray:
    with open(path, newline="") as f:
        return np.array([float(r["loss"]) for r in csv.DictReader(f) if r["component"] == component])


def run_loop(cfg: RunConfig, stage: str, model: torch.nn.Module, steps: int,
             step_fn: Callable[[int], tuple[torch.Tensor, dict]], optim_cfg: OptimConfig,
             ema: Ema | None = None, extra: dict | None = None, resume: bool = True) -> Path:
    """Optimize ``model`` for ``steps`` steps with checkpoint/resume support.

    ``step_fn(step)`` returns the scalar loss and a dict of logged parts; all
    step randomness must derive from ``step`` so that resumed runs replay
    the same trajectory.
    """
    d = cfg.stage_dir(stage)
    d.mkdir(parents=True, exist_ok=True)
    ckpt = d / "checkpoint"
    opt = optim_cfg.build(model.parameters())
    start = 0
    if resume and (ckpt / "manifest.json").exists():
        state, manifest = load_checkpoint(ckpt)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optim"])
        if ema is not None and "ema" in state:
            ema.load_state_dict(state["ema"])
        start = manifest["step"]
        log.info("%s: resuming at step %d", stage, start)
    metrics = MetricsLog(d / "metrics.csv", start)

    def checkpoint(step):
        state = {"model": model.state_dict(), "optim": opt.state_dict()}
        if ema is not None:
            state["ema"] = ema.state_dict()
        save_checkpoint(ckpt, state, {"stage": stage, "step": step, "extra": extra or {}})

    model.train()
    for step in range(start, steps):
        for group in opt.param_groups:
            group["lr"] = optim_cfg.lr_at(step)
        loss, parts = step_fn(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not None:
            ema.update(model)
        metrics.append(step, {"total": loss.item(), **parts})
        if cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0 and step + 1 < steps:
            checkpoint(step + 1)
        if step % 100 == 0:
            log.info("%s step %d loss %.5f", stage, step, loss.item())
    checkpoint(max(steps, start))
    write_manifest(cfg, stage, {"steps": steps, "extra": extra or {}})
    return d


def _seed_init(cfg: RunConfig, stage: str) -> None:
    torch.manual_seed(int.from_bytes(hashlib.sha256(f"{cfg.seed}:{stage}".encode()).digest()[:4], "little"))


def _drop_labels(y: torch.Tensor, null: int, p: float, rng: Rng) -> torch.Tensor:
    drop = rng.uniform(y.shape[0]) < p
    return torch.where(drop, torch.full_like(y, null), y)


# -- stage 1: DVAE ------------------------------------------------------------------------

def build_dvae(cfg: RunConfig) -> DVAE:
    return DVAE(cfg.ladder, tuple(cfg.dvae_channels), grain_input=cfg.dvae_grain_input)


def train_dvae(cfg: RunConfig, resume: bool = True, grains: torch.Tensor | None = None) -> Path:
    """Train the DVAE; ``grains`` overrides the calibrated maps (ratio studies)."""
    images, _ = load_corpus(cfg)
    x_all = to_nchw(images)
    if grains is None:
        grains = load_grain_maps(cfg)
    _seed_init(cfg, "dvae")
    model = build_dvae(cfg)
    n = x_all.shape[0]

    def step_fn(step):
        rng = Rng(cfg.seed, f"dvae:{step}")
        idx = rng.child("batch").integers(0, n, cfg.dvae_batch)
        x, g = x_all[idx], grains[idx]
        recon, stats, _ = model(x, g, rng.child("latent"))
        mse = torch.nn.functional.mse_loss(recon, x)
        loss = dvae_loss(x, recon, stats, g, cfg.kl_weight)
        return loss, {"mse": mse.item()}

    return run_loop(cfg, "dvae", model, cfg.dvae_steps, step_fn, cfg.optim("dvae"), resume=resume)


def load_dvae(cfg: RunConfig) -> DVAE:
    ckpt = cfg.stage_dir("dvae") / "checkpoint"
    if not (ckpt / "manifest.json").exists():
        raise MissingArtifactError("dvae", ckpt)
    model = build_dvae(cfg)
    state, _ = load_checkpoint(ckpt)
    model.load_state_dict(state["model"])
    return model.eval()


def dvae_eval_mse(model: DVAE, x: torch.Tensor, grains: torch.Tensor) -> float:
    with torch.no_grad():
        recon, _, _ = model(x, grains, deterministic=True)
        return float(torch.nn.functional.mse_loss(recon.clamp(0, 1), x))


# -- stage 2a: grain prior ------------------------------------------------------------------

def grain_config(cfg: RunConfig, num_classes: int):
    rows = SyntheticSpec(**cfg.data).image_size // cfg.ladder.region_size
    base = GRAIN_PRESETS[cfg.grain_preset]
    return dataclasses.replace(base, rows=rows, cols=rows, k=cfg.ladder.k, num_classes=num_classes)


def train_grain(cfg: RunConfig, resume: bool = True) -> Path:
    grains = load_grain_maps(cfg)
    load_dvae(cfg)  # ground-truth maps are the ones the trained DVAE consumed
    _, labels = load_corpus(cfg)
    labels_t = torch.from_numpy(labels)
    num_classes = int(labels.max()) + 1
    gcfg = grain_config(cfg, num_classes)
    _seed_init(cfg, "grain")
    model = GrainTransformer(gcfg)
    n = grains.shape[0]

    def step_fn(step):
        rng = Rng(cfg.seed, f"grain:{step}")
        idx = rng.child("batch").integers(0, n, cfg.grain_batch)
        y = _drop_labels(labels_t[idx], gcfg.num_classes, gcfg.class_dropout, rng.child("drop"))
        logits = model(model.noise_tokens(rng.child("noise"), len(idx)), y)
        return grain_ce_loss(logits, grains[idx]), {}

    return run_loop(cfg, "grain", model, cfg.grain_steps, step_fn, cfg.optim("grain"),
                    extra={"grain_config": dataclasses.asdict(gcfg)}, resume=resume)


def load_grain_model(cfg: RunConfig) -> GrainTransformer:
    ckpt = cfg.stage_dir("grain") / "checkpoint"
    if not (ckpt / "manifest.json").exists():
        raise MissingArtifactError("grain", ckpt)
    state, manifest = load_checkpoint(ckpt)
    from .grain_prior import GrainPriorConfig

    model = GrainTransformer(GrainPriorConfig.from_dict(manifest["extra"]["grain_config"]))
    model.load_state_dict(state["model"])
    return model.eval()


# -- stage 2b: content model ------------------------------------------------------------------

def content_config(cfg: RunConfig, num_classes: int) -> ModelConfig:
    size = SyntheticSpec(**cfg.data).image_size // cfg.ladder.factors[0]
    overrides = {"latent_size": size, "latent_channels": cfg.n_z, "num_classes": num_classes}
    overrides.update(cfg.model_overrides)
    return preset(cfg.model_preset, **overrides)


def encode_corpus(dvae: DVAE, images: np.ndarray, grains: torch.Tensor, batch: int = 64) -> torch.Tensor:
    x_all = to_nchw(images)
    out = []
    with torch.no_grad():
        for lo in range(0, x_all.shape[0], batch):
            stats = dvae.encode(x_all[lo : lo + batch])
            mix = mix_latents([m for m, _ in stats], grains[lo : lo + batch], dvae.ladder)
            out.append(mix.latent)
    return torch.cat(out)


def train_content(cfg: RunConfig, resume: bool = True) -> Path:
    grains = load_grain_maps(cfg)
    dvae = load_dvae(cfg)
    images, labels = load_corpus(cfg)
    latents = encode_corpus(dvae, images, grains)
    scale = float(1.0 / latents.std())
    z_all = latents * scale
    labels_t = torch.from_numpy(labels)
    mcfg = content_config(cfg, int(labels.max()) + 1)
    schedule = DiffusionSchedule(cfg.diffusion_steps)
    _seed_init(cfg, "content")
    model = DynamicContentTransformer(mcfg)
    ema = Ema(model, cfg.ema_decay)
    n = z_all.shape[0]

    def step_fn(step):
        rng = Rng(cfg.seed, f"content:{step}")
        idx = rng.child("batch").integers(0, n, cfg.content_batch)
        z0, g = z_all[idx], grains[idx]
        y = _drop_labels(labels_t[idx], mcfg.num_classes, mcfg.class_dropout, rng.child("drop"))
        t = rng.child("t").integers(0, schedule.num_steps, len(idx))
        z_t, targets, _ = q_sample(schedule, z0, t, g, rng.child("noise"))
        out = model(z_t, t, y, g)
        loss = multi_grained_loss(targets, (out.eps_coarse, out.eps_fine), g)
        return loss, {}

    return run_loop(cfg, "content", model, cfg.content_steps, step_fn, cfg.optim("content"), ema=ema,
                    extra={"model_config": json.loads(mcfg.to_json()), "latent_scale": scale}, resume=resume)


def load_content_model(cfg: RunConfig, use_ema: bool = True):
    ckpt = cfg.stage_dir("content") / "checkpoint"
    if not (ckpt / "manifest.json").exists():
        raise MissingArtifactError("content", ckpt)
    state, manifest = load_checkpoint(ckpt)
    mcfg = ModelConfig.from_dict(manifest["extra"]["model_config"])
    model = DynamicContentTransformer(mcfg)
    model.load_state_dict(state["model"])
    if use_ema and "ema" in state:
        ema = Ema(model)
        ema.load_state_dict(state["ema"])
        ema.swap(model)
    return model.eval(), manifest["extra"]["latent_scale"]


# -- sampling ----------------------------------------------------------------------------------

GRAIN_SOURCES = ("model", "ground-truth", "random", "fixed-file")


def random_grain_maps(rng: Rng, n: int, rows: int, cols: int, fine_ratio: float) -> torch.Tensor:
    u = rng.uniform(n, rows, cols)
    return torch.where(u < fine_ratio, torch.ones_like(u), torch.full_like(u, 2)).long()


def sample_pipeline(cfg: RunConfig, n: int, class_id: int | None = None, grain_source: str = "model",
                    grain_file=None, out_dir=None, steps: int | None = None) -> list[Path]:
    if grain_source not in GRAIN_SOURCES:
        raise ConfigError(f"unknown grain source {grain_source!r}; choose from {GRAIN_SOURCES}")
    out = Path(out_dir) if out_dir else cfg.stage_dir("samples")
    out.mkdir(parents=True, exist_ok=True)
    if n <= 0:
        return []
    model, scale = load_content_model(cfg)
    dvae = load_dvae(cfg)
    mcfg = model.cfg
    rows = mcfg.backbone_grid
    rng = Rng(cfg.seed, "sample")
    y = torch.full((n,), mcfg.num_classes if class_id is None else class_id, dtype=torch.long)
    if grain_source == "model":
        grains = sample_grain_map(load_grain_model(cfg), rng.child("grain"), y, temperature=1.0)
    elif grain_source == "ground-truth":
        gt = load_grain_maps(cfg)
        grains = gt[torch.arange(n) % gt.shape[0]]
    elif grain_source == "random":
        grains = random_grain_maps(rng.child("grain"), n, rows, rows, cfg.ratios[0])
    else:
        if grain_file is None:
            raise ConfigError("fixed-file grain source needs --grain-file")
        g = torch.from_numpy(load_grain_png(grain_file, rows, rows, mcfg.k))
        grains = g[None].expand(n, -1, -1).clone()
    schedule = DiffusionSchedule(cfg.diffusion_steps)

    def eps_fn(z, t, yy, g):
        return model(z, t, yy, g).eps

    mix = sample(schedule, eps_fn, grains, mcfg.latent_channels, mcfg.latent_size, rng.child("chain"), y,
                 steps or cfg.sample_steps, cfg.guidance, mcfg.num_classes)
    with torch.no_grad():
        images = dvae.decode(mix.latent / scale, grains).clamp(0, 1)
    paths = []
    S = cfg.ladder.region_size
    for i in range(n):
        img = images[i].permute(1, 2, 0).numpy()
        save_png(out / f"sample_{i:03d}.png", img)
        save_grain_png(out / f"grain_{i:03d}.png", grains[i].numpy(), mcfg.k, S)
        from PIL import Image

        Image.fromarray(side_by_side(img, grains[i].numpy(), mcfg.k)).save(out / f"pair_{i:03d}.png")
        paths.append(out / f"sample_{i:03d}.png")
    return paths


def configure_threads() -> None:
    threads = os.environ.get("DYNGRAIN_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
