"""Verification suites: oracle equivalence, identities, table reproduction, toy run."""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import grained, oracles
from .content import (
    DiTBlock, DynamicContentTransformer, FinalLayer, WindowAttention, combine, loss_weights,
    multi_grained_loss, preset, route,
)
from .diffusion import DiffusionSchedule, p_sample_step, predict_x0, q_sample, structured_noise
from .dvae import DVAE, FactorLadder, dvae_loss, mix_latents
from .grain_prior import grain_ce_loss
from .perf import measured_macs, omega_msa, omega_wmsa, reproduce_table
from .tensor import Rng


@dataclass
class CheckResult:
    criterion: int
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] criterion {self.criterion:>2} {self.name} ({self.seconds:.1f}s)"

    def to_dict(self) -> dict:
        return asdict(self)


def _timed(criterion: int, name: str, budget: float | None = None):
    def wrap(fn):
        def run(**kwargs) -> CheckResult:
            t0 = time.perf_counter()
            passed, detail = fn(**kwargs)
            dt = time.perf_counter() - t0
            if budget is not None:
                detail["budget_s"] = budget
                passed = passed and dt < budget
            return CheckResult(criterion, name, bool(passed), detail, dt)

        run.criterion = criterion
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


def random_grain_maps(gen: np.random.Generator, n: int, rows: int = 8, cols: int = 8) -> np.ndarray:
    """Random maps with per-map fine probability, plus all-fine/all-coarse extremes."""
    p = gen.random((n, 1, 1))
    return np.where(gen.random((n, rows, cols)) < p, 1, 2).astype(np.int64)


# -- 1, 2: grained coding ------------------------------------------------------------

@_timed(1, "entropy oracle", budget=10.0)
def entropy_oracle(n_images: int = 100, size: int = 32, region: int = 8, seed: int = 0):
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_images):
        img = gen.random((size, size, 3))
        gray = grained.to_grayscale(img)
        fast = grained.entropy_map(gray, region)
        slow = oracles.naive_entropy_map(gray, region)
        worst = max(worst, float(np.abs(fast - slow).max()))
    return worst <= 1e-6, {"max_abs_err": worst, "tolerance": 1e-6}


@_timed(2, "calibration ratios")
def calibration_ratios(seed: int = 0):
    gen = np.random.default_rng(seed)
    maps = []
    for _ in range(20):
        # per-region contrast spreads the entropies out
        contrast = np.repeat(np.repeat(gen.random((8, 8)), 8, 0), 8, 1)[..., None]
        img = np.clip(0.5 + contrast * (gen.random((64, 64, 3)) - 0.5), 0, 1)
        maps.append(grained.image_entropy_map(img, 8))
    pool = np.concatenate([m.ravel() for m in maps])
    n = pool.size
    distinct = len(np.unique(pool)) == n
    th = grained.calibrate_thresholds(maps, [0.5, 0.5])
    frac = float(np.mean([grained.assign_grain_map(m, th) == 1 for m in maps]))
    all_coarse = all((grained.assign_grain_map(m, grained.calibrate_thresholds(maps, [0.0, 1.0])) == 2).all() for m in maps)
    all_fine = all((grained.assign_grain_map(m, grained.calibrate_thresholds(maps, [1.0, 0.0])) == 1).all() for m in maps)
    ok = n >= 1000 and distinct and abs(frac - 0.5) <= 1 / n and all_coarse and all_fine
    return ok, {"regions": n, "distinct": distinct, "fine_fraction": frac, "all_coarse": all_coarse, "all_fine": all_fine}


# -- 3, 4, 5: mixing, routing, loss weights ------------------------------------------------

@_timed(3, "neighbor-copy exactness")
def neighbor_copy_exactness(n_maps: int = 10_000, seed: int = 0, oracle_maps: int = 100):
    gen = np.random.default_rng(seed)
    ladder = FactorLadder((4, 8), 4)
    grains = random_grain_maps(gen, n_maps)
    ok = True
    chunk = 1000
    for lo in range(0, n_maps, chunk):
        g = torch.from_numpy(grains[lo : lo + chunk])
        B = g.shape[0]
        z1 = torch.from_numpy(gen.standard_normal((B, 4, 16, 16)).astype(np.float32))
        z2 = torch.from_numpy(gen.standard_normal((B, 4, 8, 8)).astype(np.float32))
        mix = mix_latents([z1, z2], g, ladder).latent
        blocks = mix.reshape(B, 4, 8, 2, 8, 2)
        coarse = (g == 2)[:, None, :, None, :, None].expand_as(blocks)
        replicated = torch.equal(blocks[coarse], z2[:, :, :, None, :, None].expand_as(blocks)[coarse])
        fine = ~coarse
        kept = torch.equal(blocks[fine], z1.reshape(B, 4, 8, 2, 8, 2)[fine])
        ok = ok and replicated and kept
        if lo == 0:
            for i in range(min(oracle_maps, B)):
                ref = oracles.neighbor_copy(z2[i].numpy(), z1[i].numpy(), grains[i])
                ok = ok and np.array_equal(ref, mix[i].numpy())
    z1 = torch.randn(3, 4, 16, 16)
    all_fine = torch.equal(mix_latents([z1, torch.randn(3, 4, 8, 8)], torch.ones(3, 8, 8, dtype=torch.long), ladder).latent, z1)
    return ok and all_fine, {"maps": n_maps, "oracle_maps": oracle_maps, "all_fine_bitwise": all_fine}


@_timed(4, "router/combine partition")
def router_partition(n_maps: int = 10_000, seed: int = 0):
    gen = np.random.default_rng(seed)
    grains = np.concatenate([random_grain_maps(gen, n_maps), np.ones((1, 8, 8), np.int64), np.full((1, 8, 8), 2)])
    C, P = 2, 2
    ok = True
    chunk = 1000
    for lo in range(0, len(grains), chunk):
        g = torch.from_numpy(grains[lo : lo + chunk])
        B = g.shape[0]
        # identity-valued codes: coarse code = +(region id + 1), fine code = -(cell id + 1)
        region_id = torch.arange(64, dtype=torch.float64) + 1
        coarse_codes = region_id[None, :, None].expand(B, 64, C)
        cell_id = -(torch.arange(256, dtype=torch.float64) + 1).reshape(16, 16)
        # (p, q, c) feature order per region token
        per_token = cell_id.reshape(8, 2, 8, 2).permute(0, 2, 1, 3).reshape(64, 4)
        fine_codes = per_token[None, :, :, None].expand(B, 64, 4, C).reshape(B, 64, 4 * C)
        routed = route(coarse_codes, fine_codes, g, C, P)
        out = combine(routed.eps_coarse, routed.eps_fine, g)[:, 0].numpy()
        for b in range(B):
            counts = oracles.write_counts(grains[lo + b], P)
            ok = ok and bool((counts == 1).all())
            expected = oracles.neighbor_copy(region_id.reshape(1, 8, 8).numpy(), cell_id[None].numpy(), grains[lo + b])[0]
            ok = ok and np.array_equal(out[b], expected)
            # every fine source lands once, every coarse source P*P times
            vals, counts_src = np.unique(out[b], return_counts=True)
            ok = ok and all((c == 1) if v < 0 else (c == P * P) for v, c in zip(vals, counts_src))
    return ok, {"maps": len(grains)}


@_timed(5, "loss weights")
def loss_weight_identity(seed: int = 0):
    w2 = loss_weights(2)
    exact = w2 == [0.25, 1.0] and loss_weights(3) == [1 / 16, 1 / 4, 1.0]
    gen = torch.Generator().manual_seed(seed)
    g = torch.from_numpy(random_grain_maps(np.random.default_rng(seed), 4))
    tc, tf = torch.randn(4, 4, 8, 8, generator=gen), torch.randn(4, 4, 16, 16, generator=gen)
    zero = multi_grained_loss((tc, tf), (tc.clone(), tf.clone()), g).item()
    return exact and zero == 0.0, {"alpha_k2": w2, "perfect_prediction_loss": zero}


# -- 6: gradient checks --------------------------------------------------------------------

def _grad_case(fn, tensors, max_per_tensor=12, seed=0) -> float:
    for t in tensors:
        t.grad = None
    fn().backward()
    analytic = [t.grad.detach().clone().view(-1).numpy() for t in tensors]
    numeric = oracles.central_difference(fn, tensors, max_per_tensor=max_per_tensor, seed=seed)
    return max(oracles.max_relative_error(a[idx], num) for a, (idx, num) in zip(analytic, numeric))


def _randomize(module: torch.nn.Module, gen: torch.Generator, std: float = 0.3) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * std)


def grad_cases(instances: int = 3):
    """Yields (name, instance, fn, tensors) for every differentiable piece."""
    torch.set_default_dtype(torch.float64)
    try:
        for i in range(instances):
            gen = torch.Generator().manual_seed(100 + i)
            w = torch.randn(1, 8, 8, 16, generator=gen)

            layer = WindowAttention(16, 2, 4)
            _randomize(layer, gen)
            x = torch.randn(1, 8, 8, 16, generator=gen, requires_grad=True)
            yield "w_msa", i, (lambda layer=layer, x=x, w=w: (layer(x) * w).sum()), [x, layer.rel_bias, layer.attn.qkv.weight]

            block = DiTBlock(16, 2, 32)
            _randomize(block, gen)
            x = torch.randn(2, 6, 16, generator=gen, requires_grad=True)
            c = torch.randn(2, 16, generator=gen, requires_grad=True)
            wb = torch.randn(2, 6, 16, generator=gen)
            yield "adaln_zero_block", i, (lambda block=block, x=x, c=c, wb=wb: (block(x, c) * wb).sum()), [x, c, block.ada.weight, block.mlp.fc1.weight]

            final = FinalLayer(16, (2, 8))
            _randomize(final, gen)
            x = torch.randn(2, 16, 16, generator=gen, requires_grad=True)
            c = torch.randn(2, 16, generator=gen)
            g = torch.from_numpy(random_grain_maps(np.random.default_rng(i), 2, 4, 4))
            wr = torch.randn(2, 2, 8, 8, generator=gen)

            def router(final=final, x=x, c=c, g=g, wr=wr):
                coarse, fine = final(x, c)
                r = route(coarse, fine, g, 2, 2)
                return (combine(r.eps_coarse, r.eps_fine, g) * wr).sum()

            yield "router_heads", i, router, [x, final.heads[0].weight, final.heads[1].weight, final.ada.weight]

            g = torch.from_numpy(random_grain_maps(np.random.default_rng(10 + i), 2))
            tc, tf = torch.randn(2, 4, 8, 8, generator=gen), torch.randn(2, 4, 16, 16, generator=gen)
            pc = torch.randn(2, 4, 8, 8, generator=gen, requires_grad=True)
            pf = torch.randn(2, 4, 16, 16, generator=gen, requires_grad=True)
            yield "multi_grained_loss", i, (lambda pc=pc, pf=pf, g=g, tc=tc, tf=tf: multi_grained_loss((tc, tf), (pc, pf), g)), [pc, pf]

            logits = torch.randn(2, 8, 8, 2, generator=gen, requires_grad=True)
            target = torch.from_numpy(random_grain_maps(np.random.default_rng(20 + i), 2))
            yield "grain_ce_loss", i, (lambda logits=logits, target=target: grain_ce_loss(logits, target)), [logits]

            img = torch.rand(2, 3, 32, 32, generator=gen)
            recon = torch.rand(2, 3, 32, 32, generator=gen, requires_grad=True)
            stats = [(torch.randn(2, 4, 8, 8, generator=gen, requires_grad=True), torch.randn(2, 4, 8, 8, generator=gen, requires_grad=True)),
                     (torch.randn(2, 4, 4, 4, generator=gen, requires_grad=True), torch.randn(2, 4, 4, 4, generator=gen, requires_grad=True))]
            g = torch.from_numpy(random_grain_maps(np.random.default_rng(30 + i), 2, 4, 4))
            # a large KL weight so the KL path dominates some entries
            yield "dvae_loss", i, (lambda img=img, recon=recon, stats=stats, g=g: dvae_loss(img, recon, stats, g, kl_weight=0.1)), \
                [recon] + [t for pair in stats for t in pair]
    finally:
        torch.set_default_dtype(torch.float32)


@_timed(6, "gradient checks", budget=60.0)
def gradient_checks(instances: int = 3, tolerance: float = 1e-3):
    worst: dict[str, float] = {}
    torch.set_default_dtype(torch.float64)
    try:
        for name, i, fn, tensors in grad_cases(instances):
            torch.set_default_dtype(torch.float64)
            err = _grad_case(fn, tensors, seed=i)
            worst[name] = max(worst.get(name, 0.0), err)
    finally:
        torch.set_default_dtype(torch.float32)
    return all(v < tolerance for v in worst.values()) and len(worst) == 6, {"max_rel_err": worst, "instances": instances}


# -- 7, 8: identities and locality -------------------------------------------------------------

def _toy_cfg(**kw):
    return preset("d2it-toy", **kw)


@_timed(7, "adaLN-Zero / RefineNet identities")
def init_identities(seed: int = 0):
    torch.manual_seed(seed)
    model = DynamicContentTransformer(_toy_cfg())
    block = model.blocks[0]
    x = torch.randn(2, 64, 128)
    c = torch.randn(2, 128)
    with torch.no_grad():
        block_identity = torch.equal(block(x, c), x)
        # non-trivial rough fine noise so the refine identity is not 0 == 0
        for head in model.router.heads:
            head.weight.normal_(0, 0.1)
        z = torch.randn(2, 4, 16, 16)
        g = torch.from_numpy(random_grain_maps(np.random.default_rng(seed), 2))
        out = model(z, torch.tensor([10, 500]), torch.tensor([0, 1]), g)
        refine_identity = torch.equal(out.eps_fine, out.eps_fine_rough) and out.eps_fine_rough.abs().sum() > 0
    return block_identity and refine_identity, {"block_identity": block_identity, "refine_identity": bool(refine_identity)}


@_timed(8, "window locality")
def window_locality(seed: int = 0, trials: int = 5):
    torch.manual_seed(seed)
    layer = WindowAttention(32, 4, 4)
    with torch.no_grad():
        layer.rel_bias.normal_()
    ok = True
    for trial in range(trials):
        x = torch.randn(2, 16, 16, 32)
        wy, wx = np.random.default_rng(trial).integers(0, 4, 2)
        x2 = x.clone()
        x2[:, wy * 4 : wy * 4 + 4, wx * 4 : wx * 4 + 4] += torch.randn(2, 4, 4, 32)
        with torch.no_grad():
            a, b = layer(x), layer(x2)
        outside = torch.ones(16, 16, dtype=torch.bool)
        outside[wy * 4 : wy * 4 + 4, wx * 4 : wx * 4 + 4] = False
        ok = ok and torch.equal(a[:, outside], b[:, outside]) and not torch.equal(a[:, ~outside], b[:, ~outside])
    return ok, {"trials": trials}


# -- 9, 10: complexity and tables ----------------------------------------------------------------

MAC_SHAPES = [(8, 8, 16, 4, 1), (8, 8, 16, 4, 4), (16, 16, 32, 4, 4), (12, 12, 24, 6, 2), (16, 8, 8, 8, 2), (32, 32, 16, 16, 1)]


@_timed(9, "complexity formulas")
def complexity_formulas():
    direct = omega_msa(32, 32, 768) == 4_026_531_840 and omega_wmsa(32, 32, 768, 16) == 2_818_572_288
    oracle = all(
        omega_msa(h, w, c) == oracles.omega_msa_direct(h, w, c) and omega_wmsa(h, w, c, m) == oracles.omega_wmsa_direct(h, w, c, m)
        for h, w, c, m, _ in MAC_SHAPES
    )
    rows = []
    for h, w, C, M, heads in MAC_SHAPES:
        macs = measured_macs(h, w, C, M, heads)
        attn = omega_wmsa(h, w, C, M) - 4 * h * w * C * C
        rows.append({"shape": [h, w, C, M, heads], "attention": macs["attention"], "formula": attn,
                     "projection": macs["projection"], "projection_formula": 4 * h * w * C * C})
    measured = all(r["attention"] == r["formula"] and r["projection"] == r["projection_formula"] for r in rows)
    return direct and oracle and measured and len(rows) >= 5, {"direct": direct, "shapes": rows}


@_timed(10, "table reproduction", budget=5.0)
def table_reproduction():
    rows = [r for r in reproduce_table() if r["method"] in GATED_ROWS]
    ok = all(r["params_ok"] and r["flops_ok"] for r in rows)
    return ok, {"rows": rows}


GATED_ROWS = ("dit-b/2", "d2it-b", "dit-l/2", "d2it-l", "dit-xl/2", "d2it-xl")


# -- 11: schedule and sampler ------------------------------------------------------------------------

@_timed(11, "schedule and sampler")
def schedule_and_sampler(seed: int = 0, cases: int = 50, steps: int = 250):
    sch = DiffusionSchedule()
    endpoints = sch.betas[0] == 1e-4 and sch.betas[-1] == 2e-2
    decreasing = bool((np.diff(sch.alpha_bars) < 0).all())
    gen = np.random.default_rng(seed)
    inv_err = 0.0
    for case in range(cases):
        g = torch.from_numpy(random_grain_maps(gen, 2))
        z0 = torch.from_numpy(gen.standard_normal((2, 4, 16, 16)).astype(np.float32))
        t = torch.from_numpy(gen.integers(0, sch.num_steps, 2))
        z_t, _, eps = q_sample(sch, z0, t, g, Rng(seed, f"q:{case}"))
        for b in range(2):
            rec = predict_x0(sch, z_t[b], int(t[b]), eps[b])
            ref = oracles.ddpm_invert(z_t[b].double().numpy(), eps[b].double().numpy(), float(sch.alpha_bars[t[b]]))
            inv_err = max(inv_err, float((rec - z0[b]).abs().max()), float(np.abs(ref - z0[b].numpy()).max()))

    torch.manual_seed(seed)
    model = DynamicContentTransformer(_toy_cfg(hidden=32, heads=2, backbone_layers=1, refine_layers=1))
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0, 0.05)
    g = torch.from_numpy(random_grain_maps(gen, 2))
    coarse = (g == 2)[:, None]
    replicated = []

    def check(z):
        blocks = z.reshape(2, 4, 8, 2, 8, 2)
        ref = blocks[:, :, :, :1, :, :1].expand_as(blocks)
        mask = coarse[:, :, :, None, :, None].expand_as(blocks)
        replicated.append(torch.equal(blocks[mask], ref[mask]))

    rng = Rng(seed, "chain")
    ec, ef = structured_noise(rng.child("init"), g, 4, 16)
    z = combine(ec, ef, g)
    check(z)
    ts = sch.sample_steps(steps)[::-1]
    y = torch.tensor([0, 1])
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
            z = p_sample_step(sch, lambda *a: model(*a).eps, z, int(t), t_prev, y, g, 1.5, rng.child("step", i), model.null_class)
            check(z)
    ok = endpoints and decreasing and inv_err <= 1e-4 and all(replicated) and len(replicated) == steps + 1
    return ok, {"endpoints": endpoints, "alpha_bar_decreasing": decreasing, "max_inverse_err": inv_err,
                "replication_checks": len(replicated), "replicated_every_step": all(replicated)}


# -- 12: toy end-to-end ------------------------------------------------------------------------------

@_timed(12, "toy end-to-end", budget=20 * 60.0)
def toy_end_to_end(out_dir: str | None = None, seed: int = 0, samples: int = 4, grain_maps: int = 100):
    from .grain_prior import sample_grain_map
    from .train import (
        RunConfig, calibrate, load_grain_maps, load_grain_model, read_metrics, sample_pipeline,
        save_run_config, train_content, train_dvae, train_grain,
    )

    tmp = None
    if out_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix="dyngrain-e2e-")
        out_dir = tmp.name
    try:
        cfg = RunConfig(out_dir=out_dir, seed=seed)
        save_run_config(cfg)
        detail: dict = {"out_dir": out_dir}
        t0 = time.perf_counter()
        calibrate(cfg)
        detail["corpus_fine_fraction"] = corpus = float((load_grain_maps(cfg) == 1).float().mean())

        train_dvae(cfg, resume=False)
        d = read_metrics(cfg.stage_dir("dvae") / "metrics.csv")
        detail["dvae_drop"] = float(1 - d[-50:].mean() / d[:50].mean())

        train_grain(cfg, resume=False)
        ce = read_metrics(cfg.stage_dir("grain") / "metrics.csv")
        detail["grain_ce_first50"] = float(ce[:50].mean())
        detail["grain_ce_last50"] = float(ce[-50:].mean())
        model = load_grain_model(cfg)
        labels = Rng(seed, "e2e-labels").integers(0, model.cfg.num_classes, grain_maps)
        g = sample_grain_map(model, Rng(seed, "e2e-grain"), labels)
        detail["sampled_fine_fraction"] = sampled = float((g == 1).float().mean())

        train_content(cfg, resume=False)
        c = read_metrics(cfg.stage_dir("content") / "metrics.csv")
        detail["content_drop"] = float(1 - c[-50:].mean() / c[:50].mean())

        paths = sample_pipeline(cfg, samples)
        from .io import load_png

        finite = all(np.isfinite(load_png(p)).all() for p in paths)
        heatmaps = all((p.parent / p.name.replace("sample_", "grain_")).exists() for p in paths)
        detail["samples_finite"] = finite and len(paths) == samples
        detail["heatmaps"] = heatmaps
        detail["pipeline_s"] = time.perf_counter() - t0

        ok = (
            detail["dvae_drop"] >= 0.30
            and detail["grain_ce_last50"] < math.log(2)
            and abs(sampled - corpus) <= 0.1
            and detail["content_drop"] >= 0.30
            and detail["samples_finite"]
            and heatmaps
        )
        return ok, detail
    finally:
        if tmp is not None:
            tmp.cleanup()


CRITERIA = [
    entropy_oracle, calibration_ratios, neighbor_copy_exactness, router_partition, loss_weight_identity,
    gradient_checks, init_identities, window_locality, complexity_formulas, table_reproduction,
    schedule_and_sampler, toy_end_to_end,
]

SUITES = {
    "entropy": [entropy_oracle, calibration_ratios],
    "mixing": [neighbor_copy_exactness],
    "partition": [router_partition, loss_weight_identity],
    "grad": [gradient_checks],
    "identity": [init_identities, window_locality],
    "tables": [complexity_formulas, table_reproduction],
    "schedule": [schedule_and_sampler],
    "e2e": [toy_end_to_end],
}
SUITES["fast"] = [fn for fn in CRITERIA if fn is not toy_end_to_end]
SUITES["all"] = list(CRITERIA)


def run_suite(name: str, **kwargs) -> list[CheckResult]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    results = []
    for fn in SUITES[name]:
        extra = {k: v for k, v in kwargs.items() if fn is toy_end_to_end}
        results.append(fn(**extra))
    return results
