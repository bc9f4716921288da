"""Command-line entry point: ``dyngrain <subcommand>``.

Environment overrides: ``DYNGRAIN_OUT`` (run directory) and
``DYNGRAIN_THREADS`` (torch intra-op threads). Exit codes: 0 success,
2 configuration error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import train
from .train import ConfigError, RunConfig

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY = 0, 2, 3


def resolve_config(args) -> RunConfig:
    """--config file, else <out>/config.json, else defaults; then CLI overrides."""
    out = args.out or os.environ.get("DYNGRAIN_OUT")
    if args.config:
        cfg = train.load_run_config(args.config)
    elif out and (Path(out) / "config.json").exists():
        cfg = train.load_run_config(Path(out) / "config.json")
    else:
        cfg = RunConfig()
    updates = {}
    if out:
        updates["out_dir"] = out
    if args.seed is not None:
        updates["seed"] = args.seed
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            updates[key] = json.loads(value)
        except json.JSONDecodeError:
            updates[key] = value
    d = json.loads(cfg.to_json())
    d.update(updates)
    return RunConfig.from_dict(d)


def cmd_gen_data(args, cfg):
    from .data import SyntheticSpec, generate_synthetic
    from .io import save_png

    spec = SyntheticSpec(**{**cfg.data, **({"count": args.count} if args.count else {})})
    cfg.data = {**cfg.data, "count": spec.count}
    out = Path(cfg.out_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    for i in range(min(args.preview, spec.count)):
        img, label = generate_synthetic(spec, i)
        save_png(out / f"{i:04d}_class{label}.png", img)
    train.save_run_config(cfg)
    train.write_manifest(cfg, "data", {"count": spec.count})
    print(f"synthetic corpus: {spec.count} images, {min(args.preview, spec.count)} previews in {out}")


def cmd_calibrate(args, cfg):
    if args.ratios:
        cfg.ratios = args.ratios
    cfg.per_image_thresholds = args.per_image or cfg.per_image_thresholds
    cfg.validate()
    th = train.calibrate(cfg)
    print(json.dumps({"thresholds": [float(t) for t in th]}))


def _train(stage):
    def run(args, cfg):
        if args.steps is not None:
            setattr(cfg, f"{stage}_steps", args.steps)
        if args.batch is not None:
            setattr(cfg, f"{stage}_batch", args.batch)
        train.save_run_config(cfg)
        fn = {"dvae": train.train_dvae, "grain": train.train_grain, "content": train.train_content}[stage]
        d = fn(cfg, resume=not args.no_resume)
        losses = train.read_metrics(d / "metrics.csv")
        print(f"{stage}: {len(losses)} steps, final loss {losses[-1]:.6f}" if len(losses) else f"{stage}: nothing to do")

    return run


def cmd_sample(args, cfg):
    if args.steps is not None:
        cfg.sample_steps = args.steps
    if args.guidance is not None:
        cfg.guidance = args.guidance
    paths = train.sample_pipeline(cfg, args.n, args.class_id, args.grain_source, args.grain_file, args.dir)
    for p in paths:
        print(p)


def cmd_analyze(args, cfg):
    from .perf import format_table, reproduce_table

    rows = reproduce_table()
    print(format_table(rows))
    if args.json:
        Path(args.json).write_text(json.dumps(rows, indent=2))


def cmd_verify(args, cfg):
    from .verify import run_suite

    try:
        kwargs = {"out_dir": args.dir} if args.dir else {}
        results = run_suite(args.suite, **kwargs)
    except KeyError as e:
        raise ConfigError(str(e.args[0])) from e
    for r in results:
        print(r.line(), file=sys.stderr)
    report = [r.to_dict() for r in results]
    text = json.dumps(report, indent=2, default=float)
    if args.json:
        Path(args.json).write_text(text)
    else:
        print(text)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyngrain", description="Dynamic-grained latent diffusion toolkit")
    p.add_argument("--out", help="run directory (env DYNGRAIN_OUT)")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (JSON value)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write synthetic corpus previews")
    s.add_argument("--count", type=int)
    s.add_argument("--preview", type=int, default=16)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("calibrate", help="entropy maps, thresholds and ground-truth grain maps")
    s.add_argument("--ratios", type=float, nargs="+", help="grain ratios, finest first")
    s.add_argument("--per-image", action="store_true")
    s.set_defaults(fn=cmd_calibrate)

    for stage in ("dvae", "grain", "content"):
        s = sub.add_parser(f"train-{stage}", help=f"train the {stage} stage")
        s.add_argument("--steps", type=int)
        s.add_argument("--batch", type=int)
        s.add_argument("--no-resume", action="store_true")
        s.set_defaults(fn=_train(stage))

    s = sub.add_parser("sample", help="generate images and grain heatmaps")
    s.add_argument("-n", type=int, default=4)
    s.add_argument("--class-id", type=int)
    s.add_argument("--grain-source", choices=train.GRAIN_SOURCES, default="model")
    s.add_argument("--grain-file")
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance", type=float)
    s.add_argument("--dir", help="output directory (default <out>/samples)")
    s.set_defaults(fn=cmd_sample)

    s = sub.add_parser("analyze", help="parameter / FLOP table")
    s.add_argument("--json", help="also write the rows as JSON")
    s.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("verify", help="run a verification suite")
    s.add_argument("suite", help="entropy | mixing | partition | grad | identity | tables | schedule | e2e | fast | all")
    s.add_argument("--json", help="write the report here instead of stdout")
    s.add_argument("--dir", help="run directory for the e2e suite")
    s.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        train.configure_threads()
        try:
            cfg = resolve_config(args)
        except (json.JSONDecodeError, OSError, TypeError) as e:
            raise ConfigError(f"cannot load config: {e}") from e
        code = args.fn(args, cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return code or EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
