"""Command-line entry point: ``beal generate | train | eval | ablate``.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import ConfigError, ExperimentConfig, load_config, load_experiment_data, save_config
from .synthdata import DatasetConfig, load_dataset, TARGET

log = logging.getLogger("beal")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


def _parse_set(items: list[str] | None) -> dict:
    overrides = {}
    for item in items or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return overrides


def _experiment(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = dict(extra or {})
    overrides.update(_parse_set(getattr(args, "set", None)))
    if getattr(args, "out", None):
        overrides["output_dir"] = str(args.out)
    try:
        return load_config(getattr(args, "config", None), overrides)
    except ConfigError as exc:
        raise ValidationError(str(exc)) from None


# --------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    from .synthdata import generate_dataset

    overrides = {}
    for flag, key in (("n_source", "n_source"), ("n_target", "n_target"), ("n_target_test", "n_target_test"),
                      ("size", "size"), ("seed", "seed")):
        v = getattr(args, flag)
        if v is not None:
            overrides[f"data.synth.{key}"] = v
    set_keys = _parse_set(args.set)
    if args.config is None and args.n_target_test is None and "data.synth.n_target_test" not in set_keys:
        overrides["data.synth.n_target_test"] = 0  # only what the flags ask for
    exp = _experiment(argparse.Namespace(config=args.config, set=args.set), overrides)
    cfg: DatasetConfig = exp.data.synth
    out = Path(args.out) if args.out else exp.output_path() / "data"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ValidationError(f"output directory {out} is not empty; pass --force to overwrite")
    try:
        cfg.validate()
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    generate_dataset(cfg, out, force=args.force)
    n = cfg.n_source + cfg.n_target + cfg.n_target_test
    print(f"wrote {n} samples to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    from .trainer import fit

    overrides = {}
    if args.epochs is not None:
        overrides["train.epochs"] = args.epochs
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.lam is not None:
        overrides["train.lam"] = args.lam
    exp = _experiment(args, overrides)
    if args.resume and not Path(args.resume).is_file():
        raise ValidationError(f"checkpoint not found: {args.resume}")
    out = exp.output_path()
    out.mkdir(parents=True, exist_ok=True)
    save_config(exp, out / "config.yaml")
    source, target, test = load_experiment_data(exp, out)
    state, records = fit(
        source, target, exp.train, exp.segnet, out,
        eval_samples=test, resume=args.resume,
        disc_configs=(exp.boundary_disc, exp.entropy_disc),
    )
    evals = [r for r in records if r["kind"] == "eval"]
    tail = f" target DI_cup {evals[-1]['di_cup']:.4f} DI_disc {evals[-1]['di_disc']:.4f}" if evals else ""
    print(f"trained to epoch {state.epoch} ({state.iteration} iterations);{tail}")
    print(f"checkpoint: {out / 'checkpoints' / 'last.pt'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    from .evalkit import emit_visuals, evaluate, predict, write_reports
    from .preprocess import crop_roi
    from .trainer import load_segnet

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    data = Path(args.dataset)
    if not (data / "manifest.jsonl").is_file():
        raise ValidationError(f"no dataset manifest under {data}")
    if not 0 < args.threshold < 1:
        raise ValidationError("--threshold must lie in (0, 1)")
    seg = load_segnet(ckpt)
    crop = seg.config.crop_size
    samples = load_dataset(data, args.domain, args.split)
    if not samples:
        raise ValidationError(f"no samples with domain={args.domain} split={args.split} in {data}")
    report = evaluate(seg, samples, crop, args.threshold, args.tag)
    out = Path(args.out) if args.out else ckpt.parent.parent / "eval"
    table, records = write_reports([report], out, "eval")
    if args.emit_visuals:
        cropped = [crop_roi(s, crop) for s in samples[: args.max_visuals]]
        for s, (b, p) in zip(cropped, predict(seg, [s.image for s in cropped])):
            emit_visuals(s, b, p, out / "visuals", args.threshold)
    print(f"DI_cup {report.di_cup:.4f}  DI_disc {report.di_disc:.4f}  (n={len(report.per_sample)})")
    print(f"report: {table}  records: {records}")
    return EXIT_OK


# --------------------------------------------------------------------------
# ablate


def cmd_ablate(args) -> int:
    from .evalkit import CONFIG_TAGS, run_ablation

    exp = _experiment(args)
    only = None
    if args.only:
        only = [t.strip() for t in args.only.split(",") if t.strip()]
        bad = [t for t in only if t not in CONFIG_TAGS]
        if bad:
            raise ValidationError(f"unknown ablation tag(s): {', '.join(bad)}")
    out = exp.output_path()
    out.mkdir(parents=True, exist_ok=True)
    save_config(exp, out / "config.yaml")
    if args.workers < 1:
        raise ValidationError("--workers must be >= 1")
    reports = run_ablation(exp, out, only, args.workers)
    print(f"{'config_tag':<12} {'DI_cup':>8} {'DI_disc':>8}")
    for r in reports:
        print(f"{r.config_tag:<12} {r.di_cup:8.4f} {r.di_disc:8.4f}")
    print(f"table: {out / 'ablation.tsv'}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help="experiment YAML config"):
        sp.add_argument("--config", type=Path, help=config_help)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (dotted path, YAML value); repeatable")

    g = sub.add_parser("generate", help="write a synthetic source/target dataset")
    common(g)
    g.add_argument("--n-source", dest="n_source", type=int, help="number of source samples")
    g.add_argument("--n-target", dest="n_target", type=int, help="number of target training samples")
    g.add_argument("--n-target-test", dest="n_target_test", type=int, help="number of target test samples (default 0 without --config)")
    g.add_argument("--size", type=int, help="image side in pixels (>= 64)")
    g.add_argument("--seed", type=int, help="dataset seed")
    g.add_argument("--out", type=Path, help="dataset directory (default: <output_dir>/data)")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train segmentation network and discriminators")
    common(t)
    t.add_argument("--out", type=Path, help="run directory (overrides output_dir)")
    t.add_argument("--epochs", type=int, help="total epochs (overrides train.epochs)")
    t.add_argument("--seed", type=int, help="training seed (overrides train.seed)")
    t.add_argument("--lam", type=float, help="adversarial weight (overrides train.lam)")
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Dice of a checkpoint on a labelled dataset")
    e.add_argument("--checkpoint", required=True, type=Path, help="training checkpoint (.pt)")
    e.add_argument("--dataset", required=True, type=Path, help="dataset directory with manifest.jsonl")
    e.add_argument("--domain", default=TARGET, choices=["source", "target"], help="domain to evaluate")
    e.add_argument("--split", default=None, help="split to evaluate (train/test; default all)")
    e.add_argument("--threshold", type=float, default=0.5, help="binarization threshold")
    e.add_argument("--tag", default="beal", help="config_tag recorded in the report")
    e.add_argument("--out", type=Path, help="report directory (default: <run>/eval)")
    e.add_argument("--emit-visuals", dest="emit_visuals", action="store_true",
                   help="write contour, entropy and boundary PNGs per sample")
    e.add_argument("--max-visuals", dest="max_visuals", type=int, default=4, help="samples to draw")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate every ablation configuration")
    common(a)
    a.add_argument("--out", type=Path, help="ablation directory (overrides output_dir)")
    a.add_argument("--only", help="comma-separated subset of config tags")
    a.add_argument("--workers", type=int, default=1, help="train rows in this many processes")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
