"""Command-line entry point: ``mgm <command> [flags]``.

Workspace layout under the root (``--root`` or ``$MGM_DATA_ROOT``)::

    datasets/<name>/            generated benchmark
    runs/<run_id>/config.ini    resolved config echo
                 /run.json      seed, dataset, command line
                 /checkpoints/  one checkpoint per epoch
                 /logs.jsonl    metrics
                 /reports/      evaluation output
"""

import argparse
import json
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigValidationError, load_config, parse_ini_text, validate_config
from .evalkit import aggregate, evaluate, format_table, mean_test_loss, plot_curves, write_reports
from .experiments import run_pilot, run_sweep
from .synthdata import DatasetConfig, DatasetManifest, GenerationError, load_split, make_dataset
from .trainer import RunData, Trainer, prepare_data, resume_training, train

ENV_ROOT = "MGM_DATA_ROOT"


class CliError(RuntimeError):
    pass


def workspace_root(args):
    root = args.root or os.environ.get(ENV_ROOT)
    if not root:
        raise CliError(f"no workspace root: pass --root or set {ENV_ROOT}")
    return Path(root)


def dataset_dir(args):
    return workspace_root(args) / "datasets" / args.dataset


def load_manifest(args):
    path = dataset_dir(args)
    if not (path / "manifest.json").exists():
        raise CliError(f"dataset {args.dataset!r} not found under {path.parent}; run `mgm datagen` first")
    return DatasetManifest.load(path)


def _run_dir(args, default_id):
    if args.out:
        return Path(args.out)
    return workspace_root(args) / "runs" / (args.run_id or default_id)


def _fresh_dir(path, force):
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"run directory {path} already exists (use --force or a new --out/--run-id)")
    path.mkdir(parents=True, exist_ok=True)


def _csv(text, cast=str):
    return tuple(cast(t.strip()) for t in text.split(",") if t.strip())


def resolve_config(args):
    """Defaults < --config file < flags."""
    exp = {}
    for flag, key in (("variant", "variant"), ("data_ratio", "data_ratio"), ("weak_ratio", "weak_ratio"),
                      ("epochs", "epochs"), ("batch_size", "batch_size"), ("refine_mode", "refine_mode")):
        value = getattr(args, flag, None)
        if value is not None:
            exp[key] = value
    if getattr(args, "tasks", None):
        exp["tasks"] = _csv(args.tasks)
    if getattr(args, "seed", None) is not None:
        exp["seeds"] = (args.seed,)
    elif getattr(args, "seeds", None):
        exp["seeds"] = _csv(args.seeds, int)
    if getattr(args, "check_scope", False):
        exp["check_scope"] = True
    return load_config(args.config, {"experiment": exp} if exp else None)


def _write_echo(run_dir, cfg, args, extra=None):
    (run_dir / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    info = {"seeds": list(cfg.seeds), "dataset": args.dataset, "config_hash": cfg.digest(),
            "argv": sys.argv[1:], **(extra or {})}
    (run_dir / "run.json").write_text(json.dumps(info, indent=2), encoding="utf-8")


# ------------------------------------------------------------------ commands


def cmd_datagen(args):
    out = dataset_dir(args)
    if out.exists():
        raise CliError(f"dataset {out} already exists")
    cfg = DatasetConfig(n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
                        resolution=(args.resolution, args.resolution), weak_frac=args.weak_frac,
                        seed=args.seed, preview_pngs=args.preview)
    manifest = make_dataset(cfg, out)
    print(f"wrote {len(manifest.records)} samples to {out}")


def cmd_train(args):
    manifest = load_manifest(args)
    if args.resume:
        ckpt = Path(args.resume)
        run_dir = Path(args.out) if args.out else ckpt.parent.parent
        _, meta = load_checkpoint(ckpt)
        cfg, _ = parse_ini_text(meta["config"])
        data = prepare_data(manifest, cfg)
        t, last = resume_training(ckpt, data, run_dir, args.epochs)
        print(f"resumed {ckpt} → epoch {t.epoch}; last checkpoint {last}")
        return
    cfg = resolve_config(args)
    run_dir = _run_dir(args, f"{cfg.variant.replace('/', '_')}_d{cfg.data_ratio:g}_{cfg.digest()[:8]}")
    _fresh_dir(run_dir, args.force)
    _write_echo(run_dir, cfg, args)
    data = prepare_data(manifest, cfg)
    for seed in cfg.seeds:
        sub = run_dir if len(cfg.seeds) == 1 else run_dir / f"seed{seed}"
        log = train(cfg, data, seed, sub, f"{args.run_id or run_dir.name}_s{seed}")
        print(json.dumps({"seed": seed, "checkpoint": log.checkpoint, **log.metrics}))


def cmd_eval(args):
    manifest = load_manifest(args)
    split = load_split(manifest, args.split, weak=False)
    data = RunData(train=split, test=split, n_train_total=len(split), num_classes=manifest.c_scene,
                   resolution=tuple(manifest.resolution))
    t = Trainer.resume(args.checkpoint, data)
    t.close()
    metrics = evaluate(t.M, split)
    metrics.update({f"{name}_mloss": mean_test_loss(t.M, split, name) for name in t.M.task_names})
    out = {"checkpoint": str(args.checkpoint), "split": args.split, "variant": t.cfg.variant,
           "seed": t.seed, "epoch": t.epoch, **metrics}
    rep = Path(args.checkpoint).parent.parent / "reports"
    if rep.parent.joinpath("config.ini").exists():
        rep.mkdir(exist_ok=True)
        (rep / f"eval_{args.split}_{Path(args.checkpoint).stem}.json").write_text(json.dumps(out, indent=2))
    print(json.dumps(out))


def cmd_sweep(args):
    cfg = resolve_config(args)
    ratios = [r / 100.0 for r in _csv(args.ratios, float)]
    run_dir = _run_dir(args, f"sweep_d{cfg.data_ratio:g}_{cfg.digest()[:8]}")
    _fresh_dir(run_dir, args.force)
    _write_echo(run_dir, cfg, args, {"ratios": ratios})
    variants = _csv(args.variants) if args.variants else None
    res = run_sweep(cfg, load_manifest(args), ratios, run_dir, **({"variants": variants} if variants else {}))
    print(res["text"], end="")


def cmd_pilot(args):
    cfg = resolve_config(args)
    run_dir = _run_dir(args, f"pilot_d{cfg.data_ratio:g}_{cfg.digest()[:8]}")
    _fresh_dir(run_dir, args.force)
    _write_echo(run_dir, cfg, args)
    res = run_pilot(cfg, load_manifest(args), run_dir, task=args.task)
    print(res["text"], end="")


def _collect_metrics(paths, by):
    rows = []
    other = {"data_ratio": "weak_ratio", "weak_ratio": "data_ratio"}[by]
    for p in paths:
        p = Path(p)
        files = [p] if p.is_file() else sorted(p.rglob("metrics_seed*.json"))
        for f in files:
            row = json.loads(f.read_text())
            row["setting"] = row.pop(by)
            row.pop(other, None)
            rows.append(row)
    if not rows:
        raise CliError("no metrics_seed*.json files found")
    return rows


def cmd_report(args, plots=False):
    reports = aggregate(_collect_metrics(args.results, args.by))
    out = Path(args.out)
    write_reports(reports, out, "report")
    if plots:
        for p in plot_curves(reports, out, x_label=args.x_label):
            print(f"plot: {p}")
    print(format_table(reports), end="")


def cmd_validate(args):
    cfg = validate_config(args.config)
    print(cfg.to_ini(), end="")


# ------------------------------------------------------------------ parser


def _common(p, data=True):
    p.add_argument("--root", help=f"workspace root (default ${ENV_ROOT})")
    if data:
        p.add_argument("--dataset", default="default", help="dataset name under <root>/datasets")


def _exp_flags(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--variant")
    p.add_argument("--data-ratio", type=float)
    p.add_argument("--weak-ratio", type=float)
    p.add_argument("--tasks", help="comma-separated task list")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--refine-mode", choices=("em", "direct"))
    p.add_argument("--check-scope", action="store_true", help="verify per-event update scopes")
    p.add_argument("--out", help="run directory (default <root>/runs/<run_id>)")
    p.add_argument("--run-id")
    p.add_argument("--force", action="store_true", help="reuse an existing run directory")


def build_parser():
    ap = argparse.ArgumentParser(prog="mgm", description="Multi-task learning with joint generative modeling")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate the synthetic benchmark")
    _common(p)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=250)
    p.add_argument("--n-test", type=int, default=250)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--weak-frac", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preview", type=int, default=0, help="number of preview PNGs")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("train", help="train one variant")
    _common(p)
    _exp_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="weak-ratio sweep")
    _common(p)
    _exp_flags(p)
    p.add_argument("--ratios", default="25,50,75,100,125", help="weak ratios in percent")
    p.add_argument("--variants", help="comma-separated (default MGM,MGM_/j,MGM_r)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("pilot", help="ST vs offline-GAN-augmented ST")
    _common(p)
    _exp_flags(p)
    p.add_argument("--task", default="seg")
    p.set_defaults(func=cmd_pilot)

    for name, plots in (("plot", True), ("report", False)):
        p = sub.add_parser(name, help="aggregate per-seed metrics" + (" and plot curves" if plots else ""))
        p.add_argument("results", nargs="+", help="run directories or metrics files")
        p.add_argument("--out", required=True)
        p.add_argument("--by", default="data_ratio", choices=("data_ratio", "weak_ratio"),
                       help="setting that distinguishes table rows / the plot x-axis")
        if plots:
            p.add_argument("--x-label", default="weak / labeled ratio")
        p.set_defaults(func=lambda a, _plots=plots: cmd_report(a, _plots))

    p = sub.add_parser("validate", help="validate a config file and print the resolved config")
    p.add_argument("config", nargs="?")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except ConfigValidationError as e:
        for err in e.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 1
    except (CliError, CheckpointError, GenerationError, FileNotFoundError, ValueError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        if os.environ.get("MGM_DEBUG"):
            raise
        print(f"error: {type(e).__name__}: {e} (set MGM_DEBUG=1 for a traceback)", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
