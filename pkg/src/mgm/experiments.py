"""Pilot study (offline-GAN augmentation with an oracle annotator), the
weak-ratio sweep and the ST/MT/MGM directional comparison."""

import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .evalkit import aggregate, format_table, mean_test_loss, plot_curves, write_reports
from .generation import pure_noise_latent
from .synthdata import ArraySplit
from .trainer import WeakDataUnavailable, pretrain_gan, prepare_data, torch_gen, train, train_or_resume

# Tiny-Taskonomy semantic segmentation mLoss of the original pilot
PILOT_REFERENCE = {"ST": 0.111, "ST_G": 0.148}


@torch.no_grad()
def oracle_annotate(oracle, images, batch_size=32):
    """Dense pseudo ground truth for synthesized images from a trained network."""
    oracle.eval()
    dense = {}
    for start in range(0, len(images), batch_size):
        pred = oracle(torch.from_numpy(images[start:start + batch_size])).outputs
        for name, y in pred.items():
            if name == "seg":
                y = y.argmax(-1)
            elif name == "normal":
                y = F.normalize(y, dim=-1, eps=1e-8)
            elif name == "edge":
                y = torch.sigmoid(y)[..., 0]
            elif name == "depth":
                y = y[..., 0]
            dense.setdefault(name, []).append(y.numpy())
    oracle.train()
    return {k: np.concatenate(v) for k, v in dense.items()}


@torch.no_grad()
def synthesize_images(G, n, num_classes, z_dim, seed, batch_size=32):
    classes = np.arange(n) % num_classes
    images = []
    for b, start in enumerate(range(0, n, batch_size)):
        c = torch.from_numpy(classes[start:start + batch_size])
        if len(c) < 2:  # conditional batch norm needs two samples
            c = torch.cat([c, c])
        latent = pure_noise_latent(len(c), z_dim, c, torch_gen(seed, -1, b, "latent_syn"))
        images.append(G(latent.z, latent.classes).clamp(-1, 1).numpy()[:len(classes[start:start + batch_size])])
    return np.concatenate(images).astype(np.float32), classes.astype(np.int64)


def run_pilot(cfg, manifest, out_dir, task="seg"):
    """ST vs ST_G (real + oracle-labeled offline-GAN images) on one task."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = replace(cfg, tasks=(task,), variant="ST")
    data = prepare_data(manifest, base)
    full_data = prepare_data(manifest, replace(base, data_ratio=1.0))
    rows, details = [], []
    oracle = train(replace(base, data_ratio=1.0), full_data, base.seeds[0], out / "oracle", "oracle",
                   evaluate_test=False).model
    for seed in base.seeds:
        st = train(base, data, seed, out / f"ST_s{seed}", f"ST_s{seed}")
        steps = base.generation.pretrain_steps or base.epochs * max(1, len(data.train) // min(base.batch_size,
                                                                                                len(data.train)))
        G = pretrain_gan(base, data.train.images, data.train.scene_class, data.num_classes, data.resolution,
                         seed, steps)
        n_syn = data.weak_count(base)
        images, classes = synthesize_images(G, n_syn, data.num_classes, base.generation.z_dim, seed)
        synthetic = ArraySplit(images, classes, oracle_annotate(oracle, images),
                               [f"syn-{i:06d}" for i in range(n_syn)])
        stg = train(replace(base, variant="ST_G"), replace(data, synthetic=synthetic), seed,
                    out / f"ST_G_s{seed}", f"ST_G_s{seed}")
        for name, log in (("ST", st), ("ST_G", stg)):
            loss = mean_test_loss(log.model, data.test, task)
            rows.append({"variant": name, "setting": base.data_ratio, "seed": seed, f"{task}_mloss": loss})
            details.append({"variant": name, "seed": seed, "mloss": loss, **log.metrics})
    reports = aggregate(rows)
    write_reports(reports, out, "pilot")
    by = {r.variant: r for r in reports}
    gap = by["ST_G"].mean - by["ST"].mean
    lines = [f"Pilot: single-task {task}, real data ratio {base.data_ratio}, "
             f"{len(base.seeds)} seed(s), {n_syn} synthesized images per run",
             "",
             f"{'model':8s}{'reference mLoss':>18s}{'local mLoss ↓':>22s}",
             *(f"{v:8s}{PILOT_REFERENCE[v]:>18.3f}{by[v].formatted():>22s}" for v in ("ST", "ST_G")),
             "",
             "reference = Tiny-Taskonomy values of the original pilot; local = this synthetic benchmark",
             f"local ST_G - ST = {gap:+.4f} ({'ST_G worse' if gap > 0 else 'ST_G better or equal'}); "
             f"reference gap = {PILOT_REFERENCE['ST_G'] - PILOT_REFERENCE['ST']:+.3f}"]
    text = "\n".join(lines) + "\n"
    (out / "pilot_report.txt").write_text(text, encoding="utf-8")
    (out / "pilot_runs.json").write_text(json.dumps(details, indent=2), encoding="utf-8")
    return {"text": text, "reports": reports, "gap": gap, "details": details}


SWEEP_VARIANTS = ("MGM", "MGM_/j", "MGM_r")


def run_sweep(cfg, manifest, ratios, out_dir, variants=SWEEP_VARIANTS):
    """Metric-vs-weak-ratio curves; MGM_r beyond the available weak real data
    is recorded as an unavailable point."""
    for r in ratios:
        if not 0 < r <= 1.5:
            raise ValueError(f"ratio {r} outside (0, 1.5]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare_data(manifest, cfg)
    rows, unavailable = [], []
    generators = {}
    for ratio in ratios:
        for variant in variants:
            run_cfg = replace(cfg, variant=variant, weak_ratio=ratio)
            for seed in cfg.seeds:
                run_id = f"{variant.replace('/', '_')}_w{ratio:g}_s{seed}"
                frozen = None
                if variant == "MGM_/j":
                    if seed not in generators:
                        gs = run_cfg.generation
                        bs = min(run_cfg.batch_size, len(data.train))
                        steps = gs.pretrain_steps or run_cfg.epochs * max(1, len(data.train) // bs)
                        generators[seed] = pretrain_gan(run_cfg, data.train.images, data.train.scene_class,
                                                        data.num_classes, data.resolution, seed, steps)
                    frozen = generators[seed]
                try:
                    log = train(run_cfg, data, seed, out / run_id, run_id, frozen_generator=frozen)
                except WeakDataUnavailable as e:
                    unavailable.append({"variant": variant, "ratio": ratio, "seed": seed, "reason": str(e)})
                    continue
                rows.append({"variant": variant, "setting": ratio, "seed": seed, **log.metrics})
    reports = aggregate(rows) if rows else []
    write_reports(reports, out, "sweep")
    plots = plot_curves(reports, out / "plots") if reports else []
    summary = {"ratios": list(ratios), "variants": list(variants), "seeds": list(cfg.seeds),
               "unavailable": unavailable, "plots": [str(p) for p in plots]}
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    text = format_table(reports) + "".join(
        f"unavailable: {u['variant']} at ratio {u['ratio']:g} (seed {u['seed']})\n" for u in unavailable)
    (out / "sweep_report.txt").write_text(text, encoding="utf-8")
    return {"reports": reports, "unavailable": unavailable, "plots": plots, "text": text}


# metric → (higher is better)
DIRECTIONAL_METRICS = {"seg_miou": True, "depth_mabse": False, "normal_mad": False}


def directional_verdict(rows):
    """Check the desk-scale trend on per-seed rows of ST (seg), MT and MGM.

    (a) mean MGM seg mIOU >= mean ST seg mIOU;
    (b) on at least 2 of 3 metrics MGM is no worse than MT by more than one
        pooled std, sqrt((s_MGM^2 + s_MT^2) / 2).
    """
    def values(variant, metric):
        return np.array([r[metric] for r in rows if r["variant"] == variant and metric in r], dtype=np.float64)

    def stats(v):
        return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0

    st, _ = stats(values("ST", "seg_miou"))
    mgm_seg, _ = stats(values("MGM", "seg_miou"))
    per_metric = {}
    for metric, higher in DIRECTIONAL_METRICS.items():
        (m_mgm, s_mgm), (m_mt, s_mt) = stats(values("MGM", metric)), stats(values("MT", metric))
        pooled = float(np.sqrt((s_mgm ** 2 + s_mt ** 2) / 2))
        ok = m_mgm >= m_mt - pooled if higher else m_mgm <= m_mt + pooled
        per_metric[metric] = {"MGM": m_mgm, "MT": m_mt, "pooled_std": pooled, "ok": bool(ok)}
    wins = sum(v["ok"] for v in per_metric.values())
    return {"seg_vs_st": {"MGM": mgm_seg, "ST": st, "ok": bool(mgm_seg >= st)},
            "vs_mt": per_metric, "vs_mt_ok_count": wins,
            "pass": bool(mgm_seg >= st and wins >= 2)}


def run_directional(cfg, manifest, out_dir, variants=("ST", "MT", "MGM"), st_task="seg", progress=print):
    """ST (single task), MT and MGM over ``cfg.seeds``; resumable per run."""
    out = Path(out_dir)
    rows, timings = [], {}
    for variant in variants:
        run_cfg = replace(cfg, variant=variant, tasks=(st_task,) if variant == "ST" else cfg.tasks)
        data = prepare_data(manifest, run_cfg)
        for seed in cfg.seeds:
            run_dir = out / f"{variant.replace('/', '_')}_s{seed}"
            metrics_file = run_dir / "reports" / f"metrics_seed{seed}.json"
            if not metrics_file.exists():
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "config.ini").write_text(run_cfg.to_ini(), encoding="utf-8")
                train_or_resume(run_cfg, data, seed, run_dir, run_dir.name)
            row = json.loads(metrics_file.read_text())
            rows.append({"variant": variant, "setting": row["data_ratio"], "seed": seed,
                         **{k: v for k, v in row.items() if k in DIRECTIONAL_METRICS}})
            timing = run_dir / "timing.jsonl"
            if timing.exists():
                timings[run_dir.name] = sum(json.loads(l)["seconds"] for l in timing.read_text().splitlines())
            progress(json.dumps(rows[-1]))
    reports = aggregate(rows)
    return {"rows": rows, "reports": reports, "verdict": directional_verdict(rows), "seconds": timings,
            "table": format_table(reports)}
