"""Dense-prediction metrics, multi-seed aggregation and plotting."""

import csv
import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import task_loss
from .synthdata import DEPTH_RANGE

# metric name → (task, higher is better)
METRICS = {
    "seg_miou": ("seg", True),
    "depth_mabse": ("depth", False),
    "normal_mad": ("normal", False),
    "edge_loss": ("edge", False),
}
STD_NOTE = "std is the sample standard deviation (n-1) across seeds; 0 for a single seed"


class MetricError(ValueError):
    pass


def miou(pred_labels, gt_labels, num_classes):
    """Mean IoU over the classes that occur in ``gt_labels``."""
    pred = np.asarray(pred_labels).ravel()
    gt = np.asarray(gt_labels).ravel()
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {np.shape(pred_labels)} vs {np.shape(gt_labels)}")
    if gt.size == 0:
        raise MetricError("empty ground truth")
    for name, a in (("pred", pred), ("gt", gt)):
        if a.min() < 0 or a.max() >= num_classes:
            raise MetricError(f"{name} labels outside [0, {num_classes})")
    conf = np.bincount(gt.astype(np.int64) * num_classes + pred.astype(np.int64),
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    present = conf.sum(1) > 0
    return float(np.mean(inter[present] / union[present]))


def mabse(pred_depth, gt_depth):
    pred, gt = np.asarray(pred_depth, np.float64), np.asarray(gt_depth, np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def mad(pred_normals, gt_normals):
    """Mean angular distance in degrees between unit normal fields (…×3)."""
    pred, gt = np.asarray(pred_normals, np.float64), np.asarray(gt_normals, np.float64)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise MetricError(f"expected matching …×3 normals, got {pred.shape} vs {gt.shape}")
    for name, a in (("pred", pred), ("gt", gt)):
        if (np.linalg.norm(a, axis=-1) == 0).any():
            raise MetricError(f"zero-norm vector in {name}; renormalize upstream")
    dot = np.clip((pred * gt).sum(-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dot)).mean())


def _batches(split, batch_size):
    for start in range(0, len(split), batch_size):
        yield split.subset(np.arange(start, min(start + batch_size, len(split))))


@torch.no_grad()
def predict_split(M, split, batch_size=32):
    """Concatenated metric-ready predictions over a split, in split order."""
    was_training = M.training
    M.eval()
    outs = {}
    try:
        for part in _batches(split, batch_size):
            pred = M(torch.from_numpy(part.images)).for_metrics()
            for k, v in pred.items():
                outs.setdefault(k, []).append(v.numpy())
    finally:
        M.train(was_training)
    return {k: np.concatenate(v) for k, v in outs.items()}


@torch.no_grad()
def mean_test_loss(M, split, task, batch_size=32, depth_range=DEPTH_RANGE):
    """Pixel-weighted mean of ``task_loss`` over a split (fixed batch order)."""
    spec = next(t for t in M.tasks if t.name == task)
    was_training = M.training
    M.eval()
    total, count = 0.0, 0
    try:
        for part in _batches(split, batch_size):
            pred = M(torch.from_numpy(part.images))[task]
            target = torch.from_numpy(part.dense[task])
            n = pred.shape[0] * pred.shape[1] * pred.shape[2]
            total += task_loss(spec, pred, target, None, depth_range).item() * n
            count += n
    finally:
        M.train(was_training)
    return total / count


def evaluate(M, split, batch_size=32):
    """Task metrics of M on an annotated split."""
    pred = predict_split(M, split, batch_size)
    out = {}
    for name in M.task_names:
        gt = split.dense[name]
        if name == "seg":
            out["seg_miou"] = miou(pred["seg"].argmax(-1), gt, pred["seg"].shape[-1])
        elif name == "depth":
            out["depth_mabse"] = mabse(pred["depth"][..., 0], gt)
        elif name == "normal":
            out["normal_mad"] = mad(pred["normal"], gt)
        elif name == "edge":
            out["edge_loss"] = mean_test_loss(M, split, "edge", batch_size)
    return out


@dataclass
class MetricReport:
    variant: str
    setting: str
    metric: str
    mean: float
    std: float
    n_seeds: int

    @property
    def arrow(self):
        return by_arrow(self.metric)

    def formatted(self):
        return f"{self.mean:.3f} ± {self.std:.3f}"


def aggregate(results):
    """Reduce per-seed rows to one MetricReport per (variant, setting, metric).

    ``results`` holds dicts with keys variant, setting, seed and metric values.
    """
    cells = {}
    for row in results:
        key = (row["variant"], str(row["setting"]))
        metrics = {k: v for k, v in row.items() if k not in ("variant", "setting", "seed")}
        cell = cells.setdefault(key, {"seeds": set(), "values": {}, "metrics": set(metrics)})
        if row["seed"] in cell["seeds"]:
            raise MetricError(f"duplicate seed {row['seed']} for {key}")
        if set(metrics) != cell["metrics"]:
            raise MetricError(f"inconsistent metrics for {key}: {sorted(metrics)} vs {sorted(cell['metrics'])}")
        cell["seeds"].add(row["seed"])
        for k, v in metrics.items():
            if v is None or not math.isfinite(v):
                raise MetricError(f"non-finite {k} for {key} seed {row['seed']}")
            cell["values"].setdefault(k, []).append(float(v))
    reports = []
    for (variant, setting), cell in cells.items():
        for metric, vals in cell["values"].items():
            arr = np.asarray(vals)
            std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            reports.append(MetricReport(variant, setting, metric, float(arr.mean()), std, len(arr)))
    return reports


def to_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "setting", "metric", "direction", "mean", "std", "n_seeds", "formatted"])
    for r in reports:
        w.writerow([r.variant, r.setting, r.metric, r.arrow, f"{r.mean:.6f}", f"{r.std:.6f}",
                    r.n_seeds, r.formatted()])
    return buf.getvalue()


def format_table(reports):
    """Variant × metric text table in mean ± std form."""
    metrics = sorted({r.metric for r in reports}, key=lambda m: list(METRICS).index(m) if m in METRICS else 99)
    rows = sorted({(r.variant, r.setting) for r in reports}, key=lambda k: (k[1], k[0]))
    by = {(r.variant, r.setting, r.metric): r for r in reports}
    header = ["variant", "setting"] + [f"{m} {by_arrow(m)}" for m in metrics]
    lines = [header]
    for v, s in rows:
        lines.append([v, s] + [by[(v, s, m)].formatted() if (v, s, m) in by else "-" for m in metrics])
    widths = [max(len(str(l[i])) for l in lines) for i in range(len(header))]
    text = "\n".join("  ".join(str(c).ljust(w) for c, w in zip(l, widths)) for l in lines)
    return text + f"\n({STD_NOTE})\n"


def by_arrow(metric):
    return "↑" if METRICS.get(metric, (None, True))[1] else "↓"


def write_reports(reports, out_dir, stem="results"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.csv").write_text(to_csv(reports), encoding="utf-8")
    (out / f"{stem}.json").write_text(json.dumps({"reports": [asdict(r) for r in reports], "note": STD_NOTE},
                                                 indent=2), encoding="utf-8")
    (out / f"{stem}.txt").write_text(format_table(reports), encoding="utf-8")
    return [out / f"{stem}.{ext}" for ext in ("csv", "json", "txt")]


def plot_curves(reports, out_dir, x_label="weak / labeled ratio"):
    """One metric-vs-setting line plot per metric; settings must be numeric."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric in sorted({r.metric for r in reports}):
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        for variant in sorted({r.variant for r in reports}):
            pts = sorted((float(r.setting), r.mean, r.std) for r in reports
                         if r.metric == metric and r.variant == variant)
            if not pts:
                continue
            xs, ms, ss = map(np.asarray, zip(*pts))
            ax.errorbar(xs, ms, yerr=ss, marker="o", capsize=3, label=variant)
        ax.set_xlabel(x_label)
        ax.set_ylabel(f"{metric} {by_arrow(metric)}")
        ax.legend()
        fig.tight_layout()
        path = out / f"{metric}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
