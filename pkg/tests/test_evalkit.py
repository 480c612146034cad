import csv
import io
import json

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from oracles import miou_oracle

from mgm.backbone import EncoderConfig, build_multitask, make_tasks, task_loss
from mgm.evalkit import (
    STD_NOTE,
    MetricError,
    MetricReport,
    aggregate,
    evaluate,
    format_table,
    mabse,
    mad,
    mean_test_loss,
    miou,
    plot_curves,
    to_csv,
    write_reports,
)
from mgm.synthdata import load_split

# --------------------------------------------------------------- mIOU


def test_miou_hand_case():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    assert abs(miou(pred, gt, 2) - (1 / 2 + 2 / 3) / 2) <= 1e-9
    assert abs(miou(pred, gt, 2) - 0.5833) <= 1e-4


def test_miou_perfect():
    gt = np.random.default_rng(0).integers(0, 5, (8, 8))
    assert miou(gt, gt, 5) == 1.0


def test_miou_matches_set_counting():
    r = np.random.default_rng(1)
    for _ in range(100):
        gt = r.integers(0, 4, (8, 8))
        pred = r.integers(0, 4, (8, 8))
        assert miou(pred, gt, 4) == miou_oracle(pred, gt)


@given(st.integers(0, 10 ** 6))
def test_metric_ranges_and_pixel_permutation(seed):
    r = np.random.default_rng(seed)
    gt, pred = r.integers(0, 3, 30), r.integers(0, 3, 30)
    d1, d2 = r.uniform(0.5, 5, 30), r.uniform(0.5, 5, 30)
    n1, n2 = r.normal(size=(30, 3)), r.normal(size=(30, 3))
    n1 /= np.linalg.norm(n1, axis=1, keepdims=True)
    n2 /= np.linalg.norm(n2, axis=1, keepdims=True)
    perm = r.permutation(30)
    m = miou(pred, gt, 3)
    assert 0 <= m <= 1 and m == pytest.approx(miou(pred[perm], gt[perm], 3), abs=1e-12)
    a = mabse(d1, d2)
    assert a >= 0 and a == pytest.approx(mabse(d1[perm], d2[perm]), abs=1e-12)
    g = mad(n1, n2)
    assert 0 <= g <= 180 and g == pytest.approx(mad(n1[perm], n2[perm]), abs=1e-9)


def test_miou_errors():
    with pytest.raises(MetricError):
        miou(np.array([]), np.array([]), 3)
    with pytest.raises(MetricError):
        miou(np.array([0, 5]), np.array([0, 1]), 3)
    with pytest.raises(MetricError):
        miou(np.zeros(3), np.zeros(4), 3)


# ---------------------------------------------------- depth and normals


def test_mabse_cases():
    d = np.random.default_rng(0).uniform(0.5, 5, (4, 4))
    assert mabse(d, d) == 0
    assert mabse(d + 0.5, d) == pytest.approx(0.5)
    e = np.random.default_rng(1).uniform(0.5, 5, (4, 4))
    assert mabse(d, e) == pytest.approx(float(np.mean([abs(a - b) for a, b in zip(d.ravel(), e.ravel())])))
    with pytest.raises(MetricError):
        mabse(d, d[:2])


def test_mad_cases():
    n = np.zeros((3, 3, 3))
    n[..., 2] = 1
    assert mad(n, n) == 0
    o = np.zeros((3, 3, 3))
    o[..., 0] = 1
    assert abs(mad(o, n) - 90.0) <= 1e-6
    r = np.random.default_rng(0)
    a, b = r.normal(size=(50, 3)), r.normal(size=(50, 3))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    want = np.mean([np.degrees(np.arccos(np.clip(np.dot(x, y), -1, 1))) for x, y in zip(a, b)])
    assert abs(mad(a, b) - want) <= 1e-6
    with pytest.raises(MetricError):
        mad(np.zeros((2, 3)), n[0, :2])


# ------------------------------------------------------------ model level


def _model(tasks=("seg", "depth", "normal")):
    torch.manual_seed(0)
    return build_multitask(EncoderConfig((4, 8, 16, 32), 1, 8), make_tasks(tasks))


def test_mean_test_loss_streaming_equals_manual(tiny_dataset):
    test = load_split(tiny_dataset, "test")
    M = _model()
    streamed = mean_test_loss(M, test, "depth", batch_size=5)
    M.eval()
    with torch.no_grad():
        pred = M(torch.from_numpy(test.images))["depth"]
        manual = task_loss(M.tasks[1], pred, torch.from_numpy(test.dense["depth"])).item()
    assert streamed == pytest.approx(manual, rel=1e-5)
    M.train()
    assert mean_test_loss(M, test, "depth", batch_size=5) == streamed
    assert M.training


class _Perfect(torch.nn.Module):
    """Returns the stored depth of each image (a perfect depth predictor)."""

    def __init__(self, split):
        super().__init__()
        self.tasks = make_tasks(["depth"])
        self.lookup = {split.images[i].tobytes(): split.dense["depth"][i] for i in range(len(split))}

    def forward(self, x):
        from mgm.backbone import MultiTaskPrediction

        d = np.stack([self.lookup[img.numpy().tobytes()] for img in x])
        return MultiTaskPrediction({"depth": torch.from_numpy(d)[..., None]})


def test_perfect_depth_has_zero_loss(tiny_dataset):
    test = load_split(tiny_dataset, "test")
    assert mean_test_loss(_Perfect(test), test, "depth", batch_size=7) == 0.0


def test_evaluate_untrained_model_is_finite(tiny_dataset):
    test = load_split(tiny_dataset, "test")
    out = evaluate(_model(("seg", "depth", "normal", "edge")), test)
    assert set(out) == {"seg_miou", "depth_mabse", "normal_mad", "edge_loss"}
    assert all(np.isfinite(v) for v in out.values())


# ------------------------------------------------------------ aggregation


def test_aggregate_statistics_and_format():
    rows = [{"variant": "MGM", "setting": 1.0, "seed": s, "seg_miou": v} for s, v in enumerate([0.1, 0.2, 0.3])]
    (rep,) = aggregate(rows)
    assert rep.mean == pytest.approx(0.2)
    assert rep.std == pytest.approx(0.1)
    assert rep.n_seeds == 3 and rep.arrow == "↑"
    assert MetricReport("MGM", "1.0", "seg_miou", 0.2641, 0.0049, 3).formatted() == "0.264 ± 0.005"
    (one,) = aggregate(rows[:1])
    assert one.std == 0.0 and one.formatted() == "0.100 ± 0.000"


def test_aggregate_rejects_inconsistent_cells():
    base = {"variant": "MT", "setting": 0.5}
    with pytest.raises(MetricError):
        aggregate([dict(base, seed=0, seg_miou=0.1), dict(base, seed=0, seg_miou=0.2)])
    with pytest.raises(MetricError):
        aggregate([dict(base, seed=0, seg_miou=0.1), dict(base, seed=1, depth_mabse=0.2)])
    with pytest.raises(MetricError):
        aggregate([dict(base, seed=0, seg_miou=float("nan"))])


def test_reports_written(tmp_path):
    rows = [{"variant": v, "setting": r, "seed": s, "seg_miou": 0.1 * s + r, "depth_mabse": 1 - r}
            for v in ("MGM", "MGM_r") for r in (0.25, 0.5) for s in (0, 1)]
    reports = aggregate(rows)
    paths = write_reports(reports, tmp_path, "sweep")
    parsed = list(csv.DictReader(io.StringIO((tmp_path / "sweep.csv").read_text(encoding="utf-8"))))
    assert len(parsed) == len(reports) == 8
    assert json.loads((tmp_path / "sweep.json").read_text())
    table = format_table(reports)
    assert STD_NOTE in table and "↓" in table and "↑" in table
    assert to_csv(reports).splitlines()[0].startswith("variant")
    plots = plot_curves(reports, tmp_path / "plots")
    assert {p.name for p in plots} == {"seg_miou.png", "depth_mabse.png"}
    assert all(p.read_bytes()[:4] == b"\x89PNG" for p in plots)
    assert all(p.exists() for p in paths)
