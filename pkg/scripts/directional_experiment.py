"""ST vs MT vs MGM on the 64×64 benchmark (25% labeled data, seg/depth/normal).

Writes per-run directories under <root>/runs/<name>/ and a summary
(summary.json, results.csv/.txt) to --results. Interrupted runs continue
from their newest epoch checkpoint.

    python scripts/directional_experiment.py --root /path/to/workspace
"""

import argparse
import json
import os
import platform
import time
from dataclasses import replace
from pathlib import Path

import torch

from mgm.config import load_config
from mgm.evalkit import write_reports
from mgm.experiments import run_directional
from mgm.synthdata import DatasetConfig, DatasetManifest, make_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", default=os.environ.get("MGM_DATA_ROOT", "workspace"))
    ap.add_argument("--dataset", default="default")
    ap.add_argument("--name", default="directional")
    ap.add_argument("--config", help="optional INI overriding the defaults below")
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--data-ratio", type=float, default=0.25)
    ap.add_argument("--variants", default="ST,MT,MGM")
    ap.add_argument("--results", default=str(Path(__file__).resolve().parent.parent / "results" / "directional"))
    args = ap.parse_args()

    root = Path(args.root)
    ds = root / "datasets" / args.dataset
    if not (ds / "manifest.json").exists():
        make_dataset(DatasetConfig(n_train=2000, n_val=250, n_test=250, resolution=(64, 64), seed=0), ds)
    manifest = DatasetManifest.load(ds)

    cfg = replace(load_config(args.config), epochs=args.epochs, data_ratio=args.data_ratio,
                  seeds=tuple(int(s) for s in args.seeds.split(",")), tasks=("seg", "depth", "normal"))
    t0 = time.time()
    res = run_directional(cfg, manifest, root / "runs" / args.name, tuple(args.variants.split(",")))
    elapsed = time.time() - t0

    out = Path(args.results)
    write_reports(res["reports"], out, "results")
    summary = {
        "dataset": {"n_train": manifest.splits["train"], "n_val": manifest.splits["val"],
                    "n_test": manifest.splits["test"], "resolution": manifest.resolution,
                    "scene_classes": manifest.c_scene},
        "config": cfg.to_ini(),
        "rows": res["rows"],
        "verdict": res["verdict"],
        "train_seconds": res["seconds"],
        "wall_seconds_this_invocation": round(elapsed, 1),
        "machine": {"cpu_threads": os.cpu_count(), "torch": torch.__version__, "python": platform.python_version()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(res["table"])
    print(json.dumps(res["verdict"], indent=2))


if __name__ == "__main__":
    main()
