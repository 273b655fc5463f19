"""End-to-end synthetic experiments and parameter sweeps."""

import csv
import itertools
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from croco.sampling import assign_splits
from croco.synthgen import SceneSpec, generate_scene, split_scene
from croco.trainer import Dataset, TrainConfig, train

log = logging.getLogger(__name__)

ABLATION_COLUMNS = ("gsd_m", "patch_m", "batch_size", "seed", "top1", "top5")
SWEEP_KEYS = ("gsd_m", "patch_m", "batch_size")


def synthetic_dataset(scene, grid=(2, 2), val_tiles=1, test_tiles=0):
    """Generate a scene and cut it into disjoint train/val/test tiles.

    The last ``val_tiles + test_tiles`` sub-tiles in row-major order are
    held out, so evaluation pixels never overlap training pixels.
    """
    rgb, dem = generate_scene(scene)
    parts = split_scene(rgb, dem, *grid)
    keys = [k for k, _, _ in parts]
    n = len(keys)
    if val_tiles + test_tiles >= n:
        raise ValueError("no tiles left for training")
    spec = {}
    for i, k in enumerate(keys):
        if i >= n - test_tiles:
            spec[k] = "test"
        elif i >= n - test_tiles - val_tiles:
            spec[k] = "val"
        else:
            spec[k] = "train"
    return Dataset({k: (r, d) for k, r, d in parts}, assign_splits(keys, spec))


@dataclass
class RunResult:
    top1: float
    top5: float
    final_loss: float


def run_synthetic(scene, cfg, out_dir=None):
    """Train on a synthetic scene and report final validation Top-1/Top-5."""
    data = synthetic_dataset(scene)
    cfg = replace(cfg, eval_every=cfg.steps)
    result = train(data, cfg, out_dir=out_dir)
    last = result.log.rows[-1]
    return RunResult(last.top1, last.top5, last.loss)


def sweep_cells(sweep):
    """Cartesian product of the sweep lists as dicts, in a fixed order."""
    if not sweep or not any(sweep.get(k) for k in SWEEP_KEYS):
        raise ValueError("empty sweep spec")
    unknown = set(sweep) - set(SWEEP_KEYS) - {"seeds"}
    if unknown:
        raise ValueError(f"unknown sweep keys: {sorted(unknown)}")
    keys = [k for k in SWEEP_KEYS if sweep.get(k)]
    return [dict(zip(keys, vals)) for vals in itertools.product(*(sweep[k] for k in keys))]


def ablate(base_cfg, scene, sweep, seeds=(0, 1, 2), out_csv=None, run=run_synthetic):
    """Run one seeded experiment per (sweep cell, seed); failures are recorded, not raised.

    Returns the list of row dicts with the fixed ABLATION_COLUMNS plus an
    ``error`` field (empty on success); failed cells carry NaN scores.
    """
    rows = []
    for cell in sweep_cells(sweep):
        for seed in seeds:
            cfg = replace(base_cfg, seed=seed, **cell)
            sc = replace(scene, seed=seed, gsd_m=min(scene.gsd_m, cfg.gsd_m))
            row = {"gsd_m": cfg.gsd_m, "patch_m": cfg.patch_m, "batch_size": cfg.batch_size, "seed": seed}
            try:
                res = run(sc, cfg)
                row.update(top1=res.top1, top5=res.top5, error="")
            except Exception as exc:  # noqa: BLE001 - a failing cell must not stop the sweep
                log.warning("ablation cell %s seed %d failed: %s", cell, seed, exc)
                row.update(top1=float("nan"), top5=float("nan"), error=str(exc))
            rows.append(row)
    if out_csv is not None:
        write_ablation_csv(rows, out_csv)
    return rows


def write_ablation_csv(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r[c] for c in ABLATION_COLUMNS])
    return path


SUMMARY_COLUMNS = ("gsd_m", "patch_m", "batch_size", "n_seeds", "top1_mean", "top1_std", "top5_mean", "top5_std")


def write_summary_csv(summary, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SUMMARY_COLUMNS)
        for r in summary:
            w.writerow([r[c] for c in SUMMARY_COLUMNS])
    return path


def summarize(rows):
    """Mean and std of top1/top5 per (gsd_m, patch_m, batch_size) cell."""
    groups = {}
    for r in rows:
        groups.setdefault((r["gsd_m"], r["patch_m"], r["batch_size"]), []).append(r)
    out = []
    for key, rs in groups.items():
        t1 = np.array([r["top1"] for r in rs], dtype=float)
        t5 = np.array([r["top5"] for r in rs], dtype=float)
        out.append({
            "gsd_m": key[0], "patch_m": key[1], "batch_size": key[2], "n_seeds": len(rs),
            "top1_mean": float(np.nanmean(t1)), "top1_std": float(np.nanstd(t1)),
            "top5_mean": float(np.nanmean(t5)), "top5_std": float(np.nanstd(t5)),
        })
    return out
