"""Matplotlib figures for run reports (Agg backend, files only)."""
from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_META = {"Software": None}


def read_log(path) -> List[dict]:
    with Path(path).open() as fh:
        return [json.loads(ln) for ln in fh if ln.strip()]


def _smooth(values, window=25):
    out, acc = [], 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


def plot_training(log_path, out_png) -> Path:
    """Weighted loss components and the total against optimizer step."""
    recs = read_log(log_path)
    steps = [r["step"] for r in recs]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, _smooth([r["total"] for r in recs]), color="black", lw=1.5, label="total")
    for name in recs[0]["components"] if recs else []:
        vals = [r["weights"][name] * r["components"][name] for r in recs]
        ax.plot(steps, _smooth(vals), lw=0.9, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("weighted loss (moving average)")
    ax.set_yscale("log")
    ax.set_title(Path(log_path).name)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=100, metadata=_META)
    plt.close(fig)
    return out_png


def plot_ablation(rows: List[dict], out_png, axis: str = "") -> Path:
    """Per-seed novel mAP as dots, the median as a bar, one group per (variant, shot)."""
    seeds: Dict[tuple, List[float]] = defaultdict(list)
    medians: Dict[tuple, float] = {}
    for r in rows:
        key = (r["variant"], str(r["shot"]))
        val = r["novel_map"]
        if val in (None, ""):
            continue
        if str(r["seed"]) == "median":
            medians[key] = float(val)
        else:
            seeds[key].append(float(val))
    keys = list(medians)
    fig, ax = plt.subplots(figsize=(1.2 * len(keys) + 2, 3.5))
    xs = range(len(keys))
    ax.bar(xs, [medians[k] for k in keys], color="#8fb3d9", label="median")
    for x, k in zip(xs, keys):
        ax.scatter([x] * len(seeds[k]), seeds[k], color="black", s=12, zorder=3)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([f"{v}\nK={s}" for v, s in keys], fontsize=8)
    ax.set_ylabel("novel mAP@0.5")
    ax.set_title(f"ablation: {axis}" if axis else "ablation")
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=100, metadata=_META)
    plt.close(fig)
    return out_png


def plot_per_class(reports: List[dict], out_png) -> Path:
    """Per-class AP for each evaluation report, novel classes marked."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    classes = sorted({c for rep in reports for c in rep["per_class_ap"]})
    width = 0.8 / max(len(reports), 1)
    for i, rep in enumerate(reports):
        vals = [rep["per_class_ap"].get(c) or 0.0 for c in classes]
        ax.bar([j + i * width for j in range(len(classes))], vals, width,
               label=f"K={rep['shot']} seed={rep['seed']}")
    novel = set(reports[0]["novel_classes"]) if reports else set()
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(classes))])
    ax.set_xticklabels([c + ("*" if c in novel else "") for c in classes], rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("AP@0.5 (* novel)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=100, metadata=_META)
    plt.close(fig)
    return out_png
