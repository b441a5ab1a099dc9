"""Run configuration and the desk-scale experiment harness.

A :class:`RunConfig` is one JSON document with ``data``, ``model``,
``train`` and ``eval`` sections. The harness turns it into a synthetic
dataset, a base checkpoint, per-(shot, seed) fine-tuned checkpoints and
evaluation reports, and runs the ablation axes over named variants.
Base checkpoints are cached in the run directory under a digest of the
config fields that affect them.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

from . import config as config_util
from .datasets import (DEFAULT_CATALOGUE, Dataset, DatasetSpec, SplitSpec, filter_classes, generate_synthetic,
                       make_split, sample_k_shot)
from .detector import Checkpoint, DetectorConfig, build_detector, fine_tune, train_base
from .errors import ConfigError, ProtocolError
from .evaluation import EvalReport, evaluate

log = logging.getLogger(__name__)


@dataclass
class DataSection:
    image_size: int = 128
    classes: List[str] = field(default_factory=lambda: list(DEFAULT_CATALOGUE))
    objects_per_image: List[int] = field(default_factory=lambda: [1, 4])
    scale_range: List[float] = field(default_factory=lambda: [8.0, 64.0])
    clutter: float = 0.5
    pool_images: int = 600  # base training uses the pool images free of novel instances
    test_images: int = 100
    seed: int = 0
    test_seed: int = 1
    split: str = "synthetic"
    num_novel: int = 2

    def spec(self, num_images: int, seed: int) -> DatasetSpec:
        return DatasetSpec(self.image_size, list(self.classes), list(self.objects_per_image),
                           list(self.scale_range), self.clutter, num_images, seed)


@dataclass
class TrainSection:
    shots: List[int] = field(default_factory=lambda: [10])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    base_seed: int = 0
    freeze_backbone: bool = True

    def __post_init__(self):
        if not self.freeze_backbone:
            raise ConfigError("freeze_backbone is protocol-locked to true for fine-tuning")
        if not self.shots or not self.seeds:
            raise ConfigError("train.shots and train.seeds must be non-empty")


@dataclass
class EvalSection:
    score_thresh: float = 0.01
    batch_size: int = 8


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: DetectorConfig = field(default_factory=DetectorConfig)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.model.image_size != self.data.image_size:
            raise ConfigError(f"model.image_size {self.model.image_size} != data.image_size {self.data.image_size}")

    @classmethod
    def from_dict(cls, d):
        return config_util.from_dict(cls, d)

    def to_dict(self):
        return config_util.to_dict(self)

    def override(self, patch: dict) -> "RunConfig":
        return RunConfig.from_dict(config_util.merge(self.to_dict(), patch))


def preset(name: str) -> dict:
    """Bundled config document (``desk``: the calibrated CPU experiment)."""
    try:
        text = resources.files("fsod.presets").joinpath(f"{name}.json").read_text()
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    return json.loads(text)


def load_config(path=None, preset_name: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Preset, then file, then overrides; later layers win."""
    doc = preset(preset_name) if preset_name else {}
    if path is not None:
        try:
            doc = config_util.merge(doc, json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if overrides:
        doc = config_util.merge(doc, overrides)
    return RunConfig.from_dict(doc)


def digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# -------------------------------------------------------------------- data

@dataclass
class DeskData:
    split: SplitSpec
    pool: Dataset
    base_train: Dataset
    test: Dataset


def build_data(cfg: RunConfig) -> DeskData:
    d = cfg.data
    pool_spec, test_spec = d.spec(d.pool_images, d.seed), d.spec(d.test_images, d.test_seed)
    split = make_split(d.split, d.classes, d.num_novel)
    pool, test = generate_synthetic(pool_spec), generate_synthetic(test_spec)
    return DeskData(split, pool, filter_classes(pool, split.base), test)


def shot_set(data: DeskData, cfg: RunConfig, k: int, seed: int) -> Dataset:
    """K-shot fine-tuning set: novel only or balanced over base + novel."""
    classes = list(data.split.novel)
    if cfg.model.finetune_mode == "balanced":
        classes = list(data.split.base) + classes
    return sample_k_shot(data.pool, classes, k, seed)


# -------------------------------------------------------------- protocols

@contextmanager
def run_lock(run_dir):
    """Exclusive lock file; one training process per run directory."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / ".lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ProtocolError(f"{run_dir} is locked by another run (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        yield
    finally:
        os.close(fd)
        path.unlink(missing_ok=True)


def base_key(cfg: RunConfig) -> str:
    """Digest of everything that shapes the base checkpoint."""
    m = cfg.model.to_dict()
    m.pop("finetune")
    m.pop("finetune_mode")
    d = config_util.to_dict(cfg.data)
    d.pop("test_images")
    d.pop("test_seed")
    return digest({"model": m, "data": d, "seed": cfg.train.base_seed})[:12]


def param_count(cfg: DetectorConfig, num_base: int) -> int:
    det = build_detector(cfg, [f"c{i}" for i in range(num_base)])
    return sum(p.numel() for p in det.parameters())


def get_base(cfg: RunConfig, data: DeskData, run_dir=None) -> Checkpoint:
    """Train (or load the cached) base checkpoint for ``cfg``."""
    path = Path(run_dir) / f"base-{base_key(cfg)}.ckpt" if run_dir is not None else None
    if path is not None and path.exists():
        log.info("reusing base checkpoint %s", path)
        return Checkpoint.load(path)
    t0 = time.process_time()
    log_path = path.with_suffix(".log.jsonl") if path is not None else None
    ckpt = train_base(data.base_train, cfg.model, data.split.base, seed=cfg.train.base_seed, log_path=log_path)
    ckpt.meta.update(run_config=cfg.to_dict(), base_images=len(data.base_train))
    if path is not None:
        ckpt.save(path)
        record_timing(run_dir, path.stem, time.process_time() - t0)
    return ckpt


def record_timing(run_dir, key: str, cpu_seconds: float) -> None:
    """CPU seconds per job in ``timing.json``, kept apart from byte-stable artifacts."""
    path = Path(run_dir) / "timing.json"
    doc = json.loads(path.read_text()) if path.exists() else {}
    doc[key] = round(cpu_seconds, 1)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))


def _timing(run_dir, key: str) -> Optional[float]:
    path = Path(run_dir) / "timing.json"
    return json.loads(path.read_text()).get(key) if path.exists() else None


def run_shots(cfg: RunConfig, data: DeskData, base: Checkpoint, run_dir=None) -> List[dict]:
    """Fine-tune and evaluate every (shot, seed); one row each.

    With a ``run_dir``, finished runs (report and checkpoint for the same
    config) are loaded instead of repeated.
    """
    rows = []
    for k in cfg.train.shots:
        for seed in cfg.train.seeds:
            name = f"k{k}-s{seed}"
            if run_dir is not None:
                report_path = Path(run_dir) / f"report-{name}.json"
                ckpt_path = Path(run_dir) / f"finetuned-{name}.ckpt"
                if report_path.exists() and ckpt_path.exists():
                    report = EvalReport.from_json(report_path.read_text())
                    if report.config == cfg.to_dict():
                        log.info("reusing %s", report_path)
                        rows.append({"shot": k, "seed": seed, "novel_map": report.novel_map,
                                     "base_map": report.base_map, "cpu_seconds": _timing(run_dir, f"finetune-{name}"),
                                     "report": report, "checkpoint": Checkpoint.load(ckpt_path)})
                        continue
            t0 = time.process_time()
            shots = shot_set(data, cfg, k, seed)
            log_path = Path(run_dir) / f"finetune-{name}.log.jsonl" if run_dir is not None else None
            ft = fine_tune(base, shots, data.split.novel, seed=seed, cfg=cfg.model, log_path=log_path)
            det = ft.to_detector()
            report = evaluate(det, data.test, data.split, shot=k, seed=seed,
                              score_thresh=cfg.eval.score_thresh, config=cfg.to_dict())
            secs = round(time.process_time() - t0, 1)
            if run_dir is not None:
                ft.save(ckpt_path)
                report_path.write_text(report.to_json())
                record_timing(run_dir, f"finetune-{name}", secs)
            rows.append({"shot": k, "seed": seed, "novel_map": report.novel_map, "base_map": report.base_map,
                         "cpu_seconds": secs, "report": report, "checkpoint": ft})
    return rows


# -------------------------------------------------------------- ablations

ABLATION_AXES: Dict[str, Dict[str, dict]] = {
    "neck": {"cfpan": {}, "fpn": {"neck": {"cbam": False, "fusion": "static"}}},
    "cbam": {"on": {}, "off": {"neck": {"cbam": False}}},
    "stages": {str(n): {"rpn": {"num_stages": n}} for n in (1, 2, 3, 4)},
    "loss": {"gcl": {}, "standard": {"gcl": {"mode": "standard", "num_placeholders": 0,
                                             "placeholder_weight": 0.0, "regularization_weight": 0.0}}},
}

CSV_FIELDS = ["axis", "variant", "shot", "seed", "novel_map", "base_map", "params"]


def variant_config(cfg: RunConfig, axis: str, variant: str) -> RunConfig:
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; options: {', '.join(ABLATION_AXES)}")
    if variant not in ABLATION_AXES[axis]:
        raise ConfigError(f"unknown {axis} variant {variant!r}; options: {', '.join(ABLATION_AXES[axis])}")
    patch = ABLATION_AXES[axis][variant]
    if axis == "stages":
        # per-stage lists follow the stage count
        rpn = dict(patch["rpn"], dilations=None, reg_weights=None, iou_thresholds=None)
        patch = {"rpn": rpn}
    return cfg.override({"model": patch})


def _median(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


def ablate(cfg: RunConfig, axis: str, run_dir, variants: Optional[List[str]] = None, data=None) -> List[dict]:
    """Rows per (variant, shot, seed) plus a median row per (variant, shot)."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; options: {', '.join(ABLATION_AXES)}")
    run_dir = Path(run_dir)
    data = data or build_data(cfg)
    rows = []
    for variant in variants or list(ABLATION_AXES[axis]):
        vcfg = variant_config(cfg, axis, variant)
        # keyed by config, so variants equal to the full model share its runs across axes
        vdir = run_dir / f"ft-{digest(vcfg.to_dict())[:12]}"
        vdir.mkdir(parents=True, exist_ok=True)
        base = get_base(vcfg, data, run_dir)
        n_params = param_count(vcfg.model, len(data.split.base))
        runs = run_shots(vcfg, data, base, vdir)
        for r in runs:
            rows.append({"axis": axis, "variant": variant, "shot": r["shot"], "seed": r["seed"],
                         "novel_map": r["novel_map"], "base_map": r["base_map"], "params": n_params,
                         "cpu_seconds": r["cpu_seconds"]})
        for k in vcfg.train.shots:
            sel = [r for r in runs if r["shot"] == k]
            rows.append({"axis": axis, "variant": variant, "shot": k, "seed": "median",
                         "novel_map": _median(r["novel_map"] for r in sel),
                         "base_map": _median(r["base_map"] for r in sel), "params": n_params,
                         "cpu_seconds": round(sum(r["cpu_seconds"] for r in sel), 1)})
    return rows


def write_csv(rows: List[dict], path, config: Optional[dict] = None) -> Path:
    """CSV of ablation rows; the resolved config rides along in a ``#`` header line."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        if config is not None:
            fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return path


def read_csv(path) -> List[dict]:
    with Path(path).open() as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def summary(rows: List[dict]) -> Dict[str, float]:
    """Median novel mAP per variant, keyed by variant name."""
    return {r["variant"]: r["novel_map"] for r in rows if r["seed"] == "median"}


__all__ = ["RunConfig", "DataSection", "TrainSection", "EvalSection", "DeskData", "ABLATION_AXES", "load_config",
           "preset", "build_data", "shot_set", "get_base", "run_shots", "ablate", "variant_config", "write_csv",
           "read_csv", "param_count", "run_lock", "base_key", "EvalReport"]
