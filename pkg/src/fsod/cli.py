"""Command-line entry point: ``fsod <command> [options]``.

Exit codes: 0 success, 1 check failure, 2 config error, 3 protocol
violation. Every command resolves one :class:`RunConfig` from
``--preset``, ``--config`` and ``--set key.path=value`` (in that order) plus
its own flags, and echoes the resolved config into what it writes.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .datasets import filter_classes, load_dataset, make_split, sample_k_shot, save_dataset, write_manifest
from .detector import Checkpoint, fine_tune, train_base
from .errors import ConfigError, FSODError, ParseError, ProtocolError, SamplingError
from .evaluation import evaluate
from . import experiment as ex

log = logging.getLogger("fsod")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_PROTOCOL = 0, 1, 2, 3


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _set_path(doc: dict, dotted: str, value):
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigError(f"--set {dotted}: {k} is not a section")
    cur[keys[-1]] = value


def _overrides(args, extra: Optional[dict] = None) -> dict:
    doc: dict = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _set_path(doc, key.strip(), value)
    for dotted, value in (extra or {}).items():
        if value is not None:
            _set_path(doc, dotted, value)
    return doc


def _config(args, **extra) -> ex.RunConfig:
    return ex.load_config(args.config, args.preset, _overrides(args, extra))


def _manifest(out_dir: Path, cfg: ex.RunConfig) -> Path:
    files = [p for p in out_dir.rglob("*") if p.is_file() and p.name not in ("manifest.json", ".lock")]
    return write_manifest(out_dir, files, cfg.to_dict())


def _split_for(cfg: ex.RunConfig, split_id: Optional[str] = None):
    return make_split(split_id or cfg.data.split, cfg.data.classes, cfg.data.num_novel)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    cfg = _config(args, **{"data.seed": args.seed, "data.pool_images": args.num_images})
    out = Path(args.out)
    data = ex.build_data(cfg)
    save_dataset(data.pool, out, "pool", cfg.to_dict())
    save_dataset(data.test, out, "test", cfg.to_dict())
    m = _manifest(out, cfg)
    print(f"wrote {len(data.pool)} pool and {len(data.test)} test images to {out} (manifest {m.name})")
    return EXIT_OK


def _load_pool(args, cfg):
    if args.data:
        return load_dataset(Path(args.data) / "pool.json")
    return ex.build_data(cfg).pool


def cmd_train_base(args) -> int:
    cfg = _config(args, **{"train.base_seed": args.seed})
    out = Path(args.out)
    split = _split_for(cfg)
    with ex.run_lock(out):
        base = filter_classes(_load_pool(args, cfg), split.base)
        ckpt = train_base(base, cfg.model, split.base, seed=cfg.train.base_seed, log_path=out / "train-base.log.jsonl")
        ckpt.meta.update(run_config=cfg.to_dict(), base_images=len(base))
        path = ckpt.save(out / "base.ckpt")
        _manifest(out, cfg)
    print(f"base checkpoint: {path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args, **{"train.freeze_backbone": args.freeze_backbone, "data.split": args.split})
    out = Path(args.out)
    ckpt = Checkpoint.load(args.ckpt)
    if ckpt.phase != "base":
        raise ProtocolError(f"{args.ckpt} is a {ckpt.phase!r} checkpoint; fine-tuning needs a base checkpoint")
    split = _split_for(cfg, args.split)
    if set(split.base) != set(ckpt.layout.base_classes):
        raise ProtocolError(f"split {args.split!r} base classes differ from the checkpoint's")
    with ex.run_lock(out):
        pool = _load_pool(args, cfg)
        classes = list(split.novel) if cfg.model.finetune_mode == "novel-only" else list(split.base) + list(split.novel)
        shots = sample_k_shot(pool, classes, args.shots, args.seed)
        name = f"finetuned-k{args.shots}-s{args.seed}"
        ft = fine_tune(ckpt, shots, split.novel, seed=args.seed, cfg=cfg.model, log_path=out / f"{name}.log.jsonl")
        ft.meta.update(run_config=cfg.to_dict(), shots=args.shots, seed=args.seed, split=args.split)
        path = ft.save(out / f"{name}.ckpt")
        _manifest(out, cfg)
    print(f"fine-tuned checkpoint: {path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = Checkpoint.load(args.ckpt)
    split = _split_for(cfg, args.split)
    test = load_dataset(Path(args.data) / "test.json") if args.data else ex.build_data(cfg).test
    report = evaluate(ckpt.to_detector(), test, split, shot=args.shots, seed=args.seed,
                      score_thresh=cfg.eval.score_thresh, config=cfg.to_dict())
    text = report.to_json()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.axis not in ex.ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; options: {', '.join(ex.ABLATION_AXES)}")
    cfg = _config(args, **{"train.shots": args.shots, "train.seeds": args.seeds})
    out = Path(args.out)
    with ex.run_lock(out):
        rows = ex.ablate(cfg, args.axis, out, args.variants)
        path = ex.write_csv(rows, out / f"ablation-{args.axis}.csv", cfg.to_dict())
        _manifest(out, cfg)
    print(path.read_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite
    rows = run_suite()
    print(format_table(rows))
    total = sum(r.seconds for r in rows)
    failed = [r.op for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed in {total:.1f} s")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_report(args) -> int:
    from . import plotting
    run = Path(args.run)
    if not run.is_dir():
        raise ConfigError(f"run directory {run} does not exist")
    figs = run / "figures"
    figs.mkdir(exist_ok=True)
    written = []
    for logf in sorted(run.rglob("*.log.jsonl")):
        if logf.stat().st_size:
            rel = "-".join(logf.relative_to(run).with_suffix("").with_suffix("").parts)
            written.append(plotting.plot_training(logf, figs / f"loss-{rel}.png"))
    for csvf in sorted(run.glob("ablation-*.csv")):
        axis = csvf.stem.split("-", 1)[1]
        written.append(plotting.plot_ablation(ex.read_csv(csvf), figs / f"{csvf.stem}.png", axis))
    reports = []
    for rep in sorted(run.rglob("report-*.json")):
        doc = json.loads(rep.read_text())
        doc["_path"] = str(rep.relative_to(run))
        reports.append(doc)
    if reports:
        written.append(plotting.plot_per_class(reports, figs / "per-class-ap.png"))
        lines = ["report,shot,seed,novel_map,base_map"]
        for d in reports:
            fmt = lambda v: "" if v is None else f"{v:.6f}"
            lines.append(f"{d['_path']},{d['shot']},{d['seed']},{fmt(d['novel_map'])},{fmt(d['base_map'])}")
        (run / "summary.csv").write_text("\n".join(lines) + "\n")
        written.append(run / "summary.csv")
    for p in written:
        print(p)
    if not written:
        print(f"nothing to report in {run}", file=sys.stderr)
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (sections data, model, train, eval)")
    common.add_argument("--preset", help="bundled config to start from, e.g. 'desk'")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value, e.g. --set model.base.epochs=2 (JSON values)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fsod", description="Desk-scale few-shot object detection.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="render the synthetic pool and test sets")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--num-images", type=int, help="pool size (data.pool_images)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-base", parents=[common], help="base training on the split's base classes")
    t.add_argument("--data", help="directory written by gen-data (default: generate from config)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train_base)

    f = sub.add_parser("finetune", parents=[common], help="K-shot fine-tuning of a base checkpoint")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data")
    f.add_argument("--shots", type=int, required=True)
    f.add_argument("--split", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.add_argument("--freeze-backbone", type=_parse_bool, default=True,
                   help="protocol-locked: only 'true' is accepted")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", parents=[common], help="AP@0.5 report for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data")
    e.add_argument("--split", required=True)
    e.add_argument("--shots", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="also write the report JSON here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="run one ablation axis over shots x seeds")
    a.add_argument("--axis", required=True, help=f"one of: {', '.join(ex.ABLATION_AXES)}")
    a.add_argument("--variants", type=lambda s: s.split(","), help="subset of the axis' variants")
    a.add_argument("--shots", type=_int_list)
    a.add_argument("--seeds", type=_int_list)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every registered op")
    c.add_argument("-v", "--verbose", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="figures and summary CSV for a run directory")
    r.add_argument("--run", required=True)
    r.add_argument("-v", "--verbose", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ProtocolError as exc:
        print(f"protocol violation: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (ConfigError, SamplingError, ParseError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FSODError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
