"""Command-line entry point: gen, split, train, infer, eval, report and an end-to-end ``run``.

An experiment config is one JSON file with optional sections ``synth``, ``split``,
``train``, ``inference`` and ``eval``; each command reads only its own section.
A file without sections is taken to be the section itself.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import TrainConfig
from .datamodel import DataError, LabelSpace, SplitSpec, load_splits, make_splits, save_splits
from .evaluation import ANET_AVG, ANET_REPORT, THUMOS, EvalConfig, EvalReport, NumericalFailure, aggregate, map_report, write_table
from .inference import InferenceConfig, dump_detections, load_detections
from .synthdata import SynthConfig, file_digest, gen_corpus, read_corpus, write_corpus
from .trainer import VARIANTS, Checkpoint, build, eval_vocabulary, predict, train, variant_config, write_history

log = logging.getLogger("stale_lab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
SECTIONS = ("synth", "split", "train", "inference", "eval")
BUNDLED = {"tiny": Path(__file__).parent / "configs" / "tiny.json",
           "reference": Path(__file__).parent / "configs" / "reference.json"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path: str | None, section: str) -> dict:
    if path is None:
        return {}
    p = BUNDLED.get(path, Path(path))
    try:
        obj = json.loads(Path(p).read_text())
    except FileNotFoundError:
        raise DataError(f"config not found: {path}")
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})")
    if not isinstance(obj, dict):
        raise DataError(f"{path}: config must be a JSON object")
    if any(k in obj for k in SECTIONS):
        return dict(obj.get(section, {}))
    return obj


def train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(read_config(args.config, "train"))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return variant_config(cfg, args.variant)


def eval_config(args, classes=None) -> EvalConfig:
    obj = read_config(args.config, "eval")
    grid = obj.pop("grid", "activitynet")
    grids = {"activitynet": (ANET_REPORT, ANET_AVG), "thumos": (THUMOS, THUMOS)}
    if grid not in grids:
        raise DataError(f"unknown tIoU grid {grid!r}")
    report, avg = grids[grid]
    return EvalConfig(tiou_thresholds=tuple(obj.get("tiou_thresholds", report)),
                      avg_thresholds=tuple(obj.get("avg_thresholds", avg)), classes=classes, mode=args.mode)


def inference_config(args) -> InferenceConfig:
    obj = read_config(args.config, "inference")
    if "thresholds" in obj:
        obj["thresholds"] = tuple(obj["thresholds"])
    return InferenceConfig(**obj)


def pick_split(path: str, trial: int | None) -> SplitSpec:
    splits = load_splits(path)
    if trial is None:
        if len(splits) != 1:
            raise UsageError(f"{path} holds {len(splits)} splits; choose one with --trial")
        return splits[0]
    for s in splits:
        if s.trial == trial:
            return s
    raise DataError(f"{path}: no split for trial {trial}")


def require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def cmd_gen(args) -> None:
    require(args, "out")
    cfg = SynthConfig.from_json(read_config(args.config, "synth"))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    manifest = write_corpus(gen_corpus(cfg), args.out)
    print(f"{manifest} sha256:{file_digest(manifest)[:16]}")


def splits_for(corpus, args) -> list[SplitSpec]:
    obj = read_config(args.config, "split")
    space = LabelSpace(corpus.class_names)
    seed = args.seed if args.seed is not None else obj.get("seed", 0)
    n_trials = args.trials if args.trials is not None else obj.get("trials", 10)
    if args.mode == "closed":
        return [dataclasses.replace(SplitSpec.closed_set(corpus.class_names, trial_seed=seed), trial=i)
                for i in range(n_trials)]
    return make_splits(space, obj.get("seen_fraction", 0.75), n_trials, seed)


def cmd_split(args) -> None:
    require(args, "corpus", "out")
    splits = splits_for(read_corpus(args.corpus), args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_splits(splits, out)
    print(f"{out}: {len(splits)} split(s)")


def experiment_manifest(args, cfg: TrainConfig, split: SplitSpec, ckpt_path: Path, extra: dict) -> dict:
    return {"tool_version": __version__, "config": cfg.to_json(), "config_hash": cfg.digest(),
            "split": split.to_json(), "corpus": str(Path(args.corpus).resolve()),
            "checkpoint": str(ckpt_path.resolve()), **extra}


def cmd_train(args) -> None:
    require(args, "corpus", "split", "out")
    cfg = train_config(args)
    corpus = read_corpus(args.corpus)
    split = pick_split(args.split, args.trial)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.time()
    ckpt = train(corpus, split, cfg, build(cfg))
    ckpt_path = ckpt.save(out / "checkpoint")
    write_history(ckpt.history, out / "loss.csv")
    write_json(experiment_manifest(args, cfg, split, ckpt_path, {"losses": str((out / "loss.csv").resolve())}),
               out / "experiment.json")
    print(f"trained {ckpt.step} steps in {time.time() - start:.1f}s -> {ckpt_path}")


def load_checkpoint(path: str) -> Checkpoint:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint"
    return Checkpoint.load(p)


def cmd_infer(args) -> None:
    require(args, "checkpoint", "corpus", "split", "out")
    ckpt = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.corpus)
    split = pick_split(args.split, args.trial)
    vocab = eval_vocabulary(corpus, split, args.mode)
    classes = split.unseen if args.mode == "open" else tuple(set(split.seen) | set(split.unseen))
    dets = predict(ckpt, corpus, corpus.videos_of(classes), vocab, inference_config(args))
    dump_detections(dets, args.out, class_names=corpus.class_names)
    print(f"{args.out}: {sum(map(len, dets.values()))} detections over {len(dets)} videos")


def cmd_eval(args) -> None:
    require(args, "detections", "corpus", "split", "out")
    corpus = read_corpus(args.corpus)
    split = pick_split(args.split, args.trial)
    classes = split.unseen if args.mode == "open" else tuple(set(split.seen) | set(split.unseen))
    dets = load_detections(args.detections, class_names=corpus.class_names)
    videos = corpus.videos_of(classes)
    gts = {v.id: [g for g in v.instances if g.label in classes] for v in videos}
    missing = sorted(set(gts) - set(dets))
    if missing:
        log.warning("%d evaluated videos have no detections entry", len(missing))
    index = sorted(corpus.class_names.index(c) for c in classes)
    cfg = eval_config(args, classes=tuple(index))
    report = map_report({v: dets.get(v, []) for v in gts}, gts, cfg, class_index=corpus.class_names.index)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    row = "closed-set" if args.mode == "closed" else "open-set"
    report.save(out, out.with_suffix(".csv"), row=row)
    print(f"{row} avg mAP {report.avg_mAP:.4f} " + " ".join(f"{k}:{v:.4f}" for k, v in report.columns().items()))


def collect_reports(directory: Path) -> list[EvalReport]:
    files = sorted(directory.glob("trial_*/report.json")) or sorted(directory.glob("trial_*.json"))
    if not files:
        raise DataError(f"{directory}: no trial reports (expected trial_*/report.json)")
    return [EvalReport.from_json(json.loads(f.read_text())) for f in files]


def cmd_report(args) -> None:
    require(args, "out")
    if not args.runs:
        raise UsageError("report needs at least one run directory (SETTING=DIR or DIR)")
    rows = []
    for spec in args.runs:
        name, _, path = spec.rpartition("=")
        directory = Path(path)
        agg = aggregate(collect_reports(directory))
        rows.append((name or directory.name, agg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_table(rows, out)
    print(out.read_text(), end="")


def cmd_run(args) -> None:
    """Every trial end to end (split, train, infer, eval) in one directory, then the table row."""
    require(args, "corpus", "out")
    corpus = read_corpus(args.corpus)
    cfg = train_config(args)
    inf_cfg = inference_config(args)
    out = Path(args.out)
    splits = splits_for(corpus, args)
    out.mkdir(parents=True, exist_ok=True)
    save_splits(splits, out / "splits.json")
    reports, failed = [], []
    for split in splits:
        tdir = out / f"trial_{split.trial:02d}"
        tdir.mkdir(exist_ok=True)
        try:
            ckpt = train(corpus, split, cfg, build(cfg))
        except NumericalFailure as exc:
            log.warning("trial %d failed: %s", split.trial, exc)
            failed.append(split.trial)
            continue
        ckpt_path = ckpt.save(tdir / "checkpoint")
        write_history(ckpt.history, tdir / "loss.csv")
        classes = split.unseen if args.mode == "open" else tuple(set(split.seen) | set(split.unseen))
        videos = corpus.videos_of(classes)
        dets = predict(ckpt, corpus, videos, eval_vocabulary(corpus, split, args.mode), inf_cfg)
        dump_detections(dets, tdir / "detections.json", class_names=corpus.class_names)
        gts = {v.id: [g for g in v.instances if g.label in classes] for v in videos}
        ecfg = eval_config(args, classes=tuple(sorted(corpus.class_names.index(c) for c in classes)))
        report = map_report(dets, gts, ecfg, class_index=corpus.class_names.index)
        report.save(tdir / "report.json")
        write_json(experiment_manifest(args, cfg, split, ckpt_path, {"report": str((tdir / "report.json").resolve())}),
                   tdir / "experiment.json")
        reports.append(report)
        print(f"trial {split.trial}: avg mAP {report.avg_mAP:.4f}", flush=True)
    if not reports:
        raise NumericalFailure("every trial failed")
    agg = aggregate(reports, failed)
    agg.save(out / "aggregate.json", out / "table.csv", row=args.setting or out.name)
    print(f"mean avg mAP {agg.avg_mAP:.4f} +/- {agg.std['Avg']:.4f} over {len(reports)} trial(s)")


COMMANDS = {"gen": cmd_gen, "split": cmd_split, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "report": cmd_report, "run": cmd_run}


def make_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="stale-lab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(COMMANDS[name].__doc__ or "").strip().split("\n")[0] or None)
        p.add_argument("--config", help="experiment JSON, or a bundled name: " + ", ".join(BUNDLED))
        p.add_argument("--corpus", help="corpus directory or manifest.json")
        p.add_argument("--split", help="split JSON written by `split`")
        p.add_argument("--trial", type=int, help="trial index inside the split file")
        p.add_argument("--checkpoint", help="checkpoint path or training output directory")
        p.add_argument("--detections", help="detections JSON written by `infer`")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--mode", choices=("open", "closed"), default="open")
        p.add_argument("--trials", type=int, help="number of seeded splits")
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS, default="full",
                       help="train the full model or a zero-shot control (train, run)")
        p.add_argument("--setting", help="row label for the table (run)")
        if name == "report":
            p.add_argument("runs", nargs="*", help="SETTING=DIR pairs holding trial reports")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"stale-lab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"stale-lab {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"stale-lab {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
