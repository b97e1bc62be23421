"""Command-line entry point: gen, train, cv, ablate, embed.

Configuration comes from an optional JSON file plus explicit flag
overrides (flags win). Every command except gen writes its artifacts
under a fresh timestamped run directory together with the fully
resolved configuration and the dataset fingerprint, so a run can be
reproduced bit-for-bit from the directory alone; gen writes the
dataset straight to --out. No command mutates its input dataset.

Exit codes: 0 success, 1 usage, 2 data/config error, 3 training
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import classifier
from .checkpoint import CheckpointError, load_model, save_model
from .contrastive import term_count
from .data import DataError, Dataset, dataset_fingerprint, load_dataset
from .evalkit import (
    CvResult,
    FoldFailure,
    confusion_csv,
    cross_validate,
    format_report,
    report_csv_rows,
)
from .synthdata import PRESETS, generate, get_preset, scale_spec
from .trainer import TrainConfig, TrainingDiverged, train

__all__ = ["main", "build_parser", "RunConfig"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3


@dataclasses.dataclass(eq=False)
class RunConfig:
    """Everything a run needs to be reproduced, persisted as config.json."""

    command: str
    data: str | None
    train: dict | None
    extras: dict
    data_fingerprint: str | None

    def write(self, run_dir: Path) -> None:
        payload = {
            "command": self.command,
            "data": self.data,
            "data_fingerprint": self.data_fingerprint,
            "train": self.train,
            **self.extras,
        }
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        (run_dir / "config.json").write_text(text)


def _stages_flag(text: str) -> tuple[int, ...]:
    try:
        stages = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad stage list {text!r}; want e.g. 1,2,3,4")
    return stages


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file with training-config keys")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--learning-rate", "--lr", type=float, default=None,
                        dest="learning_rate")
    parser.add_argument("--momentum", type=float, default=None)
    parser.add_argument("--weight-decay", type=float, default=None)
    parser.add_argument("--margin", type=float, default=None)
    parser.add_argument("--stages", type=_stages_flag, default=None,
                        help="comma list, e.g. 1,2,3,4 or 4")
    parser.add_argument("--sampler", choices=("uniform", "class_balanced"),
                        default=None)
    parser.add_argument("--pairs-per-epoch", type=int, default=None)
    parser.add_argument("--lr-step-every", type=int, default=None)
    parser.add_argument("--lr-step-factor", type=float, default=None)
    parser.add_argument("--input-size", type=int, default=None,
                        help="backbone input side; must match the dataset")
    parser.add_argument("--seed", type=int, default=None)


_FLAG_TO_KEY = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "learning_rate": "learning_rate",
    "momentum": "momentum",
    "weight_decay": "weight_decay",
    "margin": "margin",
    "stages": "stages_used",
    "sampler": "sampler_mode",
    "pairs_per_epoch": "pairs_per_epoch",
    "lr_step_every": "lr_step_every",
    "lr_step_factor": "lr_step_factor",
    "seed": "seed",
}


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """defaults < JSON config file < explicit flags."""
    merged = TrainConfig().to_dict()
    if args.config is not None:
        if not args.config.is_file():
            raise DataError(f"config file not found: {args.config}")
        loaded = json.loads(args.config.read_text())
        if not isinstance(loaded, dict):
            raise ValueError(f"{args.config}: top level must be an object")
        unknown = set(loaded) - set(merged)
        if unknown:
            raise ValueError(f"{args.config}: unknown keys {sorted(unknown)}")
        backbone = loaded.pop("backbone", None)
        merged.update(loaded)
        if backbone is not None:
            merged["backbone"] = {**merged["backbone"], **backbone}
    for flag, key in _FLAG_TO_KEY.items():
        value = getattr(args, flag)
        if value is not None:
            merged[key] = value
    if args.input_size is not None:
        merged["backbone"] = {**merged["backbone"], "input_size": args.input_size}
    return TrainConfig.from_dict(merged)


def _utc_stamp() -> str:
    return time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())


def make_run_dir(out_root: Path, command: str, seed: int) -> Path:
    base = f"{command}-{_utc_stamp()}-{seed}"
    for attempt in range(1000):
        name = base if attempt == 0 else f"{base}.{attempt}"
        candidate = out_root / name
        try:
            candidate.mkdir(parents=True)
            return candidate
        except FileExistsError:
            continue
    raise OSError(f"could not allocate a run directory under {out_root}")


def _write_csv(path: Path, rows: Sequence[Sequence[str]]) -> None:
    with path.open("w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


def _load_data(args) -> tuple[Dataset, str]:
    dataset = load_dataset(args.data)
    return dataset, dataset_fingerprint(args.data)


def cmd_gen(args) -> int:
    spec = get_preset(args.preset)
    if args.scale is not None:
        spec = scale_spec(spec, args.scale)
    overrides = {}
    if args.difficulty is not None:
        overrides["difficulty"] = args.difficulty
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.size is not None:
        overrides["image_size"] = args.size
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} is not empty; pass --force to overwrite")
    dataset = generate(spec, out)
    print(f"wrote {len(dataset.studies)} studies / {len(dataset.all_slices())} slices "
          f"to {out}")
    print(f"fingerprint {dataset_fingerprint(out)}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = resolve_train_config(args)
    dataset, fingerprint = _load_data(args)
    run_dir = make_run_dir(Path(args.out), "train", config.seed)
    RunConfig(command="train", data=str(args.data), train=config.to_dict(),
              extras={}, data_fingerprint=fingerprint).write(run_dir)
    model, log = train(
        dataset.all_slices(), config,
        progress=lambda e: print(
            f"epoch {e.epoch}: loss {e.mean_pair_loss:.4f} "
            f"same {e.mean_same_distance:.3f} diff {e.mean_diff_distance:.3f}",
            file=sys.stderr))
    save_model(model, run_dir / "model.ckpt")
    log.to_csv(run_dir / "log.csv")
    print(f"final mean pair loss {log.final.mean_pair_loss:.6f}")
    print(f"run directory {run_dir}")
    return EXIT_OK


def _write_cv_outputs(run_dir: Path, result: CvResult) -> None:
    for fold in result.folds:
        prefix = run_dir / f"fold{fold.fold_index}"
        _write_csv(Path(f"{prefix}_report.csv"), report_csv_rows(fold.report))
        _write_csv(Path(f"{prefix}_confusion.csv"), confusion_csv(fold.confusion))
    _write_csv(run_dir / "pooled_report.csv", report_csv_rows(result.pooled_report))
    _write_csv(run_dir / "pooled_confusion.csv", confusion_csv(result.pooled_confusion))
    _write_csv(run_dir / "floor_report.csv",
               report_csv_rows(result.floor_pooled_report))
    _write_csv(run_dir / "floor_confusion.csv",
               confusion_csv(result.floor_pooled_confusion))
    text = format_report(result.pooled_report, "pooled (all folds)")
    floor_text = format_report(result.floor_pooled_report, "raw-pixel floor baseline")
    (run_dir / "pooled_report.txt").write_text(text + "\n\n" + floor_text + "\n")
    summary = {
        "k": result.plan.k,
        "fold_seed": result.plan.seed,
        "fold_sizes": [len(f) for f in result.plan.folds],
        "pooled_accuracy": result.pooled_report.accuracy.value,
        "pooled_accuracy_ratio": [result.pooled_report.accuracy.num,
                                  result.pooled_report.accuracy.den],
        "floor_accuracy": result.floor_pooled_report.accuracy.value,
        "per_fold_accuracy": [f.report.accuracy.value for f in result.folds],
    }
    (run_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")


def cmd_cv(args) -> int:
    config = resolve_train_config(args)
    dataset, fingerprint = _load_data(args)
    run_dir = make_run_dir(Path(args.out), "cv", config.seed)
    RunConfig(command="cv", data=str(args.data), train=config.to_dict(),
              extras={"k": args.k, "jobs": args.jobs},
              data_fingerprint=fingerprint).write(run_dir)
    result = cross_validate(dataset, config, k=args.k, seed=config.seed,
                            jobs=args.jobs,
                            progress=lambda line: print(line, file=sys.stderr))
    _write_cv_outputs(run_dir, result)
    print(format_report(result.pooled_report, "pooled (all folds)"))
    print(f"floor baseline accuracy {result.floor_pooled_report.accuracy}")
    print(f"run directory {run_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = resolve_train_config(args)
    multi = dataclasses.replace(config, stages_used=(1, 2, 3, 4), stage_weights=None)
    single = dataclasses.replace(config, stages_used=(4,), stage_weights=None)
    dataset, fingerprint = _load_data(args)
    run_dir = make_run_dir(Path(args.out), "ablate", config.seed)
    RunConfig(command="ablate", data=str(args.data), train=config.to_dict(),
              extras={"k": args.k, "jobs": args.jobs,
                      "variants": {"multi": multi.to_dict(), "single": single.to_dict()}},
              data_fingerprint=fingerprint).write(run_dir)
    rows = [["variant", "stages", "loss_terms_per_pair", "pooled_accuracy",
             "accuracy_num", "accuracy_den"]]
    accuracies = {}
    for name, variant in (("multi", multi), ("single", single)):
        sub_dir = run_dir / name
        sub_dir.mkdir()
        result = cross_validate(dataset, variant, k=args.k, seed=variant.seed,
                                jobs=args.jobs,
                                progress=lambda line, n=name: print(
                                    f"[{n}] {line}", file=sys.stderr))
        _write_cv_outputs(sub_dir, result)
        acc = result.pooled_report.accuracy
        accuracies[name] = acc.value
        rows.append([name, ",".join(str(s) for s in variant.stages_used),
                     str(term_count(variant.loss_config(), 1)),
                     f"{acc.value:.6f}", str(acc.num), str(acc.den)])
    _write_csv(run_dir / "ablation.csv", rows)
    lines = [f"{r[0]:>8} stages={r[1]:<8} terms/pair={r[2]} accuracy={r[3]}"
             for r in rows[1:]]
    (run_dir / "ablation.txt").write_text("\n".join(lines) + "\n")
    print(f"multi-stage accuracy {accuracies['multi']:.4f}, "
          f"final-stage-only accuracy {accuracies['single']:.4f}")
    print(f"run directory {run_dir}")
    return EXIT_OK


def cmd_embed(args) -> int:
    dataset, fingerprint = _load_data(args)
    model = load_model(args.checkpoint)
    run_dir = make_run_dir(Path(args.out), "embed", 0)
    RunConfig(command="embed", data=str(args.data), train=None,
              extras={"checkpoint": str(args.checkpoint)},
              data_fingerprint=fingerprint).write(run_dir)
    slices = dataset.all_slices()
    features = classifier.embed_slices(model, slices)
    dim = features.shape[1]
    rows = [["slice_id", "study_id", "true_class"] + [f"e_{i + 1}" for i in range(dim)]]
    for sl, vector in zip(slices, features):
        rows.append([sl.slice_id, sl.study_id, str(sl.class_id)]
                    + [f"{float(v):.9g}" for v in vector])
    _write_csv(run_dir / "embeddings.csv", rows)
    print(f"wrote {len(slices)} x {dim} embeddings")
    print(f"run directory {run_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dmrn",
        description="Multi-scale resemblance network: synthetic data, pair "
                    "training, SVM classification, cross-validation.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--preset", choices=sorted(PRESETS), default="table1")
    gen.add_argument("--scale", type=float, default=None,
                     help="scale per-class counts, e.g. 0.2")
    gen.add_argument("--difficulty", type=float, default=None)
    gen.add_argument("--size", type=int, default=None, help="image side length")
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", required=True, help="dataset directory to create")
    gen.add_argument("--force", action="store_true",
                     help="write into a non-empty directory")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train on every slice of a dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", default="runs")
    _add_train_flags(tr)
    tr.set_defaults(func=cmd_train)

    cv = sub.add_parser("cv", help="study-level k-fold cross-validation")
    cv.add_argument("--data", required=True)
    cv.add_argument("--out", default="runs")
    cv.add_argument("--k", type=int, default=5)
    cv.add_argument("--jobs", type=int, default=1)
    _add_train_flags(cv)
    cv.set_defaults(func=cmd_cv)

    ab = sub.add_parser("ablate",
                        help="paired cv runs: stages 1,2,3,4 vs stage 4 only")
    ab.add_argument("--data", required=True)
    ab.add_argument("--out", default="runs")
    ab.add_argument("--k", type=int, default=5)
    ab.add_argument("--jobs", type=int, default=1)
    _add_train_flags(ab)
    ab.set_defaults(func=cmd_ablate)

    em = sub.add_parser("embed", help="export final-stage embeddings as CSV")
    em.add_argument("--data", required=True)
    em.add_argument("--checkpoint", required=True)
    em.add_argument("--out", default="runs")
    em.set_defaults(func=cmd_embed)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 for --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except FoldFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, TrainingDiverged):
            return EXIT_TRAINING
        return EXIT_DATA
    except (DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
