"""Evaluation kit: confusion matrices, exact one-vs-all metrics,
stratified study-level folds, and the cross-validation harness.

Metrics are held as integer numerator/denominator pairs so they can be
compared exactly against a per-sample recount; division happens only
when a float is requested. Accuracy is multi-class (trace/total); the
other four metrics are per-class one-vs-all with macro and micro
aggregates. Zero-denominator metrics are flagged undefined and left out
of the macro mean, never silently zeroed.

Folds split whole studies (a study's slices never straddle train/test),
stratified so each class spreads across folds within one study.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import classifier
from .classifier import SvmConfig, average_probabilities, predict_proba, train_svm
from .data import Dataset, StudyRecord
from .trainer import TrainConfig, fold_train_config, train

__all__ = [
    "Ratio",
    "ConfusionMatrix",
    "ClassMetrics",
    "EvalReport",
    "FoldPlan",
    "FoldFailure",
    "FoldResult",
    "CvResult",
    "compute_metrics",
    "make_folds",
    "cross_validate",
    "report_csv_rows",
    "format_report",
    "confusion_csv",
    "FLOOR_SVM_ITERATIONS",
]

METRIC_NAMES = ("sensitivity", "specificity", "precision", "f1")

# The raw-pixel floor baseline works in 4096 dimensions; cap its
# iteration budget so it stays a small fraction of the CV runtime.
FLOOR_SVM_ITERATIONS = 400


@dataclass(frozen=True)
class Ratio:
    """Exact metric value: integer numerator over integer denominator."""

    num: int
    den: int

    @property
    def defined(self) -> bool:
        return self.den > 0

    @property
    def value(self) -> float | None:
        return self.num / self.den if self.den > 0 else None

    def __str__(self) -> str:
        return f"{self.value:.4f}" if self.defined else "undef"


@dataclass(eq=False)
class ConfusionMatrix:
    """K x K counts, rows = true class, columns = predicted class."""

    class_ids: list[int]
    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        k = len(self.class_ids)
        if self.counts.shape != (k, k):
            raise ValueError(f"counts shape {self.counts.shape} does not match "
                             f"{k} classes")
        if (self.counts < 0).any():
            raise ValueError("negative count in confusion matrix")

    @classmethod
    def zeros(cls, class_ids: Sequence[int]) -> "ConfusionMatrix":
        k = len(class_ids)
        return cls(list(class_ids), np.zeros((k, k), dtype=np.int64))

    @classmethod
    def from_pairs(cls, true_ids: Sequence[int], pred_ids: Sequence[int],
                   class_ids: Sequence[int] | None = None) -> "ConfusionMatrix":
        if len(true_ids) != len(pred_ids):
            raise ValueError(f"{len(true_ids)} true labels vs {len(pred_ids)} predictions")
        if class_ids is None:
            class_ids = sorted(set(true_ids) | set(pred_ids))
        cm = cls.zeros(class_ids)
        index = {c: i for i, c in enumerate(cm.class_ids)}
        for t, p in zip(true_ids, pred_ids):
            cm.counts[index[t], index[p]] += 1
        return cm

    def add(self, other: "ConfusionMatrix") -> None:
        if other.class_ids != self.class_ids:
            raise ValueError("cannot merge confusion matrices over different classes")
        self.counts += other.counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def binary_counts(self, class_index: int) -> tuple[int, int, int, int]:
        """One-vs-all (tp, fn, fp, tn) for the class at class_index."""
        tp = int(self.counts[class_index, class_index])
        fn = int(self.counts[class_index].sum()) - tp
        fp = int(self.counts[:, class_index].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, fn, fp, tn


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    tp: int
    fn: int
    fp: int
    tn: int
    sensitivity: Ratio
    specificity: Ratio
    precision: Ratio
    f1: Ratio


@dataclass(eq=False)
class EvalReport:
    accuracy: Ratio
    per_class: list[ClassMetrics]
    macro: dict[str, float | None]
    micro: dict[str, float | None]
    undefined: dict[str, list[int]]
    total: int


def _class_metrics(class_id: int, tp: int, fn: int, fp: int, tn: int) -> ClassMetrics:
    return ClassMetrics(
        class_id=class_id, tp=tp, fn=fn, fp=fp, tn=tn,
        sensitivity=Ratio(tp, tp + fn),
        specificity=Ratio(tn, tn + fp),
        precision=Ratio(tp, tp + fp),
        # Same value as 2*Pre*Sen/(Pre+Sen) whenever that form is
        # defined, but stays exact and covers tp=0 with fp+fn>0.
        f1=Ratio(2 * tp, 2 * tp + fp + fn),
    )


def compute_metrics(confusion: ConfusionMatrix) -> EvalReport:
    """Per-class one-vs-all metrics plus multi-class accuracy.

    All numerators/denominators are exact integers. Macro averages skip
    undefined (zero-denominator) entries and record them in
    report.undefined; micro averages pool the binary counts first.
    """
    total = confusion.total
    if total < 1:
        raise ValueError("empty confusion matrix")
    per_class = []
    for i, class_id in enumerate(confusion.class_ids):
        per_class.append(_class_metrics(class_id, *confusion.binary_counts(i)))
    accuracy = Ratio(int(np.trace(confusion.counts)), total)

    macro: dict[str, float | None] = {}
    undefined: dict[str, list[int]] = {}
    for name in METRIC_NAMES:
        values = [getattr(m, name).value for m in per_class if getattr(m, name).defined]
        undefined[name] = [m.class_id for m in per_class if not getattr(m, name).defined]
        macro[name] = sum(values) / len(values) if values else None

    pooled = {"tp": 0, "fn": 0, "fp": 0, "tn": 0}
    for m in per_class:
        for key in pooled:
            pooled[key] += getattr(m, key)
    micro_counts = _class_metrics(-1, pooled["tp"], pooled["fn"], pooled["fp"], pooled["tn"])
    micro = {name: getattr(micro_counts, name).value for name in METRIC_NAMES}

    return EvalReport(accuracy=accuracy, per_class=per_class, macro=macro,
                      micro=micro, undefined=undefined, total=total)


@dataclass(eq=False)
class FoldPlan:
    folds: list[list[str]]  # test-study ids per fold
    k: int
    seed: int

    def train_ids(self, fold_index: int) -> list[str]:
        out: list[str] = []
        for i, fold in enumerate(self.folds):
            if i != fold_index:
                out.extend(fold)
        return out


def make_folds(studies: Sequence[StudyRecord], k: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified study-level folds.

    Per class, each fold receives floor(n_c/k) studies, then the
    remainders go one at a time to whichever fold currently holds the
    fewest studies (ties to the lowest fold index). Fold sizes therefore
    differ by at most one and each class spreads within one study of
    even, independent of seed; the seed only shuffles which studies
    land where.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(studies) < k:
        raise ValueError(f"cannot make {k} folds from {len(studies)} studies")
    ids = [s.study_id for s in studies]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate study ids")

    by_class: dict[int, list[str]] = {}
    for s in studies:
        by_class.setdefault(s.class_id, []).append(s.study_id)
    rng = np.random.default_rng([seed, len(studies)])
    folds: list[list[str]] = [[] for _ in range(k)]
    for class_id in sorted(by_class):
        members = sorted(by_class[class_id])
        rng.shuffle(members)
        base, extra = divmod(len(members), k)
        cursor = 0
        for i in range(k):
            folds[i].extend(members[cursor:cursor + base])
            cursor += base
        for _ in range(extra):
            sizes = [len(f) for f in folds]
            target = sizes.index(min(sizes))
            folds[target].append(members[cursor])
            cursor += 1
    return FoldPlan(folds=folds, k=k, seed=seed)


class FoldFailure(RuntimeError):
    """A fold aborted; carries the fold index and the original error."""

    def __init__(self, fold_index: int, cause: BaseException):
        super().__init__(f"fold {fold_index} failed: {cause}")
        self.fold_index = fold_index
        self.cause = cause

    def __reduce__(self):
        # Keeps the exception intact across process-pool boundaries.
        return (FoldFailure, (self.fold_index, self.cause))


@dataclass(eq=False)
class FoldResult:
    fold_index: int
    confusion: ConfusionMatrix
    report: EvalReport
    floor_confusion: ConfusionMatrix
    floor_report: EvalReport
    test_study_ids: list[str]
    final_loss: float
    seconds: float


@dataclass(eq=False)
class CvResult:
    folds: list[FoldResult]
    pooled_confusion: ConfusionMatrix
    pooled_report: EvalReport
    floor_pooled_confusion: ConfusionMatrix
    floor_pooled_report: EvalReport
    plan: FoldPlan


def _study_probabilities(studies, predict_fn) -> tuple[list[int], list[int]]:
    true_ids, pred_ids = [], []
    for study in studies:
        probs = average_probabilities(predict_fn(study))
        true_ids.append(study.class_id)
        pred_ids.append(int(np.argmax(probs)))
    return true_ids, pred_ids


def _raw_pixel_features(slices) -> np.ndarray:
    return np.stack([sl.pixels.reshape(-1) for sl in slices]).astype(np.float64)


def _run_fold(dataset: Dataset, plan: FoldPlan, fold_index: int,
              config: TrainConfig, svm_config: SvmConfig) -> FoldResult:
    started = time.perf_counter()
    class_ids = sorted({s.class_id for s in dataset.studies})
    by_id = {s.study_id: s for s in dataset.studies}
    train_studies = [by_id[i] for i in plan.train_ids(fold_index)]
    test_studies = [by_id[i] for i in plan.folds[fold_index]]
    train_slices = [sl for s in train_studies for sl in s.slices]
    labels = np.array([sl.class_id for sl in train_slices])

    fold_config = fold_train_config(config, fold_index)
    model, log = train(train_slices, fold_config)
    train_features = classifier.embed_slices(model, train_slices)
    svm = train_svm(train_features, labels, svm_config)

    def dmrn_predict(study):
        return predict_proba(svm, classifier.embed_slices(model, study.slices))

    true_ids, pred_indices = _study_probabilities(test_studies, dmrn_predict)
    pred_ids = [int(svm.class_ids[i]) for i in pred_indices]
    confusion = ConfusionMatrix.from_pairs(true_ids, pred_ids, class_ids)

    floor_svm = train_svm(_raw_pixel_features(train_slices), labels,
                          SvmConfig(c=svm_config.c, iterations=FLOOR_SVM_ITERATIONS))

    def floor_predict(study):
        return predict_proba(floor_svm, _raw_pixel_features(study.slices))

    floor_true, floor_indices = _study_probabilities(test_studies, floor_predict)
    floor_pred = [int(floor_svm.class_ids[i]) for i in floor_indices]
    floor_confusion = ConfusionMatrix.from_pairs(floor_true, floor_pred, class_ids)

    return FoldResult(
        fold_index=fold_index,
        confusion=confusion,
        report=compute_metrics(confusion),
        floor_confusion=floor_confusion,
        floor_report=compute_metrics(floor_confusion),
        test_study_ids=list(plan.folds[fold_index]),
        final_loss=log.epochs[-1].mean_pair_loss if log.epochs else float("nan"),
        seconds=time.perf_counter() - started,
    )


def _run_fold_guarded(args) -> FoldResult:
    dataset, plan, fold_index, config, svm_config = args
    try:
        return _run_fold(dataset, plan, fold_index, config, svm_config)
    except FoldFailure:
        raise
    except Exception as exc:
        raise FoldFailure(fold_index, exc) from exc


def cross_validate(dataset: Dataset, config: TrainConfig, k: int = 5,
                   seed: int = 0, svm_config: SvmConfig = SvmConfig(),
                   jobs: int = 1,
                   progress: Callable[[str], None] | None = None) -> CvResult:
    """Study-level k-fold cross-validation of the full pipeline.

    Each fold trains its own model (fold seed = config seed + fold
    index), fits the SVM head on training embeddings, and classifies the
    held-out studies; a raw-pixel linear-SVM floor baseline runs on the
    same folds. Folds are independent; jobs > 1 runs them in separate
    processes with identical results.
    """
    plan = make_folds(dataset.studies, k=k, seed=seed)
    class_ids = sorted({s.class_id for s in dataset.studies})
    args = [(dataset, plan, i, config, svm_config) for i in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, k)) as pool:
            results = list(pool.map(_run_fold_guarded, args))
    else:
        results = []
        for a in args:
            results.append(_run_fold_guarded(a))
            if progress is not None:
                r = results[-1]
                progress(f"fold {r.fold_index}: accuracy {r.report.accuracy} "
                         f"floor {r.floor_report.accuracy} ({r.seconds:.1f}s)")

    pooled = ConfusionMatrix.zeros(class_ids)
    floor_pooled = ConfusionMatrix.zeros(class_ids)
    for r in results:
        pooled.add(r.confusion)
        floor_pooled.add(r.floor_confusion)
    return CvResult(
        folds=results,
        pooled_confusion=pooled,
        pooled_report=compute_metrics(pooled),
        floor_pooled_confusion=floor_pooled,
        floor_pooled_report=compute_metrics(floor_pooled),
        plan=plan,
    )


def report_csv_rows(report: EvalReport) -> list[list[str]]:
    """CSV form: one row per class plus accuracy/macro/micro rows.

    Ratios are spelled out as value plus exact num/den columns.
    """
    rows = [["row", "class_id", "tp", "fn", "fp", "tn",
             "sensitivity", "specificity", "precision", "f1", "num", "den"]]
    for m in report.per_class:
        rows.append(["class", str(m.class_id), str(m.tp), str(m.fn), str(m.fp),
                     str(m.tn), str(m.sensitivity), str(m.specificity),
                     str(m.precision), str(m.f1), "", ""])
    rows.append(["accuracy", "", "", "", "", "", "", "", "", str(report.accuracy),
                 str(report.accuracy.num), str(report.accuracy.den)])
    for scope, values in (("macro", report.macro), ("micro", report.micro)):
        rows.append([scope, "", "", "", "",
                     "",
                     *("" if values[n] is None else f"{values[n]:.6f}"
                       for n in METRIC_NAMES), "", ""])
    return rows


def format_report(report: EvalReport, title: str = "evaluation") -> str:
    """Aligned human-readable table."""
    lines = [f"{title}  (n={report.total})",
             f"accuracy: {report.accuracy} ({report.accuracy.num}/{report.accuracy.den})",
             f"{'class':>8} {'sen':>8} {'spe':>8} {'pre':>8} {'f1':>8}"]
    for m in report.per_class:
        lines.append(f"{m.class_id:>8} {str(m.sensitivity):>8} {str(m.specificity):>8} "
                     f"{str(m.precision):>8} {str(m.f1):>8}")
    for scope, values in (("macro", report.macro), ("micro", report.micro)):
        cells = " ".join(f"{('undef' if values[n] is None else f'{values[n]:.4f}'):>8}"
                         for n in METRIC_NAMES)
        lines.append(f"{scope:>8} {cells}")
    for name, classes in report.undefined.items():
        if classes:
            lines.append(f"note: {name} undefined for classes {classes}")
    return "\n".join(lines)


def confusion_csv(confusion: ConfusionMatrix) -> list[list[str]]:
    header = ["true\\pred"] + [str(c) for c in confusion.class_ids]
    rows = [header]
    for i, class_id in enumerate(confusion.class_ids):
        rows.append([str(class_id)] + [str(int(v)) for v in confusion.counts[i]])
    return rows
