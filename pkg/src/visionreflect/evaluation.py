"""Accuracy, subset, and binary discriminatory metrics over traces.

Correctness is membership of the final label in the item's true-label
set; items with an empty true-label set are unlabeled under the current
label mode and never enter a denominator, and neither do degenerate
items with no candidates (no top-1 exists). Undefined ratios (0/0)
surface as ``None``, serialized as JSON ``null`` / CSV ``"NA"``;
coercing them to 0 or 1 would corrupt aggregate comparisons.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .reflection import ReflectionTrace
from .store import Dataset, LabelMode
from .verifiers import Answer


class MissingTraceError(KeyError):
    def __init__(self, item_id: str):
        super().__init__(f"no trace for item {item_id!r}")
        self.item_id = item_id


class NoGatedItemsError(ValueError):
    pass


def _ratio(numerator: int, denominator: int) -> float | None:
    return numerator / denominator if denominator else None


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def accuracy(self) -> float | None:
        return _ratio(self.tp + self.tn, self.total)

    def specificity(self) -> float | None:
        return _ratio(self.tn, self.tn + self.fp)

    def precision(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fp)

    def recall(self) -> float | None:
        return _ratio(self.tp, self.tp + self.fn)


@dataclass(frozen=True)
class BinaryMetrics:
    """Verdict quality on rank-1 candidates of gated items.

    Positive class: the rank-1 candidate is a true label. Predicted
    positive: the rank-1 verdict is Yes. With ``not_sure_excluded``
    False, NotSure counts as a predicted negative (it behaves as a
    rejection in the loop); the excluded view drops those items instead.
    """

    counts: ConfusionCounts
    accuracy: float | None
    specificity: float | None
    precision: float | None
    recall: float | None
    not_sure_excluded: bool
    n_not_sure: int

    @classmethod
    def from_counts(
        cls, counts: ConfusionCounts, not_sure_excluded: bool, n_not_sure: int
    ) -> "BinaryMetrics":
        return cls(
            counts=counts,
            accuracy=counts.accuracy(),
            specificity=counts.specificity(),
            precision=counts.precision(),
            recall=counts.recall(),
            not_sure_excluded=not_sure_excluded,
            n_not_sure=n_not_sure,
        )


@dataclass(frozen=True)
class SubsetAccuracy:
    baseline: float | None
    reflected: float | None
    n: int


@dataclass(frozen=True)
class EvalReport:
    n_items: int
    n_unlabeled: int
    n_gated: int
    n_failed: int
    threshold: float
    label_mode: LabelMode
    baseline_accuracy: float | None
    reflected_accuracy: float | None
    subset: SubsetAccuracy
    binary: BinaryMetrics | None
    binary_excluding_not_sure: BinaryMetrics | None


def _traces_by_id(traces: Iterable[ReflectionTrace]) -> dict[str, ReflectionTrace]:
    return {t.item_id: t for t in traces}


def _is_correct(label: int, truth: frozenset[int]) -> bool:
    return label in truth


def top1_accuracy(traces: Sequence[ReflectionTrace], ds: Dataset) -> float:
    """Accuracy of trace finals; unlabeled items leave the denominator."""
    by_id = _traces_by_id(traces)
    correct = 0
    labeled = 0
    for item in ds.items:
        trace = by_id.get(item.item_id)
        if trace is None:
            raise MissingTraceError(item.item_id)
        if not item.true_label_indices or not item.candidates:
            continue
        labeled += 1
        correct += _is_correct(trace.final_label_index, item.true_label_indices)
    if labeled == 0:
        raise ValueError("no labeled items; accuracy is undefined")
    return correct / labeled


def baseline_accuracy(ds: Dataset) -> float:
    """Top-1 accuracy of the raw predictions, no reflection applied."""
    correct = 0
    labeled = 0
    for item in ds.items:
        if not item.true_label_indices or not item.candidates:
            continue
        labeled += 1
        correct += _is_correct(item.top1_label(), item.true_label_indices)
    if labeled == 0:
        raise ValueError("no labeled items; accuracy is undefined")
    return correct / labeled


def containment_rate(ds: Dataset, max_rank: int = 5) -> float:
    """Fraction of labeled items whose truth appears in the top ranks.

    This is the accuracy ceiling of the verification loop: a perfect
    verifier can recover exactly these items.
    """
    hits = 0
    labeled = 0
    for item in ds.items:
        if not item.true_label_indices or not item.candidates:
            continue
        labeled += 1
        top = item.candidates[:max_rank]
        hits += any(c.label_index in item.true_label_indices for c in top)
    if labeled == 0:
        raise ValueError("no labeled items; containment is undefined")
    return hits / labeled


def subset_accuracy(
    traces: Sequence[ReflectionTrace], ds: Dataset, threshold: float
) -> SubsetAccuracy:
    """Baseline vs reflected accuracy on items with confidence < threshold."""
    by_id = _traces_by_id(traces)
    n = 0
    base_correct = 0
    refl_correct = 0
    for item in ds.items:
        trace = by_id.get(item.item_id)
        if trace is None:
            raise MissingTraceError(item.item_id)
        if not item.true_label_indices or not item.candidates:
            continue
        if item.candidates[0].score >= threshold:
            continue
        n += 1
        base_correct += _is_correct(item.top1_label(), item.true_label_indices)
        refl_correct += _is_correct(trace.final_label_index, item.true_label_indices)
    return SubsetAccuracy(
        baseline=_ratio(base_correct, n), reflected=_ratio(refl_correct, n), n=n
    )


def binary_metrics(
    traces: Sequence[ReflectionTrace], ds: Dataset, exclude_not_sure: bool = False
) -> BinaryMetrics:
    """Confusion counts of rank-1 verdicts on gated, labeled items."""
    by_id = _traces_by_id(traces)
    tp = fp = tn = fn = 0
    n_not_sure = 0
    eligible = 0
    for item in ds.items:
        trace = by_id.get(item.item_id)
        if trace is None:
            raise MissingTraceError(item.item_id)
        if not trace.gated or not trace.steps or trace.steps[0].rank != 1:
            continue
        if not item.true_label_indices or not item.candidates:
            continue
        eligible += 1
        verdict = trace.steps[0].verdict
        actual_positive = item.top1_label() in item.true_label_indices
        if verdict.answer is Answer.NOT_SURE:
            n_not_sure += 1
            if exclude_not_sure:
                continue
        predicted_positive = verdict.answer is Answer.YES
        if actual_positive and predicted_positive:
            tp += 1
        elif actual_positive:
            fn += 1
        elif predicted_positive:
            fp += 1
        else:
            tn += 1
    if eligible == 0:
        raise NoGatedItemsError("no gated items with a rank-1 verdict")
    return BinaryMetrics.from_counts(
        ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn),
        not_sure_excluded=exclude_not_sure,
        n_not_sure=n_not_sure,
    )


def build_report(
    traces: Sequence[ReflectionTrace], ds: Dataset, threshold: float
) -> EvalReport:
    """Assemble the full report; sections undefined on this data are None."""
    try:
        base = baseline_accuracy(ds)
        reflected = top1_accuracy(traces, ds)
    except ValueError:
        base = None
        reflected = None
    try:
        binary = binary_metrics(traces, ds, exclude_not_sure=False)
        binary_excl = binary_metrics(traces, ds, exclude_not_sure=True)
    except NoGatedItemsError:
        binary = None
        binary_excl = None
    return EvalReport(
        n_items=len(ds.items),
        n_unlabeled=sum(1 for item in ds.items if not item.true_label_indices),
        n_gated=sum(1 for t in traces if t.gated),
        n_failed=sum(1 for t in traces if t.failed),
        threshold=threshold,
        label_mode=ds.label_mode,
        baseline_accuracy=base,
        reflected_accuracy=reflected,
        subset=subset_accuracy(traces, ds, threshold),
        binary=binary,
        binary_excluding_not_sure=binary_excl,
    )


def _round4(value: float | None) -> float | None:
    # 4 fractional digits, round-half-even (Python's round).
    return None if value is None else round(value, 4)


def _binary_record(metrics: BinaryMetrics | None) -> dict | None:
    if metrics is None:
        return None
    return {
        "tp": metrics.counts.tp,
        "fp": metrics.counts.fp,
        "tn": metrics.counts.tn,
        "fn": metrics.counts.fn,
        "accuracy": _round4(metrics.accuracy),
        "specificity": _round4(metrics.specificity),
        "precision": _round4(metrics.precision),
        "recall": _round4(metrics.recall),
        "not_sure_excluded": metrics.not_sure_excluded,
        "n_not_sure": metrics.n_not_sure,
    }


def report_to_record(report: EvalReport) -> dict:
    return {
        "n_items": report.n_items,
        "n_unlabeled": report.n_unlabeled,
        "n_gated": report.n_gated,
        "n_failed": report.n_failed,
        "threshold": report.threshold,
        "label_mode": report.label_mode.value,
        "baseline_accuracy": _round4(report.baseline_accuracy),
        "reflected_accuracy": _round4(report.reflected_accuracy),
        "subset": {
            "below_threshold_baseline": _round4(report.subset.baseline),
            "below_threshold_reflected": _round4(report.subset.reflected),
            "n_subset": report.subset.n,
        },
        "binary": _binary_record(report.binary),
        "binary_excluding_not_sure": _binary_record(report.binary_excluding_not_sure),
    }


def _csv_cell(value: float | None) -> str:
    return "NA" if value is None else f"{value:.4f}"


def emit_report(report: EvalReport, json_path: str | Path, csv_path: str | Path) -> None:
    """Write the JSON report and a one-row CSV summary.

    Emission is byte-stable: keys are sorted, floats carry exactly four
    fractional digits, undefined values are null/"NA".
    """
    record = report_to_record(report)
    Path(json_path).write_text(
        json.dumps(record, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    binary = report.binary
    with Path(csv_path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "n_items",
                "label_mode",
                "threshold",
                "baseline_accuracy",
                "reflected_accuracy",
                "below_threshold_baseline",
                "below_threshold_reflected",
                "n_subset",
                "binary_accuracy",
                "binary_specificity",
                "binary_precision",
                "binary_recall",
                "tp",
                "fp",
                "tn",
                "fn",
            ]
        )
        writer.writerow(
            [
                report.n_items,
                report.label_mode.value,
                f"{report.threshold:.4f}",
                _csv_cell(report.baseline_accuracy),
                _csv_cell(report.reflected_accuracy),
                _csv_cell(report.subset.baseline),
                _csv_cell(report.subset.reflected),
                report.subset.n,
                _csv_cell(binary.accuracy) if binary else "NA",
                _csv_cell(binary.specificity) if binary else "NA",
                _csv_cell(binary.precision) if binary else "NA",
                _csv_cell(binary.recall) if binary else "NA",
                binary.counts.tp if binary else "NA",
                binary.counts.fp if binary else "NA",
                binary.counts.tn if binary else "NA",
                binary.counts.fn if binary else "NA",
            ]
        )
