"""Uncertainty-gated sequential verification of top-k predictions.

An item's top-1 softmax score is its confidence. Items at or above the
policy threshold keep their top-1 label untouched; items strictly below
it are re-examined by walking the candidates from rank 1 upward, asking
a verifier one category at a time. The first confirmed candidate wins.
If every candidate is rejected, the item falls back to its top-1 label
and the trace is flagged exhausted.

Ground truth never crosses the verifier interface: a query carries only
the item id, the category, and the rendered prompt.
"""
from __future__ import annotations

import csv
import enum
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .store import Dataset, PredictionSet, Vocabulary
from .verifiers import (
    Answer,
    Verdict,
    VerdictCache,
    Verifier,
    VerifierFailure,
    VerifierQuery,
)

DEFAULT_PROMPT_PATTERN = "Does the picture have {article} {category}?"

_VOWELS = frozenset("aeiou")
_CATEGORY_SLOT_RE = re.compile(r"\{category\}")


class EmptyCandidatesError(ValueError):
    pass


class EmptyCategoryError(ValueError):
    pass


class Fallback(str, enum.Enum):
    TOP1 = "top1"


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt pattern with ``{article}`` and ``{category}`` placeholders."""

    pattern: str = DEFAULT_PROMPT_PATTERN

    def __post_init__(self) -> None:
        slots = len(_CATEGORY_SLOT_RE.findall(self.pattern))
        if slots != 1:
            raise ValueError(
                f"pattern must contain {{category}} exactly once, found {slots}"
            )


@dataclass(frozen=True)
class ReflectionPolicy:
    """Knobs of the verification stage.

    ``threshold`` gates on confidence strictly below it. ``repetition``
    repeats the category mention inside the prompt, which keeps small
    verifier models on-instruction. ``article_overrides`` patches the
    vowel heuristic for irregular category names ("hour", "unicycle").
    """

    threshold: float
    max_rank: int = 5
    template: PromptTemplate = PromptTemplate()
    fallback: Fallback = Fallback.TOP1
    repetition: int = 1
    article_overrides: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.max_rank < 1:
            raise ValueError(f"max_rank must be >= 1, got {self.max_rank}")
        if self.repetition < 1:
            raise ValueError(f"repetition must be >= 1, got {self.repetition}")


@dataclass(frozen=True)
class ReflectionStep:
    rank: int
    category: str
    prompt: str
    verdict: Verdict


@dataclass(frozen=True)
class ReflectionTrace:
    """Full record of one item's pass through the pipeline."""

    item_id: str
    gated: bool
    confidence: float
    steps: tuple[ReflectionStep, ...]
    final_label_index: int
    exhausted: bool
    failed: bool = False
    error: str | None = None


def confidence_score(p: PredictionSet) -> float:
    """Maximum softmax probability, i.e. the top-1 score."""
    if not p.candidates:
        raise EmptyCandidatesError(f"item {p.item_id!r} has no candidates")
    return p.candidates[0].score


def should_reflect(confidence: float, policy: ReflectionPolicy) -> bool:
    """Gate rule: reflect only strictly below the threshold."""
    return confidence < policy.threshold


def article_for(category: str, overrides: Mapping[str, str] | None = None) -> str:
    """"an" before a vowel-initial category, "a" otherwise.

    The first-letter heuristic is wrong for a handful of English words;
    overrides patch those per vocabulary.
    """
    if overrides and category in overrides:
        return overrides[category]
    return "an" if category[:1].lower() in _VOWELS else "a"


def render_prompt(category: str, policy: ReflectionPolicy) -> str:
    if not category or not category.strip():
        raise EmptyCategoryError("category is empty")
    mention = ", ".join([category] * policy.repetition)
    return policy.template.pattern.format(
        article=article_for(category, policy.article_overrides), category=mention
    )


def verify_candidates(
    p: PredictionSet,
    verifier: Verifier,
    policy: ReflectionPolicy,
    vocab: Vocabulary,
    cache: VerdictCache | None = None,
) -> ReflectionTrace:
    """Run the gate and, if it opens, the sequential verification loop.

    Ranks are examined in order 1..min(k, max_rank); a Yes stops the
    loop, No and NotSure both move on. A verifier failure marks the item
    failed (keeping the steps taken) so a batch never aborts.
    """
    confidence = confidence_score(p)
    top1 = p.top1_label()
    if not should_reflect(confidence, policy):
        return ReflectionTrace(
            item_id=p.item_id,
            gated=False,
            confidence=confidence,
            steps=(),
            final_label_index=top1,
            exhausted=False,
        )
    steps: list[ReflectionStep] = []
    for rank, candidate in enumerate(p.candidates[: policy.max_rank], start=1):
        category = vocab.terms[candidate.label_index]
        prompt = render_prompt(category, policy)
        verdict = cache.get(p.item_id, rank) if cache is not None else None
        if verdict is None:
            try:
                verdict = verifier.verify(
                    VerifierQuery(item_id=p.item_id, category=category, prompt=prompt)
                )
            except VerifierFailure as exc:
                return ReflectionTrace(
                    item_id=p.item_id,
                    gated=True,
                    confidence=confidence,
                    steps=tuple(steps),
                    final_label_index=top1,
                    exhausted=False,
                    failed=True,
                    error=f"rank {rank}: {exc}",
                )
            if cache is not None:
                cache.put(p.item_id, rank, verdict)
        steps.append(ReflectionStep(rank, category, prompt, verdict))
        if verdict.answer is Answer.YES:
            return ReflectionTrace(
                item_id=p.item_id,
                gated=True,
                confidence=confidence,
                steps=tuple(steps),
                final_label_index=candidate.label_index,
                exhausted=False,
            )
    return ReflectionTrace(
        item_id=p.item_id,
        gated=True,
        confidence=confidence,
        steps=tuple(steps),
        final_label_index=top1,
        exhausted=True,
    )


def _trace_one(
    item: PredictionSet,
    verifier: Verifier,
    policy: ReflectionPolicy,
    vocab: Vocabulary,
    cache: VerdictCache | None,
) -> ReflectionTrace:
    try:
        return verify_candidates(item, verifier, policy, vocab, cache)
    except EmptyCandidatesError as exc:
        return ReflectionTrace(
            item_id=item.item_id,
            gated=False,
            confidence=0.0,
            steps=(),
            final_label_index=-1,
            exhausted=False,
            failed=True,
            error=str(exc),
        )


def run_pipeline(
    ds: Dataset,
    verifier: Verifier,
    policy: ReflectionPolicy,
    concurrency: int = 1,
    cache: VerdictCache | None = None,
) -> list[ReflectionTrace]:
    """One trace per item, sorted by item_id.

    Items are independent; with ``concurrency`` > 1 they are processed
    in a thread pool. Per-item step order stays strictly sequential, and
    keyed verifier randomness makes the output independent of
    scheduling.
    """
    if concurrency <= 1:
        traces = [
            _trace_one(item, verifier, policy, ds.vocabulary, cache)
            for item in ds.items
        ]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            traces = list(
                pool.map(
                    lambda item: _trace_one(item, verifier, policy, ds.vocabulary, cache),
                    ds.items,
                )
            )
    traces.sort(key=lambda t: t.item_id)
    return traces


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    accuracy: float
    fraction_reflected: float
    queries_issued: int


def sweep_thresholds(
    ds: Dataset,
    verifier: Verifier,
    thresholds: Sequence[float],
    policy: ReflectionPolicy | None = None,
    cache: VerdictCache | None = None,
    concurrency: int = 1,
) -> list[SweepRow]:
    """Re-run the gate at each threshold, reusing verdicts across rows.

    Verdicts are cached per (item_id, rank), so the verifier is queried
    at most once per pair over the whole sweep. ``queries_issued`` counts
    the verdicts a given threshold consults, which is nondecreasing in
    the threshold by construction of the gate.
    """
    if list(thresholds) != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    from .evaluation import top1_accuracy  # local import to avoid a cycle

    policy = policy if policy is not None else ReflectionPolicy(threshold=0.0)
    cache = cache if cache is not None else VerdictCache()
    rows = []
    for threshold in thresholds:
        traces = run_pipeline(
            ds,
            verifier,
            replace(policy, threshold=threshold),
            concurrency=concurrency,
            cache=cache,
        )
        gated = sum(1 for t in traces if t.gated)
        rows.append(
            SweepRow(
                threshold=threshold,
                accuracy=top1_accuracy(traces, ds),
                fraction_reflected=gated / len(traces) if traces else 0.0,
                queries_issued=sum(len(t.steps) for t in traces),
            )
        )
    return rows


def _trace_to_record(trace: ReflectionTrace) -> dict:
    return {
        "item_id": trace.item_id,
        "gated": trace.gated,
        "confidence": trace.confidence,
        "steps": [
            {
                "rank": s.rank,
                "category": s.category,
                "prompt": s.prompt,
                "verdict": {
                    "answer": s.verdict.answer.value,
                    "raw_text": s.verdict.raw_text,
                    "parse_miss": s.verdict.parse_miss,
                },
            }
            for s in trace.steps
        ],
        "final_label_index": trace.final_label_index,
        "exhausted": trace.exhausted,
        "failed": trace.failed,
        "error": trace.error,
    }


def save_traces(traces: Iterable[ReflectionTrace], path: str | Path) -> None:
    """Write traces as JSON Lines sorted by item_id (the file contract)."""
    ordered = sorted(traces, key=lambda t: t.item_id)
    with Path(path).open("w", encoding="utf-8") as fh:
        for trace in ordered:
            fh.write(
                json.dumps(
                    _trace_to_record(trace), ensure_ascii=False, separators=(",", ":")
                )
            )
            fh.write("\n")


def load_traces(path: str | Path) -> list[ReflectionTrace]:
    traces = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            steps = tuple(
                ReflectionStep(
                    rank=int(s["rank"]),
                    category=s["category"],
                    prompt=s["prompt"],
                    verdict=Verdict(
                        Answer(s["verdict"]["answer"]),
                        s["verdict"]["raw_text"],
                        bool(s["verdict"].get("parse_miss", False)),
                    ),
                )
                for s in record["steps"]
            )
            traces.append(
                ReflectionTrace(
                    item_id=record["item_id"],
                    gated=bool(record["gated"]),
                    confidence=float(record["confidence"]),
                    steps=steps,
                    final_label_index=int(record["final_label_index"]),
                    exhausted=bool(record["exhausted"]),
                    failed=bool(record.get("failed", False)),
                    error=record.get("error"),
                )
            )
    return traces


def save_sweep_csv(rows: Iterable[SweepRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "accuracy", "fraction_reflected", "queries_issued"])
        for row in rows:
            writer.writerow(
                [
                    f"{row.threshold:.4f}",
                    f"{row.accuracy:.4f}",
                    f"{row.fraction_reflected:.4f}",
                    row.queries_issued,
                ]
            )
