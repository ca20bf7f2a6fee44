"""Seeded synthetic prediction datasets for desk-scale experiments.

Item composition is stratified, not sampled: exactly round(n * rate)
items get a correct top-1, a true label hidden at a deeper rank, or no
true label among their candidates, so measured rates match the request
to within 1/n. Candidate scores are drawn to look like a top-k softmax
slice (descending, summing below 1) with the top-1 score serving as the
confidence. Everything is a pure function of the seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .store import Candidate, Dataset, LabelMode, PredictionSet, Vocabulary


@dataclass(frozen=True)
class SimulationConfig:
    n_items: int
    seed: int
    vocab_size: int = 1000
    k: int = 5
    top1_accuracy: float = 0.33
    topk_containment: float = 0.75
    confidence_low: float = 0.05
    confidence_high: float = 0.45
    label_mode: LabelMode = LabelMode.STANDARD

    def __post_init__(self) -> None:
        if self.n_items < 0:
            raise ValueError("n_items must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.vocab_size <= self.k:
            raise ValueError("vocab_size must exceed k")
        if not 0.0 <= self.top1_accuracy <= self.topk_containment <= 1.0:
            raise ValueError("need 0 <= top1_accuracy <= topk_containment <= 1")
        if self.k == 1 and self.topk_containment != self.top1_accuracy:
            raise ValueError("with k=1 containment beyond top-1 is impossible")
        if not 0.0 < self.confidence_high < 1.0 or not 0.0 <= self.confidence_low <= self.confidence_high:
            raise ValueError("need 0 <= confidence_low <= confidence_high, 0 < confidence_high < 1")


def generate_vocabulary(size: int) -> Vocabulary:
    width = max(4, len(str(max(size - 1, 0))))
    return Vocabulary(tuple(f"class_{i:0{width}d}" for i in range(size)))


def _true_rank_plan(config: SimulationConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-item true-label rank: 1..k, or 0 for "not contained"."""
    n = config.n_items
    n_top1 = round(n * config.top1_accuracy)
    n_contained = max(round(n * config.topk_containment), n_top1)
    ranks = np.zeros(n, dtype=np.int64)
    ranks[:n_top1] = 1
    for j in range(n_contained - n_top1):
        ranks[n_top1 + j] = 2 + j % (config.k - 1)
    rng.shuffle(ranks)
    return ranks


def _scores(config: SimulationConfig, rng: np.random.Generator) -> list[float]:
    """Descending top-k scores with sum <= 1; index 0 is the confidence."""
    confidence = rng.uniform(config.confidence_low, config.confidence_high)
    scores = [float(confidence)]
    if config.k > 1:
        mass = (1.0 - confidence) * rng.uniform(0.35, 0.85)
        weights = rng.random(config.k - 1)
        weights = np.sort(weights / weights.sum() * mass)[::-1]
        for w in weights:
            scores.append(float(min(w, scores[-1] * 0.999)))
    return scores


def generate_dataset(
    config: SimulationConfig, vocab: Vocabulary | None = None
) -> Dataset:
    rng = np.random.default_rng(config.seed)
    if vocab is None:
        vocab = generate_vocabulary(config.vocab_size)
    ranks = _true_rank_plan(config, rng)
    items = []
    for i in range(config.n_items):
        labels = rng.choice(config.vocab_size, size=config.k, replace=False)
        label_set = set(int(x) for x in labels)
        if ranks[i] > 0:
            true_label = int(labels[ranks[i] - 1])
        else:
            true_label = int(rng.integers(config.vocab_size))
            while true_label in label_set:
                true_label = int(rng.integers(config.vocab_size))
        scores = _scores(config, rng)
        candidates = tuple(
            Candidate(int(label), score) for label, score in zip(labels, scores)
        )
        items.append(
            PredictionSet(
                item_id=f"item_{i:06d}",
                candidates=candidates,
                true_label_indices=frozenset({true_label}),
            )
        )
    return Dataset(
        vocabulary=vocab, items=tuple(items), label_mode=config.label_mode
    )


def truth_categories(ds: Dataset) -> dict[str, frozenset[str]]:
    """Item id -> true category names, the input shape oracles expect."""
    return {
        item.item_id: frozenset(
            ds.vocabulary.terms[i] for i in item.true_label_indices
        )
        for item in ds.items
    }
