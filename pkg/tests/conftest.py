from __future__ import annotations

from visionreflect.store import Candidate, Dataset, LabelMode, PredictionSet, Vocabulary


def make_item(item_id, pairs, truth=()) -> PredictionSet:
    """Build a PredictionSet from (label_index, score) pairs."""
    return PredictionSet(
        item_id=item_id,
        candidates=tuple(Candidate(ix, sc) for ix, sc in pairs),
        true_label_indices=frozenset(truth),
    )


def make_dataset(terms, items, mode=LabelMode.STANDARD) -> Dataset:
    return Dataset(
        vocabulary=Vocabulary(tuple(terms)), items=tuple(items), label_mode=mode
    )
