"""Training-free vision-to-language connector.

An image feature is scored against a per-term key matrix, the winning
term is selected (softmax followed by one-hot, which reduces to a plain
argmax), and the value matrix emits that term's language-model token
embedding. No parameter is ever learned; the key matrix comes from one
of three sources:

- ``text_encoder``: per-term text-encoder embeddings of a contrastive
  model (rows L2-normalized, cosine scoring);
- ``classifier``: the final logit layer of a classification-trained
  encoder (kept unnormalized, logit scoring);
- ``exemplar``: the normalized mean of per-term exemplar image features.

Both matrices are stored with one row per vocabulary term so they share
the same row index space.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .reverse_embedding import DimensionMismatchError, row_normalize
from .store import (
    EmbeddingMatrix,
    Vocabulary,
    load_embedding_matrix,
    load_vocabulary,
    save_embedding_matrix,
    save_vocabulary,
)

BUNDLE_META_NAME = "meta.json"
BUNDLE_VOCAB_NAME = "vocab.txt"
BUNDLE_KEY_NAME = "w_key.emb"
BUNDLE_VALUE_NAME = "w_value.emb"


class Strategy(str, enum.Enum):
    TEXT_ENCODER = "text_encoder"
    CLASSIFIER = "classifier"
    EXEMPLAR = "exemplar"


def default_normalize_input(strategy: Strategy) -> bool:
    """Cosine regime for normalized strategies, logit regime otherwise."""
    return strategy is not Strategy.CLASSIFIER


class RowCountMismatchError(ValueError):
    pass


class EmptyExemplarSetError(ValueError):
    def __init__(self, term_index: int):
        super().__init__(f"term {term_index} has an empty exemplar set")
        self.term_index = term_index


class AllZeroError(ValueError):
    pass


@dataclass(frozen=True)
class ConnectorWeights:
    w_key: EmbeddingMatrix
    w_value: EmbeddingMatrix
    vocab: Vocabulary

    def __post_init__(self) -> None:
        if not (self.w_key.rows == self.w_value.rows == len(self.vocab)):
            raise RowCountMismatchError(
                f"w_key rows {self.w_key.rows}, w_value rows {self.w_value.rows}, "
                f"vocabulary size {len(self.vocab)} must all match"
            )


@dataclass(frozen=True)
class ConnectorOutput:
    """One selected term: its index, text, value-row embedding, and scores.

    ``embedding`` is the selected value-matrix row itself, never a
    recomputation. ``score`` is the raw pre-activation similarity;
    ``probability`` is its softmax mass at temperature 1, kept for
    diagnostics only (the one-hot makes it irrelevant to selection).
    """

    vocab_index: int
    term: str
    embedding: np.ndarray
    score: float
    probability: float


@dataclass(frozen=True)
class BundleMeta:
    strategy: Strategy
    normalize_input: bool
    e_x: int
    e_l: int
    v: int


def build_value_matrix(
    vocab: Vocabulary, text_embeddings: EmbeddingMatrix
) -> EmbeddingMatrix:
    """Validate the per-term token-embedding table destined for w_value."""
    if text_embeddings.rows != len(vocab):
        raise RowCountMismatchError(
            f"{text_embeddings.rows} embedding rows for {len(vocab)} vocabulary terms"
        )
    return text_embeddings


def build_key_from_text_encoder(term_embeddings: EmbeddingMatrix) -> EmbeddingMatrix:
    """Per-term text-encoder embeddings, L2-normalized for cosine scoring."""
    return row_normalize(term_embeddings)


def build_key_from_classifier(final_layer: EmbeddingMatrix) -> EmbeddingMatrix:
    """A classification head used as-is so logit semantics are preserved."""
    return final_layer


def build_key_from_exemplars(
    per_term_exemplars: Sequence[EmbeddingMatrix | np.ndarray],
) -> EmbeddingMatrix:
    """Row i = L2-normalized mean of term i's exemplar feature rows."""
    rows = []
    dim: int | None = None
    for term_index, block in enumerate(per_term_exemplars):
        vals = block.values if isinstance(block, EmbeddingMatrix) else np.asarray(block)
        vals = np.atleast_2d(np.asarray(vals, dtype=np.float64))
        if vals.shape[0] == 0:
            raise EmptyExemplarSetError(term_index)
        if dim is None:
            dim = vals.shape[1]
        elif vals.shape[1] != dim:
            raise DimensionMismatchError(
                f"term {term_index} exemplars have dim {vals.shape[1]}, expected {dim}"
            )
        mean = vals.mean(axis=0)
        norm = np.linalg.norm(mean)
        rows.append(mean if norm == 0.0 else mean / norm)
    if not rows:
        raise RowCountMismatchError("no exemplar sets given")
    return EmbeddingMatrix(np.asarray(rows, dtype=np.float32))


def softmax(scores: np.ndarray) -> np.ndarray:
    """Numerically stable softmax at temperature 1."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def connector_forward(
    x: np.ndarray, weights: ConnectorWeights, normalize_input: bool = True
) -> ConnectorOutput:
    """Score ``x`` against w_key, pick the argmax term, emit its w_value row.

    Softmax-then-one-hot equals a raw argmax (softmax is monotone), so
    selection works on raw scores; ties resolve to the lowest index.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != weights.w_key.dim:
        raise DimensionMismatchError(
            f"input dim {x.shape[0]} != w_key dim {weights.w_key.dim}"
        )
    norm = np.linalg.norm(x)
    if norm == 0.0:
        raise AllZeroError("input feature vector is all zeros")
    if normalize_input:
        x = x / norm
    scores = weights.w_key.values.astype(np.float64) @ x
    index = int(np.argmax(scores))
    return ConnectorOutput(
        vocab_index=index,
        term=weights.vocab.terms[index],
        embedding=weights.w_value.row(index),
        score=float(scores[index]),
        probability=float(softmax(scores)[index]),
    )


def connector_forward_block(
    xs: EmbeddingMatrix | np.ndarray,
    weights: ConnectorWeights,
    normalize_input: bool = True,
) -> list[ConnectorOutput]:
    """Elementwise forward over the rows of ``xs``, order-preserving."""
    vals = xs.values if isinstance(xs, EmbeddingMatrix) else np.atleast_2d(np.asarray(xs))
    outputs = []
    for row_index in range(vals.shape[0]):
        try:
            outputs.append(connector_forward(vals[row_index], weights, normalize_input))
        except (DimensionMismatchError, AllZeroError) as exc:
            raise type(exc)(f"row {row_index}: {exc}") from exc
    return outputs


def save_bundle(
    weights: ConnectorWeights,
    meta: BundleMeta,
    directory: str | Path,
) -> None:
    """Write vocab, both matrices, and meta.json into a bundle directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_vocabulary(weights.vocab, directory / BUNDLE_VOCAB_NAME)
    save_embedding_matrix(weights.w_key, directory / BUNDLE_KEY_NAME)
    save_embedding_matrix(weights.w_value, directory / BUNDLE_VALUE_NAME)
    record = {
        "strategy": meta.strategy.value,
        "normalize_input": meta.normalize_input,
        "e_x": meta.e_x,
        "e_l": meta.e_l,
        "v": meta.v,
    }
    (directory / BUNDLE_META_NAME).write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_bundle(directory: str | Path) -> tuple[ConnectorWeights, BundleMeta]:
    directory = Path(directory)
    record = json.loads((directory / BUNDLE_META_NAME).read_text(encoding="utf-8"))
    vocab = load_vocabulary(directory / BUNDLE_VOCAB_NAME)
    weights = ConnectorWeights(
        w_key=load_embedding_matrix(directory / BUNDLE_KEY_NAME),
        w_value=load_embedding_matrix(directory / BUNDLE_VALUE_NAME),
        vocab=vocab,
    )
    meta = BundleMeta(
        strategy=Strategy(record["strategy"]),
        normalize_input=bool(record["normalize_input"]),
        e_x=int(record["e_x"]),
        e_l=int(record["e_l"]),
        v=int(record["v"]),
    )
    if meta.v != len(vocab) or meta.e_x != weights.w_key.dim or meta.e_l != weights.w_value.dim:
        raise RowCountMismatchError("bundle metadata does not match stored matrices")
    return weights, meta


def make_bundle_meta(
    weights: ConnectorWeights,
    strategy: Strategy,
    normalize_input: bool | None = None,
) -> BundleMeta:
    if normalize_input is None:
        normalize_input = default_normalize_input(strategy)
    return BundleMeta(
        strategy=strategy,
        normalize_input=normalize_input,
        e_x=weights.w_key.dim,
        e_l=weights.w_value.dim,
        v=len(weights.vocab),
    )
