"""Map vision-token embeddings back to their most similar text tokens.

Given a block of vision tokens and a text-token embedding table sharing
the same width, every token is scored by cosine similarity against each
table row and snapped to the argmax row (the implied one-hot selection).
Decoding the surviving indices through the vocabulary yields the key
terms an image contributes, which can then be spliced into a textual
replacement prompt.

All functions are pure over immutable inputs; callers may fan out across
tokens or items freely.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .store import EmbeddingMatrix, Vocabulary

REPLACEMENT_PROMPT_PREFIX = "The image local features of "


class DimensionMismatchError(ValueError):
    pass


class NoKeyTermsError(ValueError):
    pass


@dataclass(frozen=True)
class VisionTokenBlock:
    """All vision tokens exported for one item, one token per row."""

    item_id: str
    tokens: EmbeddingMatrix


@dataclass(frozen=True)
class KeyTermOptions:
    """Filters applied when turning per-token matches into key terms.

    ``min_similarity`` keeps a match only when its cosine similarity is
    at least the threshold; the 0.0 default only drops tokens whose best
    match is negatively correlated. ``drop_non_alphabetic`` discards
    terms that are not plain words (letters, spaces, hyphens,
    apostrophes), which removes garbled subword debris. Matches flagged
    all-zero never become key terms.
    """

    min_similarity: float = 0.0
    drop_non_alphabetic: bool = True
    deduplicate: bool = True


class NearestToken(NamedTuple):
    vocab_index: int
    similarity: float
    all_zero: bool = False


class TokenMatch(NamedTuple):
    token_row: int
    vocab_index: int
    similarity: float


@dataclass(frozen=True)
class KeyTermReport:
    item_id: str
    per_token: tuple[TokenMatch, ...]
    key_terms: tuple[str, ...]


def row_normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """L2-normalize every row; zero rows stay zero."""
    vals = m.values.astype(np.float64)
    norms = np.linalg.norm(vals, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return EmbeddingMatrix((vals / safe).astype(np.float32))


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    return v if norm == 0.0 else v / norm


def similarity_scores(v: np.ndarray, e: EmbeddingMatrix) -> np.ndarray:
    """Cosine similarity between ``v`` and every row of ``e``.

    Zero vectors follow the normalize(0) = 0 convention, so their
    similarities are 0 rather than an error.
    """
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.shape[0] != e.dim:
        raise DimensionMismatchError(
            f"vector has dim {v.shape[0]}, matrix has dim {e.dim}"
        )
    rows = e.values.astype(np.float64)
    row_norms = np.linalg.norm(rows, axis=1)
    safe = np.where(row_norms == 0.0, 1.0, row_norms)
    return (rows @ _unit(v)) / safe


def one_hot(index: int, length: int) -> np.ndarray:
    """The selection vector implied by an argmax: exactly one 1."""
    x = np.zeros(length, dtype=np.float32)
    x[index] = 1.0
    return x


def nearest_token(v: np.ndarray, e: EmbeddingMatrix) -> NearestToken:
    """Index of the most cosine-similar row, ties broken by lowest index.

    When ``v`` is zero (or every row is zero) the similarity landscape
    is identically zero; index 0 is returned with ``all_zero`` set so
    degraded exports do not abort batch runs.
    """
    scores = similarity_scores(v, e)
    index = int(np.argmax(scores))
    all_zero = bool(np.all(scores == 0.0)) and (
        float(np.linalg.norm(v)) == 0.0 or not e.values.any()
    )
    return NearestToken(index, float(scores[index]), all_zero)


def _is_plain_word(term: str) -> bool:
    stripped = term.strip()
    if not stripped or not any(c.isalpha() for c in stripped):
        return False
    return all(c.isalpha() or c in " -'" for c in stripped)


def extract_key_terms(
    block: VisionTokenBlock,
    e: EmbeddingMatrix,
    vocab: Vocabulary,
    opts: KeyTermOptions = KeyTermOptions(),
) -> KeyTermReport:
    """Snap every token to its nearest text token and decode key terms.

    ``per_token`` records every row's match; ``key_terms`` keeps the
    decoded terms surviving the filters, in first-occurrence order.
    """
    if block.tokens.dim != e.dim:
        raise DimensionMismatchError(
            f"token dim {block.tokens.dim} != table dim {e.dim}"
        )
    if len(vocab) != e.rows:
        raise DimensionMismatchError(
            f"vocabulary size {len(vocab)} != table rows {e.rows}"
        )
    # One normalized copy of the table scores every token at once;
    # semantics are identical to per-row nearest_token calls.
    table = e.values.astype(np.float64)
    table_norms = np.linalg.norm(table, axis=1)
    table = table / np.where(table_norms == 0.0, 1.0, table_norms)[:, None]
    tokens = block.tokens.values.astype(np.float64)
    token_norms = np.linalg.norm(tokens, axis=1)
    tokens = tokens / np.where(token_norms == 0.0, 1.0, token_norms)[:, None]
    scores = tokens @ table.T
    indices = np.argmax(scores, axis=1)
    table_all_zero = not e.values.any()

    matches: list[TokenMatch] = []
    terms: list[str] = []
    seen: set[str] = set()
    for row in range(block.tokens.rows):
        index = int(indices[row])
        similarity = float(scores[row, index])
        matches.append(TokenMatch(row, index, similarity))
        all_zero = table_all_zero or token_norms[row] == 0.0
        if all_zero or similarity < opts.min_similarity:
            continue
        term = vocab.terms[index]
        if opts.drop_non_alphabetic and not _is_plain_word(term):
            continue
        if opts.deduplicate:
            if term in seen:
                continue
            seen.add(term)
        terms.append(term)
    return KeyTermReport(
        item_id=block.item_id, per_token=tuple(matches), key_terms=tuple(terms)
    )


def build_replacement_prompt(report: KeyTermReport, question: str) -> str:
    """Format key terms as the textual surrogate for the image."""
    if not report.key_terms:
        raise NoKeyTermsError(f"item {report.item_id!r} has no key terms")
    return f"{REPLACEMENT_PROMPT_PREFIX}{', '.join(report.key_terms)}. {question}"


def save_key_term_reports(
    reports: Iterable[KeyTermReport], path: str | Path
) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for report in reports:
            record = {
                "item_id": report.item_id,
                "key_terms": list(report.key_terms),
                "per_token": [
                    [m.token_row, m.vocab_index, m.similarity]
                    for m in report.per_token
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def load_key_term_reports(path: str | Path) -> list[KeyTermReport]:
    reports = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            reports.append(
                KeyTermReport(
                    item_id=record["item_id"],
                    per_token=tuple(
                        TokenMatch(int(r), int(i), float(s))
                        for r, i, s in record["per_token"]
                    ),
                    key_terms=tuple(record["key_terms"]),
                )
            )
    return reports
