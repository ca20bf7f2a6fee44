"""On-disk formats and in-memory data model.

Owns the three artifact formats everything else consumes:

- EMB1 matrix files: ``b"EMB1" | rows:u32le | dim:u32le | rows*dim float32le``,
  row-major, no padding.
- Vocabulary files: UTF-8 text, LF-separated, one term per line.
- Prediction files: JSON Lines, one object per item with keys
  ``item_id``, ``candidates`` (pairs of ``[label_index, score]``) and
  ``true_labels``.

All loaded objects are immutable and safe to share across threads.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

EMB1_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")

# Slack allowed when checking that top-k scores form a softmax slice.
SCORE_SUM_TOLERANCE = 1e-6


class StoreError(Exception):
    """Base class for data-format and validation failures."""


class MalformedHeaderError(StoreError):
    def __init__(self, path: str, offset: int, detail: str):
        super().__init__(f"{path}: malformed EMB1 header at byte {offset}: {detail}")
        self.offset = offset


class TruncatedDataError(StoreError):
    def __init__(self, path: str, offset: int, expected: int):
        super().__init__(
            f"{path}: truncated at byte {offset}, expected {expected} bytes total"
        )
        self.offset = offset
        self.expected = expected


class NonFiniteValueError(StoreError):
    def __init__(self, path: str, offset: int, row: int, col: int):
        super().__init__(
            f"{path}: non-finite value at row {row}, col {col} (byte offset {offset})"
        )
        self.offset = offset
        self.row = row
        self.col = col


class EmptyTermError(StoreError):
    def __init__(self, path: str, line: int):
        super().__init__(f"{path}: empty or whitespace-only term at line {line}")
        self.line = line


class InvalidUtf8Error(StoreError):
    def __init__(self, path: str, offset: int):
        super().__init__(f"{path}: invalid UTF-8 at byte {offset}")
        self.offset = offset


class MalformedRecordError(StoreError):
    def __init__(self, path: str, line: int, detail: str):
        super().__init__(f"{path}: malformed record at line {line}: {detail}")
        self.line = line


class BadLabelIndexError(StoreError):
    def __init__(self, item_id: str, index: int, vocab_size: int):
        super().__init__(
            f"item {item_id!r}: label index {index} out of range for vocabulary "
            f"of size {vocab_size}"
        )
        self.item_id = item_id
        self.index = index


class UnsortedCandidatesError(StoreError):
    def __init__(self, item_id: str, position: int):
        super().__init__(
            f"item {item_id!r}: candidates not sorted by descending score "
            f"(tie-broken by ascending label index) at position {position}"
        )
        self.item_id = item_id
        self.position = position


class BadScoreError(StoreError):
    def __init__(self, item_id: str, detail: str):
        super().__init__(f"item {item_id!r}: {detail}")
        self.item_id = item_id


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense float32 matrix whose rows are token/term embeddings."""

    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {vals.shape}")
        if vals.shape[0] < 1 or vals.shape[1] < 1:
            raise ValueError(f"embedding matrix must be at least 1x1, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            bad = np.argwhere(~np.isfinite(vals))[0]
            raise ValueError(f"non-finite value at row {bad[0]}, col {bad[1]}")
        if vals is self.values and vals.flags.writeable:
            vals = vals.copy()  # do not lock the caller's array in place
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def row(self, i: int) -> np.ndarray:
        return self.values[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(
                self.values.view(np.uint32), other.values.view(np.uint32)
            )
        )


@dataclass(frozen=True)
class Vocabulary:
    """Ordered list of text terms; row index space shared with matrices."""

    terms: tuple[str, ...]

    def __post_init__(self) -> None:
        for i, term in enumerate(self.terms):
            if not term or not term.strip():
                raise ValueError(f"term {i} is empty or whitespace-only")

    def __len__(self) -> int:
        return len(self.terms)

    def duplicates(self) -> dict[str, list[int]]:
        """Terms appearing more than once, mapped to their indices."""
        seen: dict[str, list[int]] = {}
        for i, term in enumerate(self.terms):
            seen.setdefault(term, []).append(i)
        return {t: idx for t, idx in seen.items() if len(idx) > 1}


class Candidate(NamedTuple):
    label_index: int
    score: float


class LabelMode(str, enum.Enum):
    STANDARD = "standard"
    REAL = "real"


@dataclass(frozen=True)
class PredictionSet:
    """One item's top-k candidate labels with descending softmax scores."""

    item_id: str
    candidates: tuple[Candidate, ...]
    true_label_indices: frozenset[int]

    def top1_label(self) -> int:
        if not self.candidates:
            raise ValueError(f"item {self.item_id!r} has no candidates")
        return self.candidates[0].label_index


@dataclass(frozen=True)
class Dataset:
    vocabulary: Vocabulary
    items: tuple[PredictionSet, ...]
    label_mode: LabelMode = LabelMode.STANDARD
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __len__(self) -> int:
        return len(self.items)


def load_embedding_matrix(path: str | Path) -> EmbeddingMatrix:
    """Read an EMB1 file, validating header, length, and finiteness."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise MalformedHeaderError(str(path), len(data), "file shorter than header")
    magic, rows, dim = _HEADER.unpack_from(data, 0)
    if magic != EMB1_MAGIC:
        raise MalformedHeaderError(str(path), 0, f"bad magic {magic!r}")
    if rows < 1:
        raise MalformedHeaderError(str(path), 4, "rows must be >= 1")
    if dim < 1:
        raise MalformedHeaderError(str(path), 8, "dim must be >= 1")
    expected = _HEADER.size + 4 * rows * dim
    if len(data) < expected:
        raise TruncatedDataError(str(path), len(data), expected)
    if len(data) > expected:
        raise MalformedHeaderError(
            str(path), expected, f"{len(data) - expected} trailing bytes"
        )
    values = np.frombuffer(
        data, dtype="<f4", count=rows * dim, offset=_HEADER.size
    ).reshape(rows, dim)
    finite = np.isfinite(values)
    if not finite.all():
        r, c = map(int, np.argwhere(~finite)[0])
        offset = _HEADER.size + 4 * (r * dim + c)
        raise NonFiniteValueError(str(path), offset, r, c)
    return EmbeddingMatrix(values)


def save_embedding_matrix(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write an EMB1 file; load(save(m)) is bit-identical to m."""
    path = Path(path)
    header = _HEADER.pack(EMB1_MAGIC, matrix.rows, matrix.dim)
    body = np.ascontiguousarray(matrix.values, dtype="<f4").tobytes()
    path.write_bytes(header + body)


def load_vocabulary(path: str | Path) -> Vocabulary:
    """Read a one-term-per-line UTF-8 vocabulary file.

    Line i (0-based) becomes term i. A single trailing newline is
    ignored. Duplicate terms are accepted but logged, since real
    category lists contain near-duplicates; index-based lookups always
    resolve ties to the lowest index.
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidUtf8Error(str(path), exc.start) from exc
    if text.endswith("\n"):
        text = text[:-1]
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if not line.strip():
            raise EmptyTermError(str(path), i)
    vocab = Vocabulary(tuple(lines))
    dupes = vocab.duplicates()
    if dupes:
        logger.warning(
            "%s: %d duplicate term(s): %s",
            path,
            len(dupes),
            ", ".join(sorted(dupes)[:5]),
        )
    return vocab


def save_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text("\n".join(vocab.terms) + "\n", encoding="utf-8")


def _validate_item(item: PredictionSet, vocab_size: int) -> None:
    total = 0.0
    prev: Candidate | None = None
    for pos, cand in enumerate(item.candidates):
        if not 0 <= cand.label_index < vocab_size:
            raise BadLabelIndexError(item.item_id, cand.label_index, vocab_size)
        if not math.isfinite(cand.score) or not 0.0 <= cand.score <= 1.0:
            raise BadScoreError(
                item.item_id, f"score {cand.score!r} at position {pos} not in [0, 1]"
            )
        if prev is not None:
            descending = cand.score < prev.score or (
                cand.score == prev.score and cand.label_index > prev.label_index
            )
            if not descending:
                raise UnsortedCandidatesError(item.item_id, pos)
        total += cand.score
        prev = cand
    if total > 1.0 + SCORE_SUM_TOLERANCE:
        raise BadScoreError(item.item_id, f"scores sum to {total}, above 1")
    for idx in item.true_label_indices:
        if not 0 <= idx < vocab_size:
            raise BadLabelIndexError(item.item_id, idx, vocab_size)


def _parse_prediction_line(path: str, line_no: int, line: str) -> PredictionSet:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedRecordError(path, line_no, exc.msg) from exc
    if not isinstance(record, dict):
        raise MalformedRecordError(path, line_no, "record is not an object")
    try:
        item_id = record["item_id"]
        candidates = record["candidates"]
        true_labels = record["true_labels"]
    except KeyError as exc:
        raise MalformedRecordError(path, line_no, f"missing key {exc}") from exc
    if not isinstance(item_id, str) or not item_id:
        raise MalformedRecordError(path, line_no, "item_id must be a non-empty string")

    def as_index(value):
        if isinstance(value, bool) or not isinstance(value, int):
            raise MalformedRecordError(
                path, line_no, f"label index {value!r} is not an integer"
            )
        return value

    cands = []
    try:
        pairs = [(ix, sc) for ix, sc in candidates]
    except (TypeError, ValueError) as exc:
        raise MalformedRecordError(path, line_no, str(exc)) from exc
    for ix, sc in pairs:
        if isinstance(sc, bool) or not isinstance(sc, (int, float)):
            raise MalformedRecordError(path, line_no, f"score {sc!r} is not a number")
        cands.append(Candidate(as_index(ix), float(sc)))
    if not isinstance(true_labels, list):
        raise MalformedRecordError(path, line_no, "true_labels must be a list")
    truth = frozenset(as_index(ix) for ix in true_labels)
    return PredictionSet(
        item_id=item_id, candidates=tuple(cands), true_label_indices=truth
    )


def load_dataset(
    pred_path: str | Path,
    vocab: Vocabulary,
    label_mode: LabelMode = LabelMode.STANDARD,
) -> Dataset:
    """Read and validate a prediction JSONL file against a vocabulary.

    Items are returned in file order. Every record either loads or
    raises exactly one typed error naming the offending item. Items with
    an empty true-label set are legal ("unlabeled under this label
    mode") and are surfaced in ``Dataset.warnings``.
    """
    path = Path(pred_path)
    items: list[PredictionSet] = []
    warnings: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            item = _parse_prediction_line(str(path), line_no, line)
            _validate_item(item, len(vocab))
            if not item.true_label_indices:
                warnings.append(f"item {item.item_id!r} has no true labels")
            items.append(item)
    if warnings:
        logger.warning("%s: %d unlabeled item(s)", path, len(warnings))
    return Dataset(
        vocabulary=vocab,
        items=tuple(items),
        label_mode=label_mode,
        warnings=tuple(warnings),
    )


def save_predictions(items: Iterable[PredictionSet], path: str | Path) -> None:
    """Write items as prediction JSONL, one object per line."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for item in items:
            record = {
                "item_id": item.item_id,
                "candidates": [[c.label_index, c.score] for c in item.candidates],
                "true_labels": sorted(item.true_label_indices),
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def matrix_from_rows(rows: Sequence[Sequence[float]]) -> EmbeddingMatrix:
    """Convenience constructor from nested sequences (mostly for tests)."""
    return EmbeddingMatrix(np.asarray(rows, dtype=np.float32))
