"""Export operations: model tensors out, neutral artifacts in.

Every operation writes its payload plus an ExportManifest recording the
source, the pooling/normalization rules actually applied, dims, and a
checksum per emitted file. Per-input faults (an unreadable image, a term
with no exemplars) become manifest error entries rather than aborting a
batch; defects that poison the whole export (an untokenizable vocabulary
term, NaN scores) raise.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .formats import read_vocabulary, write_emb1, write_prediction_lines
from .manifest import ExportManifest
from .sources import ImageDecodeError, ModelSource, normalize_term

MEAN_POOLING = "mean"
TERM_NORMALIZATION = "underscores_to_spaces"


class ScoreNaNError(ValueError):
    pass


def _manifest(source: ModelSource, kind: str, **kwargs) -> ExportManifest:
    return ExportManifest(source_model=source.model_id, kind=kind, **kwargs)


def export_text_embedding_table(
    source: ModelSource,
    vocab_path: str | Path,
    out_path: str | Path,
    manifest_path: str | Path,
) -> ExportManifest:
    """One token-embedding row per vocabulary term, multi-token terms
    mean-pooled, row order equal to vocabulary order."""
    terms = read_vocabulary(vocab_path)
    rows = np.empty((len(terms), source.e_l), dtype=np.float32)
    for i, term in enumerate(terms):
        token_ids = source.tokenize(term)
        rows[i] = source.token_embedding(token_ids).astype(np.float64).mean(axis=0)
    write_emb1(rows, out_path)
    manifest = _manifest(
        source,
        "text_embeddings",
        pooling=MEAN_POOLING,
        term_normalization=TERM_NORMALIZATION,
        dims={"rows": len(terms), "dim": source.e_l},
        vocab_path=str(vocab_path),
    )
    manifest.add_output(out_path)
    manifest.save(manifest_path)
    return manifest


def export_key_text_encoder(
    source: ModelSource,
    vocab_path: str | Path,
    out_path: str | Path,
    manifest_path: str | Path,
) -> ExportManifest:
    """Raw per-term text-encoder vectors (the consumer normalizes)."""
    terms = read_vocabulary(vocab_path)
    rows = np.stack([source.text_encoder_embedding(t) for t in terms]).astype(np.float32)
    write_emb1(rows, out_path)
    manifest = _manifest(
        source,
        "key_text_encoder",
        term_normalization=TERM_NORMALIZATION,
        dims={"rows": len(terms), "dim": source.e_x},
        vocab_path=str(vocab_path),
    )
    manifest.add_output(out_path)
    manifest.save(manifest_path)
    return manifest


def export_classifier_head(
    source: ModelSource,
    vocab_path: str | Path,
    out_path: str | Path,
    manifest_path: str | Path,
) -> ExportManifest:
    terms = read_vocabulary(vocab_path)
    head = np.asarray(source.classifier_head(), dtype=np.float32)
    if head.shape[0] != len(terms):
        raise ValueError(
            f"classifier head has {head.shape[0]} rows for {len(terms)} terms"
        )
    write_emb1(head, out_path)
    manifest = _manifest(
        source,
        "key_classifier",
        dims={"rows": head.shape[0], "dim": head.shape[1]},
        vocab_path=str(vocab_path),
    )
    manifest.add_output(out_path)
    manifest.save(manifest_path)
    return manifest


def export_exemplar_features(
    source: ModelSource,
    vocab_path: str | Path,
    exemplar_refs: Mapping[str, Sequence[str]],
    out_dir: str | Path,
    manifest_path: str | Path,
) -> ExportManifest:
    """Per-term feature blocks, one ``term_{i:05d}.emb`` per term.

    A term with no exemplar images gets a manifest error entry and no
    file; nothing is silently padded.
    """
    terms = read_vocabulary(vocab_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(
        source,
        "exemplar_features",
        term_normalization=TERM_NORMALIZATION,
        dims={"dim": source.e_x},
        vocab_path=str(vocab_path),
    )
    for i, term in enumerate(terms):
        refs = exemplar_refs.get(term) or exemplar_refs.get(normalize_term(term)) or []
        if not refs:
            manifest.errors.append(f"term {i} ({term!r}): no exemplar images")
            continue
        rows = []
        for ref in refs:
            try:
                rows.append(source.image_feature(ref))
            except ImageDecodeError as exc:
                manifest.errors.append(f"term {i} ({term!r}): {exc}")
        if not rows:
            manifest.errors.append(f"term {i} ({term!r}): all exemplars failed")
            continue
        path = out_dir / f"term_{i:05d}.emb"
        write_emb1(np.stack(rows).astype(np.float32), path)
        manifest.add_output(path)
    manifest.save(manifest_path)
    return manifest


def export_vision_tokens(
    source: ModelSource,
    image_refs: Sequence[str],
    out_dir: str | Path,
    manifest_path: str | Path,
) -> ExportManifest:
    """One EMB1 block of vision-token embeddings per image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(source, "vision_tokens", dims={"dim": source.e_l})
    for i, ref in enumerate(image_refs):
        try:
            tokens = source.vision_tokens(ref)
        except ImageDecodeError as exc:
            manifest.errors.append(f"image {ref!r}: {exc}")
            continue
        manifest.dims["rows"] = int(tokens.shape[0])
        path = out_dir / f"tokens_{i:05d}.emb"
        write_emb1(np.asarray(tokens, dtype=np.float32), path)
        manifest.add_output(path)
    manifest.save(manifest_path)
    return manifest


def _softmax_scores(head: np.ndarray, feature: np.ndarray) -> np.ndarray:
    logits = head.astype(np.float64) @ feature.astype(np.float64)
    if not np.all(np.isfinite(logits)):
        raise ScoreNaNError("non-finite logits")
    shifted = logits - logits.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    if not np.all(np.isfinite(probs)):
        raise ScoreNaNError("non-finite softmax scores")
    if abs(float(probs.sum()) - 1.0) > 1e-4:
        raise ScoreNaNError(f"softmax sums to {probs.sum()}")
    return probs


def export_predictions(
    source: ModelSource,
    image_refs: Sequence[str],
    k: int,
    labels: Mapping[str, Sequence[int]],
    out_path: str | Path,
    manifest_path: str | Path,
    max_confidence: float | None = None,
) -> ExportManifest:
    """Top-k softmax candidates per image, true labels attached.

    Candidate order is descending score with ties broken by ascending
    label index. ``max_confidence`` keeps only items whose top score is
    strictly below it, the subset-sampling protocol for studying
    uncertain predictions.
    """
    head = np.asarray(source.classifier_head(), dtype=np.float32)
    manifest = _manifest(
        source,
        "predictions",
        dims={"k": k, "classes": int(head.shape[0])},
    )
    records = []
    skipped_confident = 0
    for ref in image_refs:
        try:
            feature = source.image_feature(ref)
        except ImageDecodeError as exc:
            manifest.errors.append(f"image {ref!r}: {exc}")
            continue
        probs = _softmax_scores(head, feature)
        order = np.argsort(-probs, kind="stable")[:k]
        candidates = [[int(i), float(probs[i])] for i in order]
        if max_confidence is not None and candidates[0][1] >= max_confidence:
            skipped_confident += 1
            continue
        true_labels = sorted(int(i) for i in labels.get(ref, ()))
        if ref not in labels:
            manifest.errors.append(f"image {ref!r}: no labels provided")
        records.append(
            {"item_id": ref, "candidates": candidates, "true_labels": true_labels}
        )
    write_prediction_lines(records, out_path)
    manifest.dims["items"] = len(records)
    if max_confidence is not None:
        manifest.dims["skipped_above_confidence"] = skipped_confident
    manifest.add_output(out_path)
    manifest.save(manifest_path)
    return manifest
