"""Writers for the neutral artifact formats.

Deliberately self-contained: the exporter emits the EMB1 and JSON Lines
formats from their byte-level definitions rather than importing the
consumer package, so the two implementations cross-check each other.

EMB1: ``b"EMB1" | rows:u32le | dim:u32le | rows*dim float32le`` row-major.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

EMB1_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sII")


def write_emb1(values: np.ndarray, path: str | Path) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
        raise ValueError(f"EMB1 needs a non-empty 2-D matrix, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("refusing to write non-finite values")
    rows, dim = values.shape
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(EMB1_MAGIC, rows, dim))
        fh.write(values.tobytes())


def write_prediction_lines(
    records: Iterable[Mapping], path: str | Path
) -> None:
    """One ``{"item_id", "candidates", "true_labels"}`` object per line."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def write_vocabulary(terms: Sequence[str], path: str | Path) -> None:
    Path(path).write_text("\n".join(terms) + "\n", encoding="utf-8")


def read_vocabulary(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    if text.endswith("\n"):
        text = text[:-1]
    terms = text.split("\n")
    for i, term in enumerate(terms):
        if not term.strip():
            raise ValueError(f"{path}: empty term at line {i}")
    return terms


def sha256_of(path: str | Path) -> str:
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return f"sha256:{digest}"
