"""Export manifests: what was emitted, from where, and its checksum."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .formats import sha256_of

KINDS = (
    "text_embeddings",
    "key_text_encoder",
    "key_classifier",
    "exemplar_features",
    "vision_tokens",
    "predictions",
)


@dataclass
class ExportManifest:
    source_model: str
    kind: str
    pooling: str | None = None
    term_normalization: str | None = None
    dims: dict = field(default_factory=dict)
    vocab_path: str | None = None
    outputs: list[dict] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown export kind {self.kind!r}")

    def add_output(self, path: str | Path) -> None:
        self.outputs.append({"path": str(path), "checksum": sha256_of(path)})

    def save(self, path: str | Path) -> None:
        record = {
            "source_model": self.source_model,
            "kind": self.kind,
            "pooling": self.pooling,
            "term_normalization": self.term_normalization,
            "dims": self.dims,
            "vocab_path": self.vocab_path,
            "outputs": self.outputs,
            "errors": self.errors,
        }
        Path(path).write_text(
            json.dumps(record, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExportManifest":
        record = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(**record)

    def verify_checksums(self) -> bool:
        return all(
            sha256_of(entry["path"]) == entry["checksum"] for entry in self.outputs
        )
