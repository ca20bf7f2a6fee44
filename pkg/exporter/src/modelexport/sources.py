"""Model sources the exporter can read from.

A source exposes exactly what the exports need: a term tokenizer, the
token embedding table (width ``e_l``), per-term text-encoder vectors and
image features (width ``e_x``), a classifier head, and per-image vision
tokens. Two concrete sources:

- ``SyntheticModelSource``: fully deterministic fake model, keyed by a
  seed. It makes every export testable at desk scale with no checkpoint
  or network access.
- ``TorchStateDictSource``: reads real tensors out of a ``torch.save``'d
  state dict plus a sidecar tokenizer JSON (term -> token ids). This is
  the only place an ML framework is touched, and only when requested.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Protocol

import numpy as np


class UnknownModelError(ValueError):
    pass


class TokenizationFailure(ValueError):
    def __init__(self, term: str, detail: str = ""):
        super().__init__(f"cannot tokenize term {term!r}{': ' + detail if detail else ''}")
        self.term = term


class ImageDecodeError(ValueError):
    def __init__(self, image_ref: str, detail: str = ""):
        super().__init__(f"cannot read image {image_ref!r}{': ' + detail if detail else ''}")
        self.image_ref = image_ref


def normalize_term(term: str) -> str:
    """Category names use underscores in some label sets; emit spaces."""
    return term.replace("_", " ").strip()


class ModelSource(Protocol):
    model_id: str
    e_l: int
    e_x: int

    def tokenize(self, term: str) -> list[int]: ...

    def token_embedding(self, token_ids: list[int]) -> np.ndarray: ...

    def text_encoder_embedding(self, term: str) -> np.ndarray: ...

    def classifier_head(self) -> np.ndarray: ...

    def image_feature(self, image_ref: str) -> np.ndarray: ...

    def vision_tokens(self, image_ref: str) -> np.ndarray: ...


def _keyed_rng(*parts) -> np.random.Generator:
    material = "|".join(str(p) for p in parts).encode("utf-8")
    seed = int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "big")
    return np.random.default_rng(seed)


class SyntheticModelSource:
    """Deterministic stand-in for a real checkpoint.

    Token ids come from hashing whitespace pieces of the (normalized)
    term into a fixed token vocabulary; all tensors are seeded normals,
    so identical ids and refs always produce identical bytes.
    """

    def __init__(
        self,
        seed: int,
        e_l: int = 64,
        e_x: int = 48,
        token_vocab_size: int = 5000,
        grid_tokens: int = 576,
        num_classes: int = 1000,
    ):
        self.model_id = f"synthetic:seed={seed}"
        self.seed = seed
        self.e_l = e_l
        self.e_x = e_x
        self.token_vocab_size = token_vocab_size
        self.grid_tokens = grid_tokens
        self.num_classes = num_classes
        self._embedding_table = (
            _keyed_rng(seed, "token_table")
            .standard_normal((token_vocab_size, e_l))
            .astype(np.float32)
        )
        self._head = (
            _keyed_rng(seed, "classifier_head")
            .standard_normal((num_classes, e_x))
            .astype(np.float32)
        )

    def tokenize(self, term: str) -> list[int]:
        pieces = normalize_term(term).lower().split()
        if not pieces:
            raise TokenizationFailure(term, "no word pieces")
        return [
            int.from_bytes(hashlib.blake2b(p.encode(), digest_size=4).digest(), "big")
            % self.token_vocab_size
            for p in pieces
        ]

    def token_embedding(self, token_ids: list[int]) -> np.ndarray:
        return self._embedding_table[np.asarray(token_ids, dtype=np.int64)]

    def text_encoder_embedding(self, term: str) -> np.ndarray:
        rng = _keyed_rng(self.seed, "text_encoder", normalize_term(term).lower())
        return rng.standard_normal(self.e_x).astype(np.float32)

    def classifier_head(self) -> np.ndarray:
        return self._head

    def image_feature(self, image_ref: str) -> np.ndarray:
        rng = _keyed_rng(self.seed, "image_feature", image_ref)
        return rng.standard_normal(self.e_x).astype(np.float32)

    def vision_tokens(self, image_ref: str) -> np.ndarray:
        rng = _keyed_rng(self.seed, "vision_tokens", image_ref)
        return rng.standard_normal((self.grid_tokens, self.e_l)).astype(np.float32)


class TorchStateDictSource:
    """Tensors from a saved state dict, tokenization from a sidecar JSON.

    The sidecar maps each vocabulary term to its token id list (produced
    by whatever tokenizer belongs to the checkpoint); this keeps
    tokenizer internals out of the exporter. Only the keys actually
    requested need to exist in the state dict.
    """

    def __init__(
        self,
        path: str | Path,
        tokenizer_path: str | Path | None = None,
        embedding_key: str = "embedding.weight",
        head_key: str = "head.weight",
    ):
        try:
            import torch
        except ImportError as exc:
            raise UnknownModelError("torch is not installed") from exc
        self.model_id = f"torch:{path}"
        self._state = torch.load(path, map_location="cpu", weights_only=True)
        self._embedding_key = embedding_key
        self._head_key = head_key
        self._token_map: dict[str, list[int]] = {}
        if tokenizer_path is not None:
            raw = json.loads(Path(tokenizer_path).read_text(encoding="utf-8"))
            self._token_map = {k: [int(i) for i in v] for k, v in raw.items()}
        table = self._tensor(embedding_key, required=False)
        head = self._tensor(head_key, required=False)
        self.e_l = int(table.shape[1]) if table is not None else 0
        self.e_x = int(head.shape[1]) if head is not None else 0

    def _tensor(self, key: str, required: bool = True):
        if key not in self._state:
            if required:
                raise UnknownModelError(f"state dict has no tensor {key!r}")
            return None
        return self._state[key]

    def tokenize(self, term: str) -> list[int]:
        normalized = normalize_term(term)
        ids = self._token_map.get(normalized) or self._token_map.get(term)
        if not ids:
            raise TokenizationFailure(term, "not in sidecar tokenizer map")
        return ids

    def token_embedding(self, token_ids: list[int]) -> np.ndarray:
        table = self._tensor(self._embedding_key)
        return table[token_ids].numpy().astype(np.float32)

    def text_encoder_embedding(self, term: str) -> np.ndarray:
        raise UnknownModelError("state-dict source has no text encoder")

    def classifier_head(self) -> np.ndarray:
        return self._tensor(self._head_key).numpy().astype(np.float32)

    def image_feature(self, image_ref: str) -> np.ndarray:
        raise ImageDecodeError(image_ref, "state-dict source cannot embed images")

    def vision_tokens(self, image_ref: str) -> np.ndarray:
        raise ImageDecodeError(image_ref, "state-dict source has no vision tower")


def resolve_source(model_id: str) -> ModelSource:
    """Build a source from an id like ``synthetic:seed=1,e_l=64``."""
    kind, _, rest = model_id.partition(":")
    options = {}
    if rest:
        for part in rest.split(","):
            key, _, value = part.partition("=")
            options[key.strip()] = value.strip()
    if kind == "synthetic":
        try:
            return SyntheticModelSource(
                seed=int(options.pop("seed")),
                e_l=int(options.pop("e_l", 64)),
                e_x=int(options.pop("e_x", 48)),
                token_vocab_size=int(options.pop("token_vocab", 5000)),
                grid_tokens=int(options.pop("grid", 576)),
                num_classes=int(options.pop("classes", 1000)),
            )
        except KeyError as exc:
            raise UnknownModelError(f"synthetic source needs {exc}") from exc
    if kind == "torch":
        if "path" not in options:
            raise UnknownModelError("torch source needs path=<state dict>")
        return TorchStateDictSource(
            options["path"],
            tokenizer_path=options.get("tokenizer"),
            embedding_key=options.get("embedding_key", "embedding.weight"),
            head_key=options.get("head_key", "head.weight"),
        )
    raise UnknownModelError(f"unknown model id {model_id!r}")
