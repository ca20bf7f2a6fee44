"""Verifier implementations and free-text verdict parsing.

A verifier answers one yes/no/not-sure question about one candidate
category at a time. The query deliberately carries only the item id,
the category, and the rendered prompt, so no ground-truth information
can reach a verifier through this interface.

Three implementations cover desk-scale work:

- ``ScriptedVerifier``: exact (item_id, category) lookup table, the test
  double and the replay half of record/replay.
- ``StochasticOracle``: seeded simulator parameterized by the binary
  discriminatory rates (recall/specificity) of a real verifier; the
  randomness is keyed by (seed, item_id, category) so verdicts never
  depend on arrival order or thread scheduling.
- ``RemoteVerifier``: HTTP client for a live verdict service, with
  idempotent retries for transport faults.
"""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import random
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Protocol

import requests

logger = logging.getLogger(__name__)


class Answer(str, enum.Enum):
    YES = "yes"
    NO = "no"
    NOT_SURE = "not_sure"


@dataclass(frozen=True)
class Verdict:
    answer: Answer
    raw_text: str
    parse_miss: bool = False


@dataclass(frozen=True)
class VerifierQuery:
    """Everything a verifier is allowed to see about one candidate."""

    item_id: str
    category: str
    prompt: str


class Verifier(Protocol):
    def verify(self, query: VerifierQuery) -> Verdict: ...


class VerifierFailure(Exception):
    """A verifier could not produce a verdict (transport/service fault)."""

    def __init__(self, cause: str, detail: str):
        super().__init__(f"{cause}: {detail}")
        self.cause = cause


class MissingEntryError(KeyError):
    pass


class UnknownItemError(KeyError):
    pass


_NOT_SURE_RE = re.compile(r"\bnot\s+sure\b", re.IGNORECASE)
_NO_RE = re.compile(r"\bno\b", re.IGNORECASE)
_YES_RE = re.compile(r"\byes\b", re.IGNORECASE)
_SENTENCE_END_RE = re.compile(r"[.!?]")


def parse_verdict(text: str) -> Verdict:
    """Classify a free-text answer by scanning its first sentence.

    Precedence is "not sure" > "no" > "yes": "not" contains "no", and a
    hedge beats a bare keyword. Restricting the scan to the first
    sentence keeps rationale text from flipping the verdict. Unmatched
    text maps to NotSure with ``parse_miss`` set; that is data, not a
    fault.
    """
    end = _SENTENCE_END_RE.search(text)
    first_sentence = text if end is None else text[: end.end()]
    if _NOT_SURE_RE.search(first_sentence):
        return Verdict(Answer.NOT_SURE, text)
    if _NO_RE.search(first_sentence):
        return Verdict(Answer.NO, text)
    if _YES_RE.search(first_sentence):
        return Verdict(Answer.YES, text)
    return Verdict(Answer.NOT_SURE, text, parse_miss=True)


_CANONICAL_TEXT = {
    Answer.YES: "Yes",
    Answer.NO: "No",
    Answer.NOT_SURE: "Not Sure",
}


def make_verdict(answer: Answer) -> Verdict:
    """Synthetic verdict whose raw text is the canonical word."""
    return Verdict(answer, _CANONICAL_TEXT[answer])


class StaticVerifier:
    """Always answers the same; the degenerate baseline verifier."""

    def __init__(self, answer: Answer):
        self._verdict = make_verdict(answer)

    def verify(self, query: VerifierQuery) -> Verdict:
        return self._verdict


class ScriptedVerifier:
    """Pure lookup over a total (item_id, category) -> Verdict table."""

    def __init__(self, table: Mapping[tuple[str, str], Verdict]):
        self._table = dict(table)

    def verify(self, query: VerifierQuery) -> Verdict:
        key = (query.item_id, query.category)
        try:
            return self._table[key]
        except KeyError:
            raise MissingEntryError(
                f"no scripted verdict for item {query.item_id!r}, "
                f"category {query.category!r}"
            ) from None

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for (item_id, category), verdict in sorted(self._table.items()):
                record = {
                    "item_id": item_id,
                    "category": category,
                    "answer": verdict.answer.value,
                    "raw_text": verdict.raw_text,
                }
                fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
                fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "ScriptedVerifier":
        table: dict[tuple[str, str], Verdict] = {}
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                table[(record["item_id"], record["category"])] = Verdict(
                    Answer(record["answer"]), record["raw_text"]
                )
        return cls(table)


class RecordingVerifier:
    """Delegates to an inner verifier while capturing a replay table."""

    def __init__(self, inner: Verifier):
        self._inner = inner
        self._lock = threading.Lock()
        self.table: dict[tuple[str, str], Verdict] = {}

    def verify(self, query: VerifierQuery) -> Verdict:
        verdict = self._inner.verify(query)
        with self._lock:
            self.table[(query.item_id, query.category)] = verdict
        return verdict

    def to_scripted(self) -> ScriptedVerifier:
        return ScriptedVerifier(self.table)


@dataclass(frozen=True)
class OracleParams:
    """Binary discriminatory rates driving the stochastic oracle.

    ``recall`` is the probability of confirming a candidate that truly
    labels the item; ``specificity`` the probability of rejecting one
    that does not. ``not_sure_share`` is the fraction of rejections
    voiced as NotSure instead of No (a labeled simulation knob, not a
    measured quantity).
    """

    recall: float
    specificity: float
    seed: int
    not_sure_share: float = 0.2

    def __post_init__(self) -> None:
        for name in ("recall", "specificity", "not_sure_share"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


def _keyed_rng(seed: int, item_id: str, category: str) -> random.Random:
    material = f"{seed}|{item_id}|{category}".encode("utf-8")
    digest = hashlib.blake2b(material, digest_size=8).digest()
    return random.Random(int.from_bytes(digest, "big"))


class StochasticOracle:
    """Simulates a verifier with configurable recall and specificity.

    ``truth`` maps item ids to their true category names (strings, since
    that is all a real verifier would see). Verdicts are drawn from a
    generator keyed by (seed, item_id, category): the same query always
    gets the same verdict, in any order, under any concurrency. The same
    rates apply at every candidate rank.
    """

    def __init__(self, truth: Mapping[str, Iterable[str]], params: OracleParams):
        self._truth = {item: frozenset(cats) for item, cats in truth.items()}
        self._params = params

    def verify(self, query: VerifierQuery) -> Verdict:
        try:
            true_categories = self._truth[query.item_id]
        except KeyError:
            raise UnknownItemError(
                f"item {query.item_id!r} not covered by oracle truth"
            ) from None
        rng = _keyed_rng(self._params.seed, query.item_id, query.category)
        accept_roll, not_sure_roll = rng.random(), rng.random()
        if query.category in true_categories:
            accept = accept_roll < self._params.recall
        else:
            accept = accept_roll >= self._params.specificity
        if accept:
            return make_verdict(Answer.YES)
        if not_sure_roll < self._params.not_sure_share:
            return make_verdict(Answer.NOT_SURE)
        return make_verdict(Answer.NO)


class RemoteVerifier:
    """HTTP client for a verdict service.

    Wire contract: POST JSON ``{"item_id", "prompt", "image_ref"}``,
    response ``{"text": "..."}`` parsed by :func:`parse_verdict`.
    ``image_ref`` is an opaque pass-through (a bridge service may attach
    real images); it is never read here and never derived from ground
    truth. Transport faults (timeouts, connection errors, 5xx) are
    retried idempotently up to ``retries`` attempts; parse misses are
    never retried.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 10.0,
        retries: int = 3,
        max_in_flight: int = 8,
        image_refs: Mapping[str, str] | None = None,
        backoff: float = 0.1,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._image_refs = dict(image_refs or {})
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._session = requests.Session()
        self._lock = threading.Lock()
        self.stats: dict[str, int] = {"requests": 0, "retries": 0, "failures": 0}

    def _bump(self, key: str, amount: int = 1) -> None:
        with self._lock:
            self.stats[key] += amount

    def verify(self, query: VerifierQuery) -> Verdict:
        payload = {
            "item_id": query.item_id,
            "prompt": query.prompt,
            "image_ref": self._image_refs.get(query.item_id),
        }
        last_fault = "timeout"
        last_detail = ""
        for attempt in range(self.retries):
            if attempt > 0:
                self._bump("retries")
                logger.warning(
                    "retry %d/%d for item %s after %s",
                    attempt,
                    self.retries - 1,
                    query.item_id,
                    last_fault,
                )
                time.sleep(self.backoff * attempt)
            self._bump("requests")
            try:
                with self._semaphore:
                    response = self._session.post(
                        self.endpoint, json=payload, timeout=self.timeout
                    )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_fault, last_detail = "timeout", str(exc)
                continue
            if response.status_code >= 500:
                last_fault = "bad_status"
                last_detail = f"HTTP {response.status_code}"
                continue
            if response.status_code != 200:
                self._bump("failures")
                raise VerifierFailure("bad_status", f"HTTP {response.status_code}")
            try:
                text = response.json()["text"]
                if not isinstance(text, str):
                    raise TypeError("'text' is not a string")
            except (ValueError, KeyError, TypeError) as exc:
                self._bump("failures")
                raise VerifierFailure("malformed_response", str(exc)) from exc
            return parse_verdict(text)
        self._bump("failures")
        raise VerifierFailure(last_fault, last_detail or "retries exhausted")


@dataclass
class VerdictCache:
    """Per-(item_id, rank) verdict store shared across threshold sweeps.

    Lives outside the verifier interface on purpose: the cache key needs
    the candidate rank, which verifiers must never see.
    """

    entries: dict[tuple[str, int], Verdict] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def get(self, item_id: str, rank: int) -> Verdict | None:
        with self._lock:
            verdict = self.entries.get((item_id, rank))
            if verdict is None:
                self.misses += 1
            else:
                self.hits += 1
            return verdict

    def put(self, item_id: str, rank: int, verdict: Verdict) -> None:
        with self._lock:
            self.entries[(item_id, rank)] = verdict

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for (item_id, rank), verdict in sorted(self.entries.items()):
                record = {
                    "item_id": item_id,
                    "rank": rank,
                    "answer": verdict.answer.value,
                    "raw_text": verdict.raw_text,
                    "parse_miss": verdict.parse_miss,
                }
                fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
                fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "VerdictCache":
        cache = cls()
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                cache.entries[(record["item_id"], int(record["rank"]))] = Verdict(
                    Answer(record["answer"]),
                    record["raw_text"],
                    bool(record.get("parse_miss", False)),
                )
        return cache


class CountingVerifier:
    """Wrapper counting how often the underlying verifier is queried."""

    def __init__(self, inner: Verifier):
        self._inner = inner
        self._lock = threading.Lock()
        self.calls = 0

    def verify(self, query: VerifierQuery) -> Verdict:
        with self._lock:
            self.calls += 1
        return self._inner.verify(query)
