"""Pause-annotated, BIO-tagged utterances: data model, I/O and descriptive statistics.

A corpus file is UTF-8 JSON lines, one utterance per line::

    {"id": "u1", "domain": "music",
     "tokens": [{"text": "play", "pause_ms": 12, "tag": "O"},
                {"text": "thank", "pause_ms": 5, "tag": "B-Song"}, ...]}

``pause_ms`` is the pause *after* the token. A missing ``pause_ms`` reads as 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator

POSITIONS = ("O", "B", "I")


class CorpusError(ValueError):
    """Raised for malformed records or BIO violations."""


@dataclass(frozen=True)
class BioTag:
    position: str
    entity_type: str | None = None

    def __post_init__(self) -> None:
        if self.position not in POSITIONS:
            raise CorpusError(f"unknown BIO position {self.position!r}")
        if self.position == "O" and self.entity_type is not None:
            raise CorpusError("O tag cannot carry an entity type")
        if self.position != "O" and not self.entity_type:
            raise CorpusError(f"{self.position} tag requires an entity type")

    @classmethod
    def parse(cls, label: str) -> "BioTag":
        if label == "O":
            return cls("O")
        pos, sep, etype = label.partition("-")
        if not sep or pos not in ("B", "I") or not etype:
            raise CorpusError(f"malformed tag {label!r}")
        return cls(pos, etype)

    @property
    def label(self) -> str:
        return "O" if self.position == "O" else f"{self.position}-{self.entity_type}"

    def __str__(self) -> str:
        return self.label


OUTSIDE = BioTag("O")


@dataclass(frozen=True)
class Token:
    text: str
    pause_after_ms: float
    tag: BioTag = OUTSIDE

    def __post_init__(self) -> None:
        if not self.text:
            raise CorpusError("token text must be non-empty")
        if not (self.pause_after_ms >= 0) or math.isinf(self.pause_after_ms):
            raise CorpusError(f"pause must be a finite non-negative number, got {self.pause_after_ms!r}")


@dataclass(frozen=True)
class Utterance:
    id: str
    domain: str
    tokens: tuple[Token, ...]

    def __post_init__(self) -> None:
        if not self.tokens:
            raise CorpusError(f"utterance {self.id!r} has no tokens")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        bad = bio_violation(self.tokens)
        if bad is not None:
            raise CorpusError(
                f"utterance {self.id!r}: BIO violation at token {bad} "
                f"({self.tokens[bad].tag.label} after "
                f"{self.tokens[bad - 1].tag.label if bad else 'start'})"
            )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    @property
    def labels(self) -> list[str]:
        return [t.tag.label for t in self.tokens]

    @property
    def pauses(self) -> list[float]:
        return [t.pause_after_ms for t in self.tokens]


@dataclass(frozen=True)
class CorpusStats:
    n_utterances: int
    avg_tokens_per_utterance: float
    entity_token_fraction: float
    avg_pause_per_token_ms: float


def bio_violation(tokens: Iterable[Token]) -> int | None:
    """Index of the first I tag not continuing a same-type B/I, or None."""
    prev = OUTSIDE
    for i, tok in enumerate(tokens):
        tag = tok.tag
        if tag.position == "I" and (prev.position == "O" or prev.entity_type != tag.entity_type):
            return i
        prev = tag
    return None


def make_utterance(uid: str, domain: str, triples: Iterable[tuple[str, str, float]]) -> Utterance:
    """Build an utterance from ``(text, label, pause_ms)`` triples."""
    toks = tuple(Token(text, float(pause), BioTag.parse(label)) for text, label, pause in triples)
    return Utterance(uid, domain, toks)


def utterance_from_record(rec: dict) -> Utterance:
    try:
        uid = str(rec["id"])
        domain = str(rec.get("domain", ""))
        raw = rec["tokens"]
    except (KeyError, TypeError) as exc:
        raise CorpusError(f"record missing field: {exc}") from None
    if not isinstance(raw, list):
        raise CorpusError("tokens must be a list")
    toks = []
    for j, t in enumerate(raw):
        try:
            pause = t.get("pause_ms")
            pause = 0.0 if pause is None else float(pause)
            toks.append(Token(str(t["text"]), pause, BioTag.parse(t.get("tag", "O"))))
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise CorpusError(f"utterance {uid!r} token {j}: {exc}") from None
    return Utterance(uid, domain, tuple(toks))


def utterance_to_record(utt: Utterance) -> dict:
    return {
        "id": utt.id,
        "domain": utt.domain,
        "tokens": [
            {"text": t.text, "pause_ms": _num(t.pause_after_ms), "tag": t.tag.label}
            for t in utt.tokens
        ],
    }


def _num(x: float) -> float | int:
    return int(x) if float(x).is_integer() else x


def parse_corpus(stream: Iterable[str]) -> list[Utterance]:
    """Parse JSON-lines records. Errors carry the 1-based line number."""
    out = []
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {lineno}: malformed record ({exc.msg})") from None
        try:
            out.append(utterance_from_record(rec))
        except CorpusError as exc:
            raise CorpusError(f"line {lineno}: {exc}") from None
    return out


def serialize_corpus(corpus: Iterable[Utterance], out: IO[str]) -> None:
    for utt in corpus:
        out.write(json.dumps(utterance_to_record(utt), ensure_ascii=False))
        out.write("\n")


def read_corpus(path: str | Path) -> list[Utterance]:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh)


def write_corpus(corpus: Iterable[Utterance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        serialize_corpus(corpus, fh)


def corpus_stats(corpus: list[Utterance]) -> CorpusStats:
    if not corpus:
        raise CorpusError("cannot compute statistics of an empty corpus")
    n_tok = sum(len(u) for u in corpus)
    n_ent = sum(1 for u in corpus for t in u.tokens if t.tag.position != "O")
    # fsum keeps the result independent of utterance order
    pause = math.fsum(t.pause_after_ms for u in corpus for t in u.tokens)
    return CorpusStats(
        n_utterances=len(corpus),
        avg_tokens_per_utterance=n_tok / len(corpus),
        entity_token_fraction=n_ent / n_tok,
        avg_pause_per_token_ms=pause / n_tok,
    )


def entity_spans(utterance: Utterance) -> list[tuple[int, int, str]]:
    """Maximal ``B I*`` runs as ``(start, end_inclusive, entity_type)``."""
    return spans_from_labels(utterance.labels)


def spans_from_labels(labels: list[str]) -> list[tuple[int, int, str]]:
    """Span extraction over joint label strings.

    Assumes BIO-valid input; a stray I (possible in predictions) opens a new span.
    """
    spans = []
    start = etype = None
    for i, lab in enumerate(labels):
        pos, _, typ = lab.partition("-")
        if pos == "I" and etype == typ and start is not None:
            continue
        if start is not None:
            spans.append((start, i - 1, etype))
            start = etype = None
        if pos in ("B", "I"):
            start, etype = i, typ
    if start is not None:
        spans.append((start, len(labels) - 1, etype))
    return spans


def iter_domains(corpus: Iterable[Utterance]) -> Iterator[str]:
    seen = set()
    for u in corpus:
        if u.domain not in seen:
            seen.add(u.domain)
            yield u.domain
