"""Entity/mention data model, tokenization, sentence segmentation, and
deterministic synthetic corpus generation.

Entities arrive as JSON-lines records (``entity_id``, ``title``,
``description``); mentions mirror the usual zero-shot entity-linking layout
(``mention_id``, ``context_left``, ``mention``, ``context_right``,
``gold_entity_id``). Tokenization is a deliberately small stand-in for
subword models: lowercase, whitespace-delimited, punctuation split off.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CLS",
    "SEP",
    "ENT",
    "MS",
    "ME",
    "UNK",
    "PAD",
    "SPECIAL_TOKENS",
    "TokenSequence",
    "CorpusFormatError",
    "Vocabulary",
    "EntityRecord",
    "EntityCorpus",
    "MentionRecord",
    "tokenize",
    "segment_sentences",
    "load_entities",
    "load_mentions",
    "write_entities",
    "write_mentions",
    "generate_synthetic",
]

# Token ids; a sequence is a plain list of vocabulary ids.
TokenSequence = list[int]

SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[ENT]", "[Ms]", "[Me]", "[UNK]", "[PAD]")
CLS, SEP, ENT, MS, ME, UNK, PAD = range(7)

# A word chunk, or any single non-space non-word character (punctuation
# becomes its own token).
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

_SENTENCE_TERMINATORS = ".!?"


class CorpusFormatError(ValueError):
    """An input file violates the expected record format."""


class Vocabulary:
    """Bijective token-string / id mapping with seven reserved specials.

    Ids 0..6 are fixed for [CLS], [SEP], [ENT], [Ms], [Me], [UNK], [PAD];
    regular tokens occupy ids 7 and up in insertion order. After
    :meth:`freeze`, lookups of unseen tokens return the [UNK] id instead of
    growing the table.
    """

    def __init__(self) -> None:
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        self._id_to_token: list[str] = list(SPECIAL_TOKENS)
        self.frozen = False

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self._token_to_id

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self._id_to_token == other._id_to_token

    def add(self, token: str) -> int:
        """Return the id of ``token``, adding it if absent (and not frozen)."""
        tid = self._token_to_id.get(token)
        if tid is not None:
            return tid
        if self.frozen:
            raise ValueError(f"vocabulary is frozen; cannot add token {token!r}")
        tid = len(self._id_to_token)
        self._token_to_id[token] = tid
        self._id_to_token.append(token)
        return tid

    def id_of(self, token: str) -> int:
        """Id of ``token``, or the [UNK] id if unknown."""
        return self._token_to_id.get(token, UNK)

    def token_of(self, token_id: int) -> str:
        return self._id_to_token[token_id]

    def freeze(self) -> None:
        self.frozen = True

    def regular_tokens(self) -> list[str]:
        """Non-reserved tokens in id order (the serializable part)."""
        return self._id_to_token[len(SPECIAL_TOKENS):]

    @classmethod
    def from_regular_tokens(cls, tokens: list[str], frozen: bool = True) -> "Vocabulary":
        vocab = cls()
        for tok in tokens:
            if tok in vocab._token_to_id:
                raise ValueError(f"duplicate token in serialized vocabulary: {tok!r}")
            vocab.add(tok)
        vocab.frozen = frozen
        return vocab


@dataclass(frozen=True)
class EntityRecord:
    """One knowledge-base entry: unique id plus title/description text."""

    entity_id: str
    title: str
    description: str = ""

    def __post_init__(self) -> None:
        if not self.entity_id:
            raise ValueError("entity_id must be non-empty")
        if not self.title:
            raise ValueError(f"entity {self.entity_id!r}: title must be non-empty")


@dataclass
class EntityCorpus:
    """Ordered entity collection; iteration order is ingestion order."""

    entities: list[EntityRecord] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._by_id = {}
        for e in self.entities:
            if e.entity_id in self._by_id:
                raise ValueError(f"duplicate entity_id {e.entity_id!r}")
            self._by_id[e.entity_id] = e

    def __len__(self) -> int:
        return len(self.entities)

    def __iter__(self):
        return iter(self.entities)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._by_id

    def get(self, entity_id: str) -> EntityRecord:
        return self._by_id[entity_id]


@dataclass(frozen=True)
class MentionRecord:
    """A mention span plus its left/right context and gold entity label."""

    mention_id: str
    context_left: str
    mention: str
    context_right: str
    gold_entity_id: str


def tokenize(text: str, vocab: Vocabulary, frozen: bool | None = None) -> TokenSequence:
    """Lowercase and split ``text`` into token ids.

    Words are whitespace-delimited with punctuation split off as separate
    tokens. When ``frozen`` (or the vocabulary itself is frozen), unseen
    tokens map to [UNK]; otherwise they are added to the vocabulary. Empty
    text yields an empty sequence.
    """
    effective_frozen = vocab.frozen if frozen is None else frozen
    pieces = _TOKEN_RE.findall(text.lower())
    if effective_frozen:
        return [vocab.id_of(p) for p in pieces]
    return [vocab.add(p) for p in pieces]


def _split_sentence_texts(text: str) -> list[str]:
    """Cut ``text`` after '.', '!' or '?' followed by whitespace or EOT."""
    parts: list[str] = []
    start = 0
    n = len(text)
    for i, ch in enumerate(text):
        if ch in _SENTENCE_TERMINATORS and (i + 1 == n or text[i + 1].isspace()):
            parts.append(text[start:i + 1])
            start = i + 1
    if start < n:
        parts.append(text[start:])
    return parts


def segment_sentences(
    description: str, vocab: Vocabulary, frozen: bool | None = None
) -> list[TokenSequence]:
    """Split a description into tokenized sentences.

    The terminator stays with its sentence; chunks that tokenize to nothing
    are dropped, so concatenating the returned sequences in order reproduces
    ``tokenize(description)`` exactly. An empty description yields an empty
    list.
    """
    sentences = []
    for chunk in _split_sentence_texts(description):
        tokens = tokenize(chunk, vocab, frozen)
        if tokens:
            sentences.append(tokens)
    return sentences


# ---------------------------------------------------------------------------
# File loaders (JSON-lines)
# ---------------------------------------------------------------------------

def _parse_jsonl_line(raw: str, path: str | Path, lineno: int, fields: tuple[str, ...]) -> dict:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(record, dict):
        raise CorpusFormatError(f"{path}: line {lineno}: record must be a JSON object")
    for name in fields:
        if name not in record:
            raise CorpusFormatError(f"{path}: line {lineno}: missing field {name!r}")
        if not isinstance(record[name], str):
            raise CorpusFormatError(f"{path}: line {lineno}: field {name!r} must be a string")
    return record


def load_entities(path: str | Path) -> EntityCorpus:
    """Load a JSON-lines entity file, preserving file order.

    Raises :class:`CorpusFormatError` for malformed lines or duplicate
    entity ids, naming the offending line.
    """
    entities: list[EntityRecord] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            record = _parse_jsonl_line(raw, path, lineno, ("entity_id", "title", "description"))
            entity_id = record["entity_id"]
            if entity_id in seen:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: duplicate entity_id {entity_id!r} "
                    f"(first seen on line {seen[entity_id]})"
                )
            seen[entity_id] = lineno
            try:
                entities.append(
                    EntityRecord(entity_id, record["title"], record["description"])
                )
            except ValueError as exc:
                raise CorpusFormatError(f"{path}: line {lineno}: {exc}") from exc
    return EntityCorpus(entities)


def load_mentions(path: str | Path, corpus: EntityCorpus) -> list[MentionRecord]:
    """Load a JSON-lines mention file, resolving gold labels against ``corpus``."""
    fields = ("mention_id", "context_left", "mention", "context_right", "gold_entity_id")
    mentions: list[MentionRecord] = []
    seen: dict[str, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            record = _parse_jsonl_line(raw, path, lineno, fields)
            mention_id = record["mention_id"]
            if not mention_id:
                raise CorpusFormatError(f"{path}: line {lineno}: empty mention_id")
            if mention_id in seen:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: duplicate mention_id {mention_id!r} "
                    f"(first seen on line {seen[mention_id]})"
                )
            seen[mention_id] = lineno
            if not record["mention"].strip():
                raise CorpusFormatError(
                    f"{path}: line {lineno}: mention {mention_id!r} has empty mention text"
                )
            if record["gold_entity_id"] not in corpus:
                raise CorpusFormatError(
                    f"{path}: line {lineno}: mention {mention_id!r} has unresolvable "
                    f"gold_entity_id {record['gold_entity_id']!r}"
                )
            mentions.append(MentionRecord(*(record[f] for f in fields)))
    return mentions


def write_entities(path: str | Path, corpus: EntityCorpus) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in corpus:
            fh.write(json.dumps(
                {"entity_id": e.entity_id, "title": e.title, "description": e.description}
            ) + "\n")


def write_mentions(path: str | Path, mentions: list[MentionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in mentions:
            fh.write(json.dumps({
                "mention_id": m.mention_id,
                "context_left": m.context_left,
                "mention": m.mention,
                "context_right": m.context_right,
                "gold_entity_id": m.gold_entity_id,
            }) + "\n")


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

def generate_synthetic(
    seed: int,
    n_entities: int,
    aspects_per_entity: int,
    vocab_size: int,
    *,
    aspect_counts: list[int] | None = None,
    pool_size: int = 10,
    context_words: int = 8,
) -> tuple[EntityCorpus, list[MentionRecord]]:
    """Build a deterministic multi-aspect corpus plus matching mentions.

    The word universe is split into one disjoint vocabulary per aspect, so
    an entity's per-aspect pools never overlap each other. Within an
    aspect, however, each entity samples its pool as a random
    ``pool_size``-word subset of that aspect's shared vocabulary: the same
    word serves many entities, so no single context word identifies an
    entity — only the combination does. Each entity's description has one
    sentence per aspect (its pool words in random order); each mention's
    context is drawn from exactly one aspect pool of its gold entity, the
    mention surface form is a constant ("it"), and one mention is emitted
    per (entity, aspect) pair. Byte-identical output for a fixed seed.

    ``aspect_counts`` optionally overrides the uniform per-entity aspect
    count with one count per entity, for corpora with varying description
    lengths; entity i then uses aspects 0..aspect_counts[i]-1.
    """
    if n_entities < 1 or aspects_per_entity < 1 or vocab_size < 1:
        raise ValueError("n_entities, aspects_per_entity and vocab_size must be >= 1")
    if context_words < 1 or pool_size < 1:
        raise ValueError("context_words and pool_size must be >= 1")
    if aspect_counts is None:
        counts = [aspects_per_entity] * n_entities
    else:
        if len(aspect_counts) != n_entities:
            raise ValueError("aspect_counts must have one entry per entity")
        if any(c < 1 for c in aspect_counts):
            raise ValueError("aspect_counts entries must be >= 1")
        counts = list(aspect_counts)

    n_aspects = max(counts)
    aspect_vocab = vocab_size // n_aspects
    if aspect_vocab < 1:
        raise ValueError(
            f"vocab_size={vocab_size} too small for {n_aspects} aspect vocabularies"
        )
    eff_pool = min(pool_size, aspect_vocab)

    words = [f"w{j:05d}" for j in range(vocab_size)]
    rng = np.random.default_rng(seed)

    entities: list[EntityRecord] = []
    mentions: list[MentionRecord] = []
    for i in range(n_entities):
        pools: list[list[str]] = []
        for a in range(counts[i]):
            base = a * aspect_vocab
            picks = rng.choice(aspect_vocab, size=eff_pool, replace=False)
            pools.append([words[base + j] for j in picks])

        entities.append(EntityRecord(
            entity_id=f"syn{i:04d}",
            title=f"entity{i:04d}",
            description=" ".join(" ".join(pool) + "." for pool in pools),
        ))

        for a, pool in enumerate(pools):
            picks = rng.integers(0, len(pool), size=context_words)
            ctx = [pool[j] for j in picks]
            half = (len(ctx) + 1) // 2
            mentions.append(MentionRecord(
                mention_id=f"m{i:04d}.{a}",
                context_left=" ".join(ctx[:half]),
                mention="it",
                context_right=" ".join(ctx[half:]),
                gold_entity_id=f"syn{i:04d}",
            ))
    return EntityCorpus(entities), mentions
