"""Entity views: per-sentence description slices and their containers.

A view is an ordered subset of a description's sentences; its token
sequence is always the in-sentence-order concatenation of the member
sentences' (pre-truncated) tokens. The default construction makes one
basic view per sentence; the ``full`` policy collapses the whole
description into a single view (the plain bi-encoder baseline shape), and
``first-k-paragraphs`` keeps only the first sentence of each of the first
k paragraphs.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    EntityRecord,
    TokenSequence,
    Vocabulary,
    segment_sentences,
    tokenize,
)

__all__ = ["View", "ViewSet", "build_views", "write_views", "read_views", "VIEW_POLICIES"]

VIEW_POLICIES = ("sentence", "full", "first-k-paragraphs")

_PARAGRAPH_RE = re.compile(r"\n+")


@dataclass
class View:
    """One retrievable unit: a sentence-index subset plus its tokens."""

    view_id: int
    sentence_indices: tuple[int, ...]
    tokens: TokenSequence
    cached_vector: np.ndarray | None = None


@dataclass
class ViewSet:
    """All views of one entity, plus the sentence material they draw from.

    ``sentence_tokens`` holds every description sentence already truncated
    to the view token cap, so merged views can be rebuilt exactly.
    ``views[:basic_count]`` are the basic views in construction order; no
    two views ever share the same sentence-index set.
    """

    entity_id: str
    title_tokens: TokenSequence
    sentence_tokens: list[TokenSequence]
    views: list[View] = field(default_factory=list)
    basic_count: int = 0

    def sentence_count(self) -> int:
        return len(self.sentence_tokens)

    def sentence_sets(self) -> set[tuple[int, ...]]:
        return {v.sentence_indices for v in self.views}

    def tokens_for(self, sentence_indices: tuple[int, ...]) -> TokenSequence:
        """Concatenate member sentences' tokens in sentence order."""
        tokens: TokenSequence = []
        for i in sorted(sentence_indices):
            tokens.extend(self.sentence_tokens[i])
        return tokens

    def next_view_id(self) -> int:
        return max(v.view_id for v in self.views) + 1 if self.views else 0

    def append_view(self, view: View) -> None:
        if view.sentence_indices in self.sentence_sets():
            raise ValueError(
                f"entity {self.entity_id!r}: duplicate view over sentences "
                f"{view.sentence_indices}"
            )
        self.views.append(view)

    def copy(self) -> "ViewSet":
        """Shallow-ish copy safe for independent view growth."""
        return ViewSet(
            entity_id=self.entity_id,
            title_tokens=list(self.title_tokens),
            sentence_tokens=[list(s) for s in self.sentence_tokens],
            views=[View(v.view_id, v.sentence_indices, list(v.tokens), v.cached_vector)
                   for v in self.views],
            basic_count=self.basic_count,
        )


def _paragraph_sentences(
    description: str, vocab: Vocabulary, frozen: bool | None
) -> tuple[list[TokenSequence], list[int]]:
    """Sentences segmented per paragraph, plus each paragraph's first global index."""
    sentences: list[TokenSequence] = []
    starts: list[int] = []
    for para in _PARAGRAPH_RE.split(description):
        para_sents = segment_sentences(para, vocab, frozen)
        if not para_sents:
            continue
        starts.append(len(sentences))
        sentences.extend(para_sents)
    return sentences, starts


def build_views(
    entity: EntityRecord,
    vocab: Vocabulary,
    max_view_tokens: int,
    policy: str = "sentence",
    first_k: int = 5,
    frozen: bool | None = None,
) -> ViewSet:
    """Construct an entity's view set from its description.

    Every sentence is truncated to its first ``max_view_tokens`` tokens.
    Policies:

    * ``sentence`` — one basic view per sentence (the default).
    * ``full`` — a single view over the whole description, itself capped at
      ``max_view_tokens``: the same fixed input budget any view gets, which
      makes the index degenerate to a plain one-vector-per-entity dual
      encoder. Long descriptions lose their tail, which is exactly the
      single-vector baseline's failure mode.
    * ``first-k-paragraphs`` — one basic view per paragraph-initial sentence
      of the first ``first_k`` paragraphs.

    An empty description always yields exactly one empty view, so every
    entity stays retrievable on its title alone.
    """
    if max_view_tokens < 1:
        raise ValueError("max_view_tokens must be >= 1")
    if policy not in VIEW_POLICIES:
        raise ValueError(f"unknown view policy {policy!r}; expected one of {VIEW_POLICIES}")

    title_tokens = tokenize(entity.title, vocab, frozen)

    if policy == "first-k-paragraphs":
        sentences, para_starts = _paragraph_sentences(entity.description, vocab, frozen)
    else:
        sentences = segment_sentences(entity.description, vocab, frozen)
        para_starts = []

    truncated = [s[:max_view_tokens] for s in sentences]
    vs = ViewSet(entity.entity_id, title_tokens, truncated)

    if not truncated:
        vs.views = [View(0, (), [])]
        vs.basic_count = 1
        return vs

    if policy == "sentence":
        member_indices = [(i,) for i in range(len(truncated))]
    elif policy == "full":
        budget = max_view_tokens
        members: list[int] = []
        tokens: TokenSequence = []
        for i, sent in enumerate(truncated):
            if budget <= 0:
                break
            members.append(i)
            tokens.extend(sent[:budget])
            budget -= len(sent[:budget])
        vs.views = [View(0, tuple(members), tokens)]
        vs.basic_count = 1
        return vs
    else:
        if first_k < 1:
            raise ValueError("first_k must be >= 1")
        member_indices = [(i,) for i in para_starts[:first_k]]

    for vid, indices in enumerate(member_indices):
        vs.views.append(View(vid, indices, vs.tokens_for(indices)))
    vs.basic_count = len(vs.views)
    return vs


# ---------------------------------------------------------------------------
# Views file: JSON-lines with a header record carrying the vocabulary
# ---------------------------------------------------------------------------

_VIEWS_FORMAT = "viewret-views"
_VIEWS_VERSION = 1


def write_views(
    path: str | Path,
    viewsets: list[ViewSet],
    vocab: Vocabulary,
    meta: dict | None = None,
) -> None:
    header = {
        "format": _VIEWS_FORMAT,
        "version": _VIEWS_VERSION,
        "vocab": vocab.regular_tokens(),
    }
    header.update(meta or {})
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for vs in viewsets:
            view_records = []
            for v in vs.views:
                rec = {"id": v.view_id, "s": list(v.sentence_indices)}
                if v.tokens != vs.tokens_for(v.sentence_indices):
                    # Views capped below their sentence concatenation (the
                    # "full" policy) carry their tokens explicitly.
                    rec["tokens"] = v.tokens
                view_records.append(rec)
            fh.write(json.dumps({
                "entity_id": vs.entity_id,
                "title": vs.title_tokens,
                "sentences": vs.sentence_tokens,
                "views": view_records,
                "basic_count": vs.basic_count,
            }) + "\n")


def read_views(path: str | Path) -> tuple[list[ViewSet], Vocabulary, dict]:
    """Load a views file; view tokens are rebuilt from the stored sentences."""
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise ValueError(f"{path}: empty views file")
        header = json.loads(header_line)
        if header.get("format") != _VIEWS_FORMAT:
            raise ValueError(f"{path}: not a views file")
        vocab = Vocabulary.from_regular_tokens(header["vocab"], frozen=False)
        meta = {k: v for k, v in header.items() if k not in ("format", "version", "vocab")}

        viewsets = []
        for raw in fh:
            if not raw.strip():
                continue
            rec = json.loads(raw)
            vs = ViewSet(
                entity_id=rec["entity_id"],
                title_tokens=list(rec["title"]),
                sentence_tokens=[list(s) for s in rec["sentences"]],
                basic_count=rec["basic_count"],
            )
            for v in rec["views"]:
                indices = tuple(v["s"])
                tokens = list(v["tokens"]) if "tokens" in v else vs.tokens_for(indices)
                vs.views.append(View(v["id"], indices, tokens))
            viewsets.append(vs)
    return viewsets, vocab, meta
