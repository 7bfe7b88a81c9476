"""Multi-view matching and exact top-k retrieval.

The canonical quantity everywhere is the similarity score
``s = g(mention) . f(title, view)``; matching distance is ``-s``, so every
minimal-distance selection appears here as an argmax over scores. An
entity's matching score against a mention is the maximum score over its
cached views; retrieval is an exact scan over all indexed entities with a
fully specified tie-break (score descending, then entity_id ascending,
then view_id ascending), which makes every ranking deterministic.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import EntityCorpus, TokenSequence
from .encoder import DualEncoder, EncoderParams, encode_entity, fingerprint
from .views import ViewSet

__all__ = [
    "StaleIndexError",
    "IndexedEntity",
    "EntityIndex",
    "RetrievalResult",
    "score",
    "matching_score",
    "optimal_subset_oracle",
    "build_index",
    "retrieve",
    "require_fresh",
    "save_index",
    "load_index",
    "write_results",
    "read_results",
    "INDEX_MAGIC",
]

INDEX_MAGIC = b"MVIX1"

# Exhaustive subset enumeration is a test instrument; anything larger than
# this is not a desk-scale oracle call.
MAX_ORACLE_BASIC_VIEWS = 12


class StaleIndexError(RuntimeError):
    """The index was built from different encoder parameters."""


@dataclass
class IndexedEntity:
    """Cached view vectors for one entity, in ascending view-id order."""

    entity_id: str
    view_ids: np.ndarray   # (n_views,) int64
    vectors: np.ndarray    # (n_views, dim)


@dataclass
class EntityIndex:
    """Per-entity cached view vectors plus the builder's params fingerprint."""

    entities: list[IndexedEntity]
    fingerprint: str
    dim: int

    def __len__(self) -> int:
        return len(self.entities)


def score(mention_vec: np.ndarray, view_vec: np.ndarray) -> float:
    """Dot-product similarity; downstream distance is its negation."""
    mention_vec = np.asarray(mention_vec)
    view_vec = np.asarray(view_vec)
    if mention_vec.shape != view_vec.shape:
        raise ValueError(
            f"dimension mismatch: mention {mention_vec.shape} vs view {view_vec.shape}"
        )
    return float(np.dot(mention_vec, view_vec))


def matching_score(mention_vec: np.ndarray, entity: IndexedEntity) -> tuple[int, float]:
    """Best single view of ``entity`` for this mention: (view_id, score).

    Linear in the entity's view count; exact ties resolve to the smallest
    view id. Each view is scored with the same one-row dot product used by
    :func:`score`, so results are bit-identical no matter how many other
    views sit alongside it (a matrix-vector kernel would not guarantee
    that).
    """
    if entity.vectors.shape[0] == 0:
        raise ValueError(f"entity {entity.entity_id!r} has no cached views")
    scores = np.fromiter(
        (np.dot(row, mention_vec) for row in entity.vectors),
        dtype=np.float64,
        count=entity.vectors.shape[0],
    )
    best = scores.max()
    tied = np.flatnonzero(scores == best)
    j = tied[np.argmin(entity.view_ids[tied])]
    return int(entity.view_ids[j]), float(scores[j])


def optimal_subset_oracle(
    mention_vec: np.ndarray,
    viewset: ViewSet,
    entity_params: EncoderParams,
    normalize: bool = False,
) -> tuple[tuple[int, ...], float]:
    """Exhaustively find the sentence subset with maximal score.

    Enumerates every non-empty subset of the basic views, encodes each
    in-order concatenation, and returns (sentence indices, score). Exact
    ties resolve to the lexicographically smallest sentence-index tuple.
    Only usable for small view sets; this is a verification oracle, not the
    retrieval path.
    """
    k = viewset.basic_count
    if k > MAX_ORACLE_BASIC_VIEWS:
        raise ValueError(
            f"oracle limited to {MAX_ORACLE_BASIC_VIEWS} basic views, got {k}"
        )
    basic = viewset.views[:k]
    best_indices: tuple[int, ...] | None = None
    best_score = -np.inf
    for mask in range(1, 1 << k):
        members: set[int] = set()
        for bit in range(k):
            if mask & (1 << bit):
                members.update(basic[bit].sentence_indices)
        indices = tuple(sorted(members))
        vec = encode_entity(
            entity_params, viewset.title_tokens, viewset.tokens_for(indices), normalize
        )
        s = float(np.dot(mention_vec, vec))
        if s > best_score or (s == best_score and indices < best_indices):
            best_score = s
            best_indices = indices
    return best_indices, best_score


def build_index(
    corpus: EntityCorpus,
    viewsets: list[ViewSet],
    model: DualEncoder,
    normalize: bool = False,
) -> EntityIndex:
    """Encode every view of every entity once; vectors are stored float32.

    Entities appear in corpus order. Raises if any corpus entity lacks a
    view set.
    """
    by_id = {vs.entity_id: vs for vs in viewsets}
    entities = []
    for record in corpus:
        vs = by_id.get(record.entity_id)
        if vs is None:
            raise ValueError(f"no view set for entity {record.entity_id!r}")
        vectors = np.stack([
            encode_entity(model.entity_side, vs.title_tokens, v.tokens, normalize)
            for v in vs.views
        ]).astype(np.float32)
        view_ids = np.array([v.view_id for v in vs.views], dtype=np.int64)
        entities.append(IndexedEntity(record.entity_id, view_ids, vectors))
    return EntityIndex(entities=entities, fingerprint=fingerprint(model), dim=model.dim)


@dataclass
class RetrievalResult:
    """Ranked candidates for one mention: (entity_id, best_view_id, score)."""

    mention_id: str
    ranking: list[tuple[str, int, float]]

    def entity_ids(self) -> list[str]:
        return [eid for eid, _, _ in self.ranking]


def retrieve(
    index: EntityIndex,
    mention_vec: np.ndarray,
    k: int,
    mention_id: str = "",
) -> RetrievalResult:
    """Exact top-k scan: per-entity matching score, deterministic tie-break."""
    if len(index.entities) == 0:
        raise ValueError("cannot retrieve from an empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    scored = []
    for entity in index.entities:
        view_id, s = matching_score(mention_vec, entity)
        scored.append((entity.entity_id, view_id, s))
    scored.sort(key=lambda item: (-item[2], item[0], item[1]))
    return RetrievalResult(mention_id=mention_id, ranking=scored[:k])


def require_fresh(index: EntityIndex, model: DualEncoder) -> None:
    """Raise :class:`StaleIndexError` unless ``index`` was built from ``model``."""
    actual = fingerprint(model)
    if index.fingerprint != actual:
        raise StaleIndexError(
            f"index fingerprint {index.fingerprint[:12]}... does not match "
            f"checkpoint fingerprint {actual[:12]}..."
        )


# ---------------------------------------------------------------------------
# Index file: magic, fingerprint, dim, then per entity id/view ids/vectors
# ---------------------------------------------------------------------------

def save_index(index: EntityIndex, path: str | Path) -> None:
    parts = [INDEX_MAGIC]
    fp = index.fingerprint.encode("ascii")
    parts.append(struct.pack("<H", len(fp)))
    parts.append(fp)
    parts.append(struct.pack("<II", index.dim, len(index.entities)))
    for entity in index.entities:
        eid = entity.entity_id.encode("utf-8")
        parts.append(struct.pack("<H", len(eid)))
        parts.append(eid)
        parts.append(struct.pack("<I", len(entity.view_ids)))
        parts.append(np.ascontiguousarray(entity.view_ids, dtype="<u4").tobytes())
        parts.append(np.ascontiguousarray(entity.vectors, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_index(path: str | Path) -> EntityIndex:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if view[:5].tobytes() != INDEX_MAGIC:
        raise ValueError(f"{path}: bad index magic")
    offset = 5
    (fp_len,) = struct.unpack_from("<H", view, offset)
    offset += 2
    fp = view[offset:offset + fp_len].tobytes().decode("ascii")
    offset += fp_len
    dim, n_entities = struct.unpack_from("<II", view, offset)
    offset += 8
    entities = []
    for _ in range(n_entities):
        (eid_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        eid = view[offset:offset + eid_len].tobytes().decode("utf-8")
        offset += eid_len
        (n_views,) = struct.unpack_from("<I", view, offset)
        offset += 4
        view_ids = np.frombuffer(view, dtype="<u4", count=n_views, offset=offset)
        offset += 4 * n_views
        nfloats = n_views * dim
        if offset + 4 * nfloats > len(data):
            raise ValueError(f"{path}: truncated index")
        vectors = np.frombuffer(view, dtype="<f4", count=nfloats, offset=offset)
        offset += 4 * nfloats
        entities.append(IndexedEntity(
            entity_id=eid,
            view_ids=view_ids.astype(np.int64),
            vectors=vectors.reshape(n_views, dim).copy(),
        ))
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after index payload")
    return EntityIndex(entities=entities, fingerprint=fp, dim=dim)


# ---------------------------------------------------------------------------
# Retrieval results: one JSON record per mention
# ---------------------------------------------------------------------------

def write_results(results: list[RetrievalResult], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({
                "mention_id": r.mention_id,
                "ranking": [[eid, vid, s] for eid, vid, s in r.ranking],
            }) + "\n")


def read_results(path: str | Path) -> list[RetrievalResult]:
    results = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            rec = json.loads(raw)
            results.append(RetrievalResult(
                mention_id=rec["mention_id"],
                ranking=[(eid, int(vid), float(s)) for eid, vid, s in rec["ranking"]],
            ))
    return results
