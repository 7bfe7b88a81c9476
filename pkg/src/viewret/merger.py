"""Heuristic view merging: grow a view set by uniting distant view pairs.

Per iteration, all unordered pairs of current views (basic and previously
merged alike) are ranked by the Euclidean distance between their entity-side
encodings. The top pairs are united into new views — distant pairs carry
the least shared information, so their union is the most informative new
view; the ``close`` strategy inverts the ranking and exists for ablation.
Pairs whose union duplicates an existing sentence set are skipped in favor
of the next-ranked pair. Iteration stops at the view cap or the iteration
cap, whichever comes first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, encode_entity
from .views import View, ViewSet

__all__ = ["MergeConfig", "view_pair_distance", "merge_views", "heuristic_search"]

MERGE_STRATEGIES = ("distant", "close")


@dataclass
class MergeConfig:
    """Knobs for the merging search.

    ``max_views=None`` resolves to twice the entity's basic view count at
    search time.
    """

    top_k_pairs: int = 1
    max_iters: int = 5
    max_views: int | None = None
    strategy: str = "distant"

    def __post_init__(self) -> None:
        if self.top_k_pairs < 1:
            raise ValueError("top_k_pairs must be >= 1")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.max_views is not None and self.max_views < 1:
            raise ValueError("max_views must be >= 1")
        if self.strategy not in MERGE_STRATEGIES:
            raise ValueError(
                f"unknown strategy {self.strategy!r}; expected one of {MERGE_STRATEGIES}"
            )


def view_pair_distance(
    entity_params: EncoderParams,
    title_tokens: list[int],
    q1: View,
    q2: View,
    normalize: bool = False,
) -> float:
    """Euclidean distance between the two views' entity-side encodings."""
    v1 = encode_entity(entity_params, title_tokens, q1.tokens, normalize)
    v2 = encode_entity(entity_params, title_tokens, q2.tokens, normalize)
    return float(np.linalg.norm(v1 - v2))


def merge_views(viewset: ViewSet, q1: View, q2: View) -> View:
    """Unite two views of one entity into a fresh view (not yet registered).

    The sentence-index set is the union; tokens are rebuilt as the
    in-sentence-order concatenation of the member sentences. Merging a view
    with itself reproduces its sentence set and is dropped by the duplicate
    check downstream.
    """
    indices = tuple(sorted(set(q1.sentence_indices) | set(q2.sentence_indices)))
    return View(viewset.next_view_id(), indices, viewset.tokens_for(indices))


def heuristic_search(
    viewset: ViewSet,
    entity_params: EncoderParams,
    config: MergeConfig,
    normalize: bool = False,
) -> ViewSet:
    """Expand a view set by iterative distant-pair (or close-pair) merging.

    Returns a new ViewSet; the input is left untouched. Per iteration the
    pair pool is fixed to the views present at iteration start, so merges
    within an iteration are a batch. Fully deterministic: pair ties break
    on the smaller (view_id, view_id) pair, and merged views are appended
    in rank order with sequential fresh ids. A single-view set returns
    unchanged.
    """
    vs = viewset.copy()
    if config.max_iters == 0 or len(vs.views) < 2:
        return vs
    max_views = config.max_views if config.max_views is not None else 2 * vs.basic_count
    if max_views < len(vs.views):
        raise ValueError(
            f"max_views={max_views} below current view count {len(vs.views)}"
        )

    cache: dict[int, np.ndarray] = {}

    def encoding(view: View) -> np.ndarray:
        vec = cache.get(view.view_id)
        if vec is None:
            vec = encode_entity(entity_params, vs.title_tokens, view.tokens, normalize)
            cache[view.view_id] = vec
            view.cached_vector = vec
        return vec

    existing = vs.sentence_sets()
    for _ in range(config.max_iters):
        if len(vs.views) >= max_views:
            break
        pool = list(vs.views)
        ranked = []
        for a in range(len(pool)):
            for b in range(a + 1, len(pool)):
                d = float(np.linalg.norm(encoding(pool[a]) - encoding(pool[b])))
                ranked.append((d, pool[a].view_id, pool[b].view_id, a, b))
        if config.strategy == "distant":
            ranked.sort(key=lambda r: (-r[0], r[1], r[2]))
        else:
            ranked.sort(key=lambda r: (r[0], r[1], r[2]))

        merges = 0
        for _, _, _, a, b in ranked:
            if merges == config.top_k_pairs or len(vs.views) >= max_views:
                break
            merged = merge_views(vs, pool[a], pool[b])
            if merged.sentence_indices in existing:
                continue
            encoding(merged)
            vs.views.append(merged)
            existing.add(merged.sentence_indices)
            merges += 1
        if merges == 0:
            break
    return vs
