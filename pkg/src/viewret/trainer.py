"""Contrastive training of the dual encoder with exact analytic gradients.

Each step scores every batch mention against every batch candidate's best
single view under the current parameters, applies a softmax cross-entropy
(NCE) loss against the gold column, and backpropagates through the score
of the selected view only — the argmax selection itself is frozen within
the step, since the subset/argmax operation is not differentiable. In-batch
gold entities act as negatives for the other mentions; mined hard negatives
can be appended to the batch candidate set.

Everything runs in float64 and is bit-reproducible for a fixed seed: the
mention shuffle, batch assembly, gradient accumulation order, and parameter
update order are all fixed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import MentionRecord, TokenSequence, Vocabulary
from .encoder import (
    DualEncoder,
    encode_mention,
    entity_sequence,
    init_dual,
    mention_sequence,
)
from .matcher import EntityIndex, retrieve
from .views import ViewSet

__all__ = [
    "TrainConfig",
    "TrainBatch",
    "StepRecord",
    "TrainResult",
    "nce_loss",
    "softmax_rows",
    "build_batch",
    "batch_loss_and_grads",
    "loss_with_selection",
    "grad_check",
    "mine_hard_negatives",
    "train",
]

OPTIMIZERS = ("sgd", "adam")


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 5
    learning_rate: float = 0.05
    weight_decay: float = 0.0
    warmup_ratio: float = 0.1
    seed: int = 0
    n_hard_negatives: int = 0
    max_view_tokens: int = 40
    max_ctx_tokens: int = 128
    dim: int = 16
    optimizer: str = "sgd"
    normalize: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (in-batch negatives need company)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.n_hard_negatives < 0:
            raise ValueError("n_hard_negatives must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")


@dataclass
class TrainBatch:
    """Pre-assembled token sequences for one training step.

    Candidates are the batch's deduplicated gold entities plus any attached
    hard negatives; each mention's gold appears exactly once, at column
    ``gold_cols[i]``. View sequences already carry the entity template.
    """

    mention_ids: list[str]
    mention_seqs: list[TokenSequence]
    cand_entity_ids: list[str]
    cand_view_seqs: list[list[TokenSequence]]
    cand_view_ids: list[list[int]]
    gold_cols: list[int]


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: DualEncoder
    history: list[StepRecord] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r.loss for r in self.history]


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax, max-shifted for stability (shift-invariant)."""
    scores = np.asarray(scores, dtype=np.float64)
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def nce_loss(scores: np.ndarray, gold_cols) -> float:
    """Mean cross-entropy of each row's softmax against its gold column."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError("scores must be a (mentions x candidates) matrix")
    gold = np.asarray(gold_cols, dtype=np.int64)
    if gold.shape != (scores.shape[0],):
        raise ValueError("need exactly one gold column per mention row")
    if gold.size and (gold.min() < 0 or gold.max() >= scores.shape[1]):
        raise ValueError("gold column missing from the candidate set")
    # Work entirely in the max-shifted frame: numerically stable, and a
    # constant added to a whole row cancels exactly.
    shifted = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(lse - shifted[np.arange(len(gold)), gold]))


def build_batch(
    mentions: list[MentionRecord],
    mention_seqs: list[TokenSequence],
    view_seqs_by_entity: dict[str, tuple[list[TokenSequence], list[int]]],
    hard_negatives: dict[str, list[str]] | None = None,
) -> TrainBatch:
    """Assemble candidates: in-order deduplicated golds, then hard negatives."""
    cand_ids: list[str] = []
    positions: dict[str, int] = {}
    for m in mentions:
        if m.gold_entity_id not in positions:
            positions[m.gold_entity_id] = len(cand_ids)
            cand_ids.append(m.gold_entity_id)
    if hard_negatives:
        for m in mentions:
            for eid in hard_negatives.get(m.mention_id, ()):
                if eid not in positions:
                    positions[eid] = len(cand_ids)
                    cand_ids.append(eid)
    view_seqs, view_ids = [], []
    for eid in cand_ids:
        if eid not in view_seqs_by_entity:
            raise ValueError(f"no view set for candidate entity {eid!r}")
        seqs, vids = view_seqs_by_entity[eid]
        view_seqs.append(seqs)
        view_ids.append(vids)
    return TrainBatch(
        mention_ids=[m.mention_id for m in mentions],
        mention_seqs=mention_seqs,
        cand_entity_ids=cand_ids,
        cand_view_seqs=view_seqs,
        cand_view_ids=view_ids,
        gold_cols=[positions[m.gold_entity_id] for m in mentions],
    )


def _mean_rows(embeddings: np.ndarray, seqs: list[TokenSequence]) -> np.ndarray:
    out = np.empty((len(seqs), embeddings.shape[1]))
    for i, seq in enumerate(seqs):
        out[i] = embeddings[np.asarray(seq, dtype=np.intp)].mean(axis=0)
    return out


def _unit_rows(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(matrix, axis=1)
    return matrix / norms[:, None], norms


def _forward(model: DualEncoder, batch: TrainBatch, normalize: bool):
    """Encode batch mentions and all candidate views; select best views.

    Returns everything the backward pass needs; ``sel_flat[i, j]`` indexes
    the flat view list with mention i's best view of candidate j (ties take
    the smallest view id, i.e. the first occurrence). With ``normalize``
    the scored vectors are unit-normalized (cosine scoring).
    """
    flat_view_seqs: list[TokenSequence] = []
    offsets = [0]
    for seqs in batch.cand_view_seqs:
        flat_view_seqs.extend(seqs)
        offsets.append(len(flat_view_seqs))

    U = _mean_rows(model.mention_side.embeddings, batch.mention_seqs)
    W = _mean_rows(model.entity_side.embeddings, flat_view_seqs)
    G = U @ model.mention_side.projection.T
    F = W @ model.entity_side.projection.T
    if normalize:
        Gs, g_norms = _unit_rows(G)
        Fs, f_norms = _unit_rows(F)
    else:
        Gs, g_norms = G, None
        Fs, f_norms = F, None

    all_scores = Gs @ Fs.T  # (mentions, total views)
    n_mentions = len(batch.mention_seqs)
    n_cands = len(batch.cand_entity_ids)
    scores = np.empty((n_mentions, n_cands))
    sel_flat = np.empty((n_mentions, n_cands), dtype=np.intp)
    for j in range(n_cands):
        lo, hi = offsets[j], offsets[j + 1]
        seg = all_scores[:, lo:hi]
        scores[:, j] = seg.max(axis=1)
        sel_flat[:, j] = lo + seg.argmax(axis=1)
    return U, W, Gs, Fs, g_norms, f_norms, flat_view_seqs, scores, sel_flat


def batch_loss_and_grads(model: DualEncoder, batch: TrainBatch, normalize: bool = False):
    """Loss plus exact gradients of all four matrices (selection frozen).

    Returns ``(loss, grads, sel_flat)``, with grads keyed by
    ``entity_embeddings`` / ``entity_projection`` / ``mention_embeddings``
    / ``mention_projection``.
    """
    U, W, Gs, Fs, g_norms, f_norms, flat_view_seqs, scores, sel_flat = _forward(
        model, batch, normalize)
    n_mentions = len(batch.mention_seqs)
    gold = np.asarray(batch.gold_cols, dtype=np.intp)

    probs = softmax_rows(scores)
    loss = nce_loss(scores, gold)
    d_scores = probs.copy()
    d_scores[np.arange(n_mentions), gold] -= 1.0
    d_scores /= n_mentions

    dim = model.dim
    # Mention side: score cells see the (possibly unit) vector of the
    # selected view.
    F_sel = Fs[sel_flat]                                  # (B, C, d)
    dG = (d_scores[:, :, None] * F_sel).sum(axis=1)       # (B, d)
    if normalize:
        # d/dg (g/|g|) pulls out the radial component.
        dG = (dG - Gs * (Gs * dG).sum(axis=1, keepdims=True)) / g_norms[:, None]
    d_mention_proj = dG.T @ U
    dU = dG @ model.mention_side.projection
    d_mention_emb = np.zeros_like(model.mention_side.embeddings)
    for i, seq in enumerate(batch.mention_seqs):
        np.add.at(d_mention_emb, np.asarray(seq, dtype=np.intp), dU[i] / len(seq))

    # Entity side: every (mention, candidate) cell contributes to its
    # selected view only.
    dF = np.zeros((len(flat_view_seqs), dim))
    contrib = (d_scores[:, :, None] * Gs[:, None, :]).reshape(-1, dim)
    np.add.at(dF, sel_flat.ravel(), contrib)
    if normalize:
        dF = (dF - Fs * (Fs * dF).sum(axis=1, keepdims=True)) / f_norms[:, None]
    d_entity_proj = dF.T @ W
    dW = dF @ model.entity_side.projection
    d_entity_emb = np.zeros_like(model.entity_side.embeddings)
    for v, seq in enumerate(flat_view_seqs):
        if dW[v].any():
            np.add.at(d_entity_emb, np.asarray(seq, dtype=np.intp), dW[v] / len(seq))

    grads = {
        "entity_embeddings": d_entity_emb,
        "entity_projection": d_entity_proj,
        "mention_embeddings": d_mention_emb,
        "mention_projection": d_mention_proj,
    }
    return loss, grads, sel_flat


def loss_with_selection(
    model: DualEncoder,
    batch: TrainBatch,
    sel_flat: np.ndarray,
    normalize: bool = False,
) -> float:
    """NCE loss with a frozen view selection (the grad-check objective)."""
    flat_view_seqs: list[TokenSequence] = []
    for seqs in batch.cand_view_seqs:
        flat_view_seqs.extend(seqs)
    U = _mean_rows(model.mention_side.embeddings, batch.mention_seqs)
    W = _mean_rows(model.entity_side.embeddings, flat_view_seqs)
    G = U @ model.mention_side.projection.T
    F = W @ model.entity_side.projection.T
    if normalize:
        G = _unit_rows(G)[0]
        F = _unit_rows(F)[0]
    scores = np.einsum("id,ijd->ij", G, F[sel_flat])
    return nce_loss(scores, batch.gold_cols)


def grad_check(
    model: DualEncoder,
    batch: TrainBatch,
    epsilon: float = 1e-3,
    samples_per_matrix: int = 100,
    seed: int = 0,
    normalize: bool = False,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The view selection is computed once and frozen across every loss
    evaluation. Embedding rows are sampled among tokens actually present in
    the batch (untouched rows have exactly zero gradient by construction).
    """
    loss0, grads, sel_flat = batch_loss_and_grads(model, batch, normalize)
    del loss0

    entity_tokens = sorted({t for seqs in batch.cand_view_seqs for s in seqs for t in s})
    mention_tokens = sorted({t for s in batch.mention_seqs for t in s})
    targets = [
        (model.entity_side.embeddings, grads["entity_embeddings"], entity_tokens),
        (model.entity_side.projection, grads["entity_projection"], None),
        (model.mention_side.embeddings, grads["mention_embeddings"], mention_tokens),
        (model.mention_side.projection, grads["mention_projection"], None),
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for matrix, grad, row_pool in targets:
        rows = (np.asarray(row_pool, dtype=np.intp)[rng.integers(0, len(row_pool), samples_per_matrix)]
                if row_pool is not None
                else rng.integers(0, matrix.shape[0], samples_per_matrix))
        cols = rng.integers(0, matrix.shape[1], samples_per_matrix)
        for r, c in zip(rows, cols):
            original = matrix[r, c]
            matrix[r, c] = original + epsilon
            hi = loss_with_selection(model, batch, sel_flat, normalize)
            matrix[r, c] = original - epsilon
            lo = loss_with_selection(model, batch, sel_flat, normalize)
            matrix[r, c] = original
            numeric = (hi - lo) / (2.0 * epsilon)
            analytic = grad[r, c]
            err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


def mine_hard_negatives(
    index: EntityIndex,
    mentions: list[MentionRecord],
    model: DualEncoder,
    n_hard: int,
    max_ctx_tokens: int = 128,
    normalize: bool = False,
) -> dict[str, list[str]]:
    """Top non-gold entities per mention, by matching score against ``index``."""
    if n_hard == 0:
        return {}
    if n_hard >= len(index.entities):
        raise ValueError(
            f"n_hard={n_hard} must be smaller than the corpus size {len(index.entities)}"
        )
    mined: dict[str, list[str]] = {}
    for m in mentions:
        vec = encode_mention(model.mention_side, m, model.vocab, max_ctx_tokens, normalize)
        result = retrieve(index, vec, n_hard + 1, mention_id=m.mention_id)
        mined[m.mention_id] = [
            eid for eid in result.entity_ids() if eid != m.gold_entity_id
        ][:n_hard]
    return mined


def _apply_update(param: np.ndarray, grad: np.ndarray, lr: float, weight_decay: float,
                  adam_state: dict | None, adam_t: int) -> None:
    if weight_decay:
        grad = grad + weight_decay * param
    if adam_state is None:
        param -= lr * grad
        return
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    adam_state["m"] = beta1 * adam_state["m"] + (1 - beta1) * grad
    adam_state["v"] = beta2 * adam_state["v"] + (1 - beta2) * grad * grad
    m_hat = adam_state["m"] / (1 - beta1 ** adam_t)
    v_hat = adam_state["v"] / (1 - beta2 ** adam_t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


def train(
    config: TrainConfig,
    vocab: Vocabulary,
    viewsets: list[ViewSet],
    mentions: list[MentionRecord],
    *,
    hard_negatives: dict[str, list[str]] | None = None,
    initial_model: DualEncoder | None = None,
) -> TrainResult:
    """Run the full training loop; deterministic given the config seed.

    Mentions are reshuffled per epoch; the final short batch is kept. The
    learning rate warms up linearly over ``warmup_ratio`` of total steps and
    stays constant afterwards. When ``initial_model`` is omitted, a fresh
    model is initialized from the config seed after the mention contexts
    have been folded into the vocabulary.
    """
    if config.batch_size > len(mentions):
        raise ValueError(
            f"batch_size={config.batch_size} exceeds mention count {len(mentions)}"
        )
    if initial_model is not None:
        mention_seqs = [
            mention_sequence(m, initial_model.vocab, config.max_ctx_tokens, frozen=True)
            for m in mentions
        ]
        model = initial_model.copy()
    else:
        mention_seqs = [
            mention_sequence(m, vocab, config.max_ctx_tokens) for m in mentions
        ]
        model = init_dual(vocab, config.dim, config.seed)

    view_seqs_by_entity: dict[str, tuple[list[TokenSequence], list[int]]] = {}
    for vs in viewsets:
        seqs = [entity_sequence(vs.title_tokens, v.tokens) for v in vs.views]
        view_seqs_by_entity[vs.entity_id] = (seqs, [v.view_id for v in vs.views])
    for m in mentions:
        if m.gold_entity_id not in view_seqs_by_entity:
            raise ValueError(f"mention {m.mention_id!r}: gold entity has no view set")

    n = len(mentions)
    n_batches = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * n_batches
    warmup_steps = int(config.warmup_ratio * total_steps)

    rng = np.random.default_rng(config.seed)
    adam = None
    if config.optimizer == "adam":
        adam = {
            name: {"m": np.zeros_like(p), "v": np.zeros_like(p)}
            for name, p in _named_params(model)
        }

    history: list[StepRecord] = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for b in range(n_batches):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            batch = build_batch(
                [mentions[i] for i in idx],
                [mention_seqs[i] for i in idx],
                view_seqs_by_entity,
                hard_negatives,
            )
            loss, grads, _ = batch_loss_and_grads(model, batch, config.normalize)
            lr = config.learning_rate
            if step < warmup_steps:
                lr = config.learning_rate * (step + 1) / warmup_steps
            for name, param in _named_params(model):
                _apply_update(
                    param, grads[name], lr, config.weight_decay,
                    adam[name] if adam is not None else None, step + 1,
                )
            history.append(StepRecord(step=step, loss=loss, lr=lr))
            step += 1
    return TrainResult(model=model, history=history)


def _named_params(model: DualEncoder):
    return [
        ("entity_embeddings", model.entity_side.embeddings),
        ("entity_projection", model.entity_side.projection),
        ("mention_embeddings", model.mention_side.embeddings),
        ("mention_projection", model.mention_side.projection),
    ]
