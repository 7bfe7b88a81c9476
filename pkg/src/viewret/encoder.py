"""Desk-scale trainable dual encoder.

Each side owns a token-embedding table and a square projection; a text
encoding is the projection applied to the mean of the embedded token
sequence. The entity side sees ``[CLS] title [ENT] view [SEP]``, the
mention side ``[CLS] ctx_l [Ms] mention [Me] ctx_r [SEP]``. Mean pooling
makes encodings order-insensitive within the assembled sequence; ordering
information enters only through truncation and template-token membership,
which is accepted at this scale.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CLS, ENT, ME, MS, SEP, MentionRecord, TokenSequence, Vocabulary, tokenize

__all__ = [
    "EncoderParams",
    "DualEncoder",
    "init_params",
    "init_dual",
    "entity_sequence",
    "mention_sequence",
    "encode_sequence",
    "encode_entity",
    "encode_mention",
    "serialize_model",
    "save_checkpoint",
    "load_checkpoint",
    "fingerprint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"MUVER1"


@dataclass
class EncoderParams:
    """One encoder side: token embeddings plus a linear output projection."""

    embeddings: np.ndarray  # (vocab_size, dim), float64
    projection: np.ndarray  # (dim, dim), float64

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.embeddings.copy(), self.projection.copy())


@dataclass
class DualEncoder:
    """Two independent encoder sides sharing one vocabulary."""

    vocab: Vocabulary
    entity_side: EncoderParams
    mention_side: EncoderParams

    @property
    def dim(self) -> int:
        return self.entity_side.dim

    def copy(self) -> "DualEncoder":
        return DualEncoder(self.vocab, self.entity_side.copy(), self.mention_side.copy())


def init_params(vocab: Vocabulary, dim: int, seed) -> EncoderParams:
    """Seeded init: embeddings uniform in [-0.1, 0.1], projection = I + small noise."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    embeddings = rng.uniform(-0.1, 0.1, size=(len(vocab), dim))
    projection = np.eye(dim) + rng.uniform(-0.01, 0.01, size=(dim, dim))
    return EncoderParams(embeddings, projection)


def init_dual(vocab: Vocabulary, dim: int, seed: int) -> DualEncoder:
    """Initialize both sides from independent streams of one seed."""
    entity_ss, mention_ss = np.random.SeedSequence(seed).spawn(2)
    return DualEncoder(
        vocab=vocab,
        entity_side=init_params(vocab, dim, entity_ss),
        mention_side=init_params(vocab, dim, mention_ss),
    )


def entity_sequence(title_tokens: TokenSequence, view_tokens: TokenSequence) -> TokenSequence:
    """[CLS] title [ENT] view [SEP]; an empty view leaves the title-only template."""
    return [CLS, *title_tokens, ENT, *view_tokens, SEP]


def mention_sequence(
    mention: MentionRecord,
    vocab: Vocabulary,
    max_ctx_tokens: int,
    frozen: bool | None = None,
) -> TokenSequence:
    """[CLS] ctx_l [Ms] mention [Me] ctx_r [SEP], truncated to ``max_ctx_tokens``.

    Context is cut symmetrically, keeping the tokens nearest the mention;
    when one side runs out, its leftover budget goes to the other side.
    With an odd remaining budget the left context gets the extra token.
    """
    mention_tokens = tokenize(mention.mention, vocab, frozen)
    budget = max_ctx_tokens - len(mention_tokens) - 4
    if budget < 0:
        raise ValueError(
            f"mention {mention.mention_id!r}: max_ctx_tokens={max_ctx_tokens} cannot fit "
            f"the mention ({len(mention_tokens)} tokens) plus 4 template tokens"
        )
    left = tokenize(mention.context_left, vocab, frozen)
    right = tokenize(mention.context_right, vocab, frozen)
    if len(left) + len(right) > budget:
        half = budget // 2
        if len(left) <= half:
            keep_left, keep_right = len(left), budget - len(left)
        elif len(right) <= half:
            keep_left, keep_right = budget - len(right), len(right)
        else:
            keep_left, keep_right = budget - half, half
        left = left[len(left) - keep_left:] if keep_left else []
        right = right[:keep_right]
    return [CLS, *left, MS, *mention_tokens, ME, *right, SEP]


def encode_sequence(
    params: EncoderParams, sequence: TokenSequence, normalize: bool = False
) -> np.ndarray:
    """Projection applied to the mean token embedding of ``sequence``."""
    rows = params.embeddings[np.asarray(sequence, dtype=np.intp)]
    vec = params.projection @ rows.mean(axis=0)
    if normalize:
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec = vec / norm
    return vec


def encode_entity(
    params: EncoderParams,
    title_tokens: TokenSequence,
    view_tokens: TokenSequence,
    normalize: bool = False,
) -> np.ndarray:
    return encode_sequence(params, entity_sequence(title_tokens, view_tokens), normalize)


def encode_mention(
    params: EncoderParams,
    mention: MentionRecord,
    vocab: Vocabulary,
    max_ctx_tokens: int,
    normalize: bool = False,
) -> np.ndarray:
    return encode_sequence(
        params, mention_sequence(mention, vocab, max_ctx_tokens), normalize
    )


# ---------------------------------------------------------------------------
# Checkpoint format: magic, dim, vocab size, four float32 matrices, vocabulary
# ---------------------------------------------------------------------------

def _matrix_bytes(matrix: np.ndarray) -> bytes:
    return np.ascontiguousarray(matrix, dtype="<f4").tobytes()


def serialize_model(model: DualEncoder) -> bytes:
    vocab_size = len(model.vocab)
    if model.entity_side.embeddings.shape != (vocab_size, model.dim):
        raise ValueError("entity-side embedding shape does not match vocabulary")
    if model.mention_side.embeddings.shape != (vocab_size, model.dim):
        raise ValueError("mention-side embedding shape does not match vocabulary")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", model.dim, vocab_size)]
    for side in (model.entity_side, model.mention_side):
        parts.append(_matrix_bytes(side.embeddings))
        parts.append(_matrix_bytes(side.projection))
    regular = model.vocab.regular_tokens()
    parts.append(struct.pack("<I", len(regular)))
    for token in regular:
        raw = token.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    return b"".join(parts)


def save_checkpoint(model: DualEncoder, path: str | Path) -> None:
    Path(path).write_bytes(serialize_model(model))


def load_checkpoint(path: str | Path) -> DualEncoder:
    """Load and validate a checkpoint written by :func:`save_checkpoint`."""
    data = Path(path).read_bytes()
    view = memoryview(data)
    if view[:6].tobytes() != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    offset = 6
    dim, vocab_size = struct.unpack_from("<II", view, offset)
    offset += 8

    def take_matrix(rows: int, cols: int) -> np.ndarray:
        nonlocal offset
        nbytes = rows * cols * 4
        if offset + nbytes > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        mat = np.frombuffer(view, dtype="<f4", count=rows * cols, offset=offset)
        offset += nbytes
        return mat.reshape(rows, cols).astype(np.float64)

    sides = []
    for _ in range(2):
        embeddings = take_matrix(vocab_size, dim)
        projection = take_matrix(dim, dim)
        sides.append(EncoderParams(embeddings, projection))

    (n_regular,) = struct.unpack_from("<I", view, offset)
    offset += 4
    expected = vocab_size - 7
    if n_regular != expected:
        raise ValueError(
            f"{path}: vocabulary size mismatch (header {vocab_size}, "
            f"serialized tokens {n_regular})"
        )
    tokens = []
    for _ in range(n_regular):
        (length,) = struct.unpack_from("<I", view, offset)
        offset += 4
        tokens.append(view[offset:offset + length].tobytes().decode("utf-8"))
        offset += length
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    vocab = Vocabulary.from_regular_tokens(tokens, frozen=True)
    return DualEncoder(vocab, sides[0], sides[1])


def fingerprint(model: DualEncoder) -> str:
    """Stable content hash of a model; indexes record it for staleness checks."""
    return hashlib.sha256(serialize_model(model)).hexdigest()
