"""Caption handling: tokenization, vocabulary, and a GRU sentence encoder.

The encoder embeds each token, runs a single-layer GRU over the sequence,
and represents the caption by the hidden state after the last token.
Forward passes cache everything needed for an exact reverse-mode gradient.
"""

from __future__ import annotations

import string
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, EmptyCaptionError, ValidationError

UNK_INDEX = 0
UNK_TOKEN = "<unk>"

_PUNCT = frozenset(string.punctuation)


def tokenize(text: str) -> list[str]:
    """Split text into lowercase tokens; ASCII punctuation becomes its own token.

    The rule is deterministic: NFC-normalize, lowercase, split on Unicode
    whitespace, then split every ASCII punctuation character out as a
    standalone token.  "two,dogs" -> ["two", ",", "dogs"].
    """
    text = unicodedata.normalize("NFC", text).lower()
    tokens: list[str] = []
    for chunk in text.split():
        buf: list[str] = []
        for ch in chunk:
            if ch in _PUNCT:
                if buf:
                    tokens.append("".join(buf))
                    buf.clear()
                tokens.append(ch)
            else:
                buf.append(ch)
        if buf:
            tokens.append("".join(buf))
    return tokens


@dataclass
class Vocabulary:
    """Dense token-to-index map; index 0 is reserved for unknown words."""

    word_to_index: dict[str, int]
    max_size: int

    def __post_init__(self) -> None:
        if self.max_size < 1:
            raise ValidationError("max_size must be >= 1")
        if len(self.word_to_index) > self.max_size:
            raise ValidationError("vocabulary exceeds its capacity")
        indices = sorted(self.word_to_index.values())
        if indices != list(range(1, len(indices) + 1)):
            raise ValidationError("word indices must densely cover 1..V-1")

    @property
    def size(self) -> int:
        """Number of embedding rows, the unknown-word slot included."""
        return len(self.word_to_index) + 1

    def index(self, token: str) -> int:
        return self.word_to_index.get(token, UNK_INDEX)

    def words_in_order(self) -> list[str]:
        """Words sorted by index (1..V-1); used for serialization."""
        return [w for w, _ in sorted(self.word_to_index.items(), key=lambda kv: kv[1])]

    @classmethod
    def from_words(cls, words: Sequence[str], max_size: int) -> "Vocabulary":
        return cls({w: i + 1 for i, w in enumerate(words)}, max_size)


def build_vocab(captions: Iterable[str], max_size: int) -> Vocabulary:
    """Keep the max_size most frequent tokens; ties break lexicographically."""
    if max_size < 1:
        raise ValidationError("max_size must be >= 1")
    counts: Counter[str] = Counter()
    for caption in captions:
        counts.update(tokenize(caption))
    if not counts:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary.from_words([w for w, _ in ranked[:max_size]], max_size)


def encode(tokens: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    """Map tokens to vocabulary indices; unknown tokens map to UNK_INDEX."""
    return np.array([vocab.index(t) for t in tokens], dtype=np.int64)


@dataclass(eq=False)
class GruParams:
    """Single-layer GRU weights: W_* act on inputs, U_* on the hidden state."""

    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_h: np.ndarray

    def __post_init__(self) -> None:
        d_h, d_w = self.W_z.shape
        for name in ("W_z", "W_r", "W_h"):
            if getattr(self, name).shape != (d_h, d_w):
                raise DimensionError(f"{name} must have shape ({d_h}, {d_w})")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (d_h, d_h):
                raise DimensionError(f"{name} must have shape ({d_h}, {d_h})")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (d_h,):
                raise DimensionError(f"{name} must have shape ({d_h},)")

    @property
    def d_h(self) -> int:
        return self.W_z.shape[0]

    @property
    def d_w(self) -> int:
        return self.W_z.shape[1]


@dataclass(eq=False)
class GruCache:
    """Intermediate states of one forward pass, kept for backprop."""

    indices: np.ndarray
    xs: np.ndarray        # (T, d_w) embedded inputs
    h: np.ndarray         # (T+1, d_h); h[0] is the zero initial state
    z: np.ndarray         # (T, d_h) update gates
    r: np.ndarray         # (T, d_h) reset gates
    h_tilde: np.ndarray   # (T, d_h) candidate states
    emb: np.ndarray
    gru: GruParams


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_forward(
    indices: Sequence[int] | np.ndarray,
    emb: np.ndarray,
    gru: GruParams,
) -> tuple[np.ndarray, GruCache]:
    """Run the GRU over a token-index sequence.

    Returns the final hidden state (the caption vector) and a cache holding
    every intermediate needed by gru_backward.  The recurrence, starting
    from h_0 = 0:

        z_t = sigmoid(W_z x_t + U_z h_{t-1} + b_z)
        r_t = sigmoid(W_r x_t + U_r h_{t-1} + b_r)
        h~_t = tanh(W_h x_t + U_h (r_t * h_{t-1}) + b_h)
        h_t = (1 - z_t) * h_{t-1} + z_t * h~_t
    """
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise EmptyCaptionError("cannot encode an empty token sequence")
    if emb.shape[1] != gru.d_w:
        raise DimensionError(
            f"embedding width {emb.shape[1]} does not match GRU input width {gru.d_w}"
        )
    t_len, d_h = idx.size, gru.d_h
    dtype = emb.dtype
    xs = emb[idx]
    h = np.zeros((t_len + 1, d_h), dtype=dtype)
    z = np.empty((t_len, d_h), dtype=dtype)
    r = np.empty((t_len, d_h), dtype=dtype)
    h_tilde = np.empty((t_len, d_h), dtype=dtype)
    for t in range(t_len):
        x_t, h_prev = xs[t], h[t]
        z[t] = _sigmoid(gru.W_z @ x_t + gru.U_z @ h_prev + gru.b_z)
        r[t] = _sigmoid(gru.W_r @ x_t + gru.U_r @ h_prev + gru.b_r)
        h_tilde[t] = np.tanh(gru.W_h @ x_t + gru.U_h @ (r[t] * h_prev) + gru.b_h)
        h[t + 1] = (1.0 - z[t]) * h_prev + z[t] * h_tilde[t]
    cache = GruCache(indices=idx, xs=xs, h=h, z=z, r=r, h_tilde=h_tilde, emb=emb, gru=gru)
    return h[t_len].copy(), cache


def gru_backward(
    cache: GruCache,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, GruParams]:
    """Exact reverse-mode gradients of gru_forward.

    Returns (d_embedding, d_gru): a dense gradient matrix for the embedding
    table (rows of unused tokens stay zero) and gradients in a GruParams
    container mirroring the parameter shapes.
    """
    gru, emb = cache.gru, cache.emb
    d_h = gru.d_h
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (d_h,):
        raise DimensionError(f"upstream gradient must have shape ({d_h},)")

    d_emb = np.zeros_like(emb)
    g = GruParams(
        W_z=np.zeros_like(gru.W_z), W_r=np.zeros_like(gru.W_r), W_h=np.zeros_like(gru.W_h),
        U_z=np.zeros_like(gru.U_z), U_r=np.zeros_like(gru.U_r), U_h=np.zeros_like(gru.U_h),
        b_z=np.zeros_like(gru.b_z), b_r=np.zeros_like(gru.b_r), b_h=np.zeros_like(gru.b_h),
    )

    dh = grad_out.astype(emb.dtype, copy=True)
    for t in range(cache.indices.size - 1, -1, -1):
        h_prev = cache.h[t]
        z_t, r_t, ht = cache.z[t], cache.r[t], cache.h_tilde[t]
        x_t = cache.xs[t]

        dz = dh * (ht - h_prev)
        da_h = (dh * z_t) * (1.0 - ht * ht)
        g.W_h += np.outer(da_h, x_t)
        g.U_h += np.outer(da_h, r_t * h_prev)
        g.b_h += da_h

        drh = gru.U_h.T @ da_h            # gradient on r_t * h_{t-1}
        da_r = (drh * h_prev) * r_t * (1.0 - r_t)
        g.W_r += np.outer(da_r, x_t)
        g.U_r += np.outer(da_r, h_prev)
        g.b_r += da_r

        da_z = dz * z_t * (1.0 - z_t)
        g.W_z += np.outer(da_z, x_t)
        g.U_z += np.outer(da_z, h_prev)
        g.b_z += da_z

        d_emb[cache.indices[t]] += gru.W_z.T @ da_z + gru.W_r.T @ da_r + gru.W_h.T @ da_h
        dh = dh * (1.0 - z_t) + gru.U_z.T @ da_z + gru.U_r.T @ da_r + drh * r_t
    return d_emb, g
