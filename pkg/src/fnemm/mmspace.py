"""The joint image-caption space: affine image projection, cosine similarity,
and the pairwise ranking hinge loss with exact gradients.

For a batch of aligned pairs (i_k, c_k) and margin alpha, the loss sums
hinge terms over every in-batch contrastive pairing, on both sides:

    L = sum_k sum_{j!=k} max(0, alpha - s(i_k, c_k) + s(i_k, c_j))
      + sum_k sum_{j!=k} max(0, alpha - s(i_k, c_k) + s(i_j, c_k))

where s is cosine similarity.  Image inputs are fixed ternary vectors and
receive no gradient; the affine map, GRU, and word embeddings do.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateVectorWarning, DimensionError, ValidationError
from .fne import FneVector
from .textenc import GruParams, gru_backward, gru_forward

# Vectors with a norm at or below this are degenerate: their similarity is
# defined as 0 and they propagate no gradient.
NORM_EPS = 1e-12


@dataclass(eq=False)
class AffineParams:
    """Affine image projection into the joint space: out = W @ fne + b."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError("affine bias must match the projection's output rows")

    @property
    def d_h(self) -> int:
        return self.W.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[1]


@dataclass(eq=False)
class ModelParams:
    """All trainable parameters: word embeddings, GRU, affine projection."""

    embedding: np.ndarray
    gru: GruParams
    affine: AffineParams

    def __post_init__(self) -> None:
        if self.embedding.ndim != 2:
            raise DimensionError("embedding table must be 2-D (vocab x width)")
        if self.embedding.shape[1] != self.gru.d_w:
            raise DimensionError("embedding width must match GRU input width")
        if self.gru.d_h != self.affine.d_h:
            raise DimensionError("GRU and affine projection must share d_h")

    @property
    def d_h(self) -> int:
        return self.gru.d_h

    @property
    def dtype(self) -> np.dtype:
        return self.embedding.dtype

    def astype(self, dtype) -> "ModelParams":
        return map_tensors(self, lambda a: a.astype(dtype))

    def copy(self) -> "ModelParams":
        return map_tensors(self, np.copy)


@dataclass(eq=False)
class ModelGrads:
    """Gradients in the same tree shape as ModelParams."""

    embedding: np.ndarray
    gru: GruParams
    affine: AffineParams

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "ModelGrads":
        return map_tensors(params, np.zeros_like, out_cls=cls)


# Canonical flat view of the parameter tree; checkpoint serialization and the
# optimizer iterate tensors in exactly this order.
TENSOR_NAMES = (
    "embedding",
    "gru.W_z", "gru.W_r", "gru.W_h",
    "gru.U_z", "gru.U_r", "gru.U_h",
    "gru.b_z", "gru.b_r", "gru.b_h",
    "affine.W", "affine.b",
)

GRU_TENSOR_NAMES = tuple(n for n in TENSOR_NAMES if n.startswith("gru."))


def get_tensor(tree: ModelParams | ModelGrads, name: str) -> np.ndarray:
    obj = tree
    for part in name.split("."):
        obj = getattr(obj, part)
    return obj


def tensors(tree: ModelParams | ModelGrads) -> dict[str, np.ndarray]:
    return {name: get_tensor(tree, name) for name in TENSOR_NAMES}


def from_tensors(arrays: dict[str, np.ndarray], out_cls=ModelParams):
    gru = GruParams(**{k[4:]: arrays[k] for k in TENSOR_NAMES if k.startswith("gru.")})
    affine = AffineParams(W=arrays["affine.W"], b=arrays["affine.b"])
    return out_cls(embedding=arrays["embedding"], gru=gru, affine=affine)


def map_tensors(tree, fn, *rest, out_cls=None):
    """Apply fn leafwise over one or more parameter/gradient trees."""
    arrays = {
        name: fn(get_tensor(tree, name), *(get_tensor(r, name) for r in rest))
        for name in TENSOR_NAMES
    }
    return from_tensors(arrays, out_cls=out_cls or type(tree))


@dataclass
class PairBatch:
    """Aligned image/caption embeddings; pair k is (images[k], captions[k])."""

    images: np.ndarray
    captions: np.ndarray

    def __post_init__(self) -> None:
        images = np.asarray(self.images)
        captions = np.asarray(self.captions)
        if images.size == 0 or captions.size == 0:
            raise ValidationError("a batch needs at least one pair")
        self.images = images[None, :] if images.ndim == 1 else images
        self.captions = captions[None, :] if captions.ndim == 1 else captions
        if self.images.shape != self.captions.shape:
            raise DimensionError(
                f"images {self.images.shape} and captions {self.captions.shape} must align"
            )

    @property
    def size(self) -> int:
        return self.images.shape[0]


def project_image(fne, affine: AffineParams) -> np.ndarray:
    """Project a ternary image vector into the joint space: W @ v + b."""
    values = fne.values if isinstance(fne, FneVector) else np.asarray(fne)
    if values.shape != (affine.d_in,):
        raise DimensionError(
            f"image vector has {values.shape} entries, projection expects ({affine.d_in},)"
        )
    return affine.W @ values.astype(affine.W.dtype) + affine.b


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity in [-1, 1]; degenerate (zero-norm) inputs give 0."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"cosine needs equal-length vectors, got {a.shape} and {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na <= NORM_EPS or nb <= NORM_EPS:
        warnings.warn("zero-norm vector in cosine; similarity set to 0", DegenerateVectorWarning)
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def similarity_matrix(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, rows x cols; degenerate vectors give 0."""
    rows = np.atleast_2d(rows)
    cols = np.atleast_2d(cols)
    if rows.shape[1] != cols.shape[1]:
        raise DimensionError(
            f"row vectors ({rows.shape[1]}) and column vectors ({cols.shape[1]}) differ in width"
        )
    rn = np.linalg.norm(rows, axis=1)
    cn = np.linalg.norm(cols, axis=1)
    row_ok = rn > NORM_EPS
    col_ok = cn > NORM_EPS
    if not (row_ok.all() and col_ok.all()):
        warnings.warn(
            "zero-norm vector in similarity matrix; its similarities are 0",
            DegenerateVectorWarning,
        )
    denom = np.outer(np.where(row_ok, rn, 1.0), np.where(col_ok, cn, 1.0))
    sims = (rows @ cols.T) / denom
    sims[~row_ok, :] = 0.0
    sims[:, ~col_ok] = 0.0
    return sims


def _hinge_costs(sims: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Off-diagonal hinge arguments for the image side and the caption side."""
    diag = np.diagonal(sims)
    base = alpha - diag[:, None]
    cost_img = base + sims       # [k, j]: alpha - s(i_k, c_k) + s(i_k, c_j)
    cost_cap = base + sims.T     # [k, j]: alpha - s(i_k, c_k) + s(i_j, c_k)
    np.fill_diagonal(cost_img, 0.0)
    np.fill_diagonal(cost_cap, 0.0)
    return cost_img, cost_cap


def ranking_loss(batch: PairBatch, alpha: float, reduction: str = "sum") -> float:
    """Pairwise ranking hinge loss over every in-batch contrastive pair.

    The default "sum" aggregation matches the loss definition; "mean"
    divides by the number of contrastive terms, 2B(B-1).
    """
    if alpha < 0:
        raise ValidationError("margin alpha must be >= 0")
    if reduction not in ("sum", "mean"):
        raise ValidationError(f"unknown reduction {reduction!r}")
    sims = similarity_matrix(batch.images, batch.captions)
    cost_img, cost_cap = _hinge_costs(sims, alpha)
    total = float(np.maximum(cost_img, 0.0).sum() + np.maximum(cost_cap, 0.0).sum())
    if reduction == "mean":
        b = batch.size
        total = total / (2 * b * (b - 1)) if b > 1 else 0.0
    return total


def loss_backward(
    fne_vectors: Sequence,
    token_sequences: Sequence[np.ndarray],
    params: ModelParams,
    alpha: float,
) -> tuple[float, ModelGrads]:
    """Loss and exact gradients for a batch of (image, caption) pairs.

    fne_vectors are fixed inputs (FneVector or plain arrays) and receive no
    gradient; token_sequences are index sequences for the GRU.  The hinge
    subgradient at an exactly-zero argument is 0.
    """
    if len(fne_vectors) != len(token_sequences):
        raise DimensionError("batch needs one caption per image")
    dtype = params.dtype

    img_in = np.stack(
        [(v.values if isinstance(v, FneVector) else np.asarray(v)) for v in fne_vectors]
    ).astype(dtype)
    if img_in.shape[1] != params.affine.d_in:
        raise DimensionError(
            f"image vectors have {img_in.shape[1]} features, projection expects {params.affine.d_in}"
        )
    images = img_in @ params.affine.W.T + params.affine.b

    encoded = [gru_forward(seq, params.embedding, params.gru) for seq in token_sequences]
    captions = np.stack([h for h, _ in encoded])

    rn = np.linalg.norm(images, axis=1)
    cn = np.linalg.norm(captions, axis=1)
    ok = np.outer(rn > NORM_EPS, cn > NORM_EPS)
    denom = np.where(ok, np.outer(rn, cn), 1.0)
    sims = np.where(ok, (images @ captions.T) / denom, 0.0)

    cost_img, cost_cap = _hinge_costs(sims, alpha)
    loss = float(np.maximum(cost_img, 0.0).sum() + np.maximum(cost_cap, 0.0).sum())

    # dL/dsims: each active image-side term (k, j) adds +1 at (k, j) and -1 at
    # (k, k); each active caption-side term adds +1 at (j, k) and -1 at (k, k).
    act_img = (cost_img > 0).astype(dtype)
    act_cap = (cost_cap > 0).astype(dtype)
    g_sims = act_img + act_cap.T
    g_diag = -(act_img.sum(axis=1) + act_cap.sum(axis=1))
    g_sims[np.diag_indices_from(g_sims)] += g_diag

    # Cosine backward; degenerate pairs contribute nothing.
    g_sims = np.where(ok, g_sims, 0.0)
    inv = g_sims / denom
    safe_rn = np.where(rn > NORM_EPS, rn, 1.0)
    safe_cn = np.where(cn > NORM_EPS, cn, 1.0)
    d_images = inv @ captions - ((g_sims * sims).sum(axis=1) / safe_rn**2)[:, None] * images
    d_captions = inv.T @ images - ((g_sims * sims).sum(axis=0) / safe_cn**2)[:, None] * captions

    grads = ModelGrads.zeros_like(params)
    grads.affine.W += d_images.T @ img_in
    grads.affine.b += d_images.sum(axis=0)
    for (_, cache), d_cap in zip(encoded, d_captions):
        d_emb, d_gru = gru_backward(cache, d_cap)
        grads.embedding += d_emb
        for name in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h"):
            acc = getattr(grads.gru, name)
            acc += getattr(d_gru, name)
    return loss, grads
