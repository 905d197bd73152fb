"""Training: ADAM updates, GRU gradient clipping, the epoch/batch loop with
in-batch contrastive pairs, and best-epoch checkpoint selection.

Every source of randomness (parameter init, per-epoch shuffles) derives
deterministically from the config seed, so a rerun with the same seed,
config, and data reproduces the checkpoint bit for bit.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import evaluation, tensorio
from .errors import NumericError, ValidationError
from .fne import FneConfig, FneStats, fne_embed
from .mmspace import (
    AffineParams,
    GRU_TENSOR_NAMES,
    ModelGrads,
    ModelParams,
    from_tensors,
    get_tensor,
    loss_backward,
    tensors,
)
from .textenc import GruParams, Vocabulary, build_vocab, encode, gru_forward, tokenize

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters; the defaults are the standard training recipe."""

    learning_rate: float = 0.0002
    batch_size: int = 128
    max_epochs: int = 25
    clip_threshold: float = 2.0
    alpha: float = 0.2
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    d_w: int = 300
    d_h: int = 2048
    vocab_size: int = 1000

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValidationError("batch_size and max_epochs must be >= 1")
        if self.clip_threshold <= 0:
            raise ValidationError("clip_threshold must be > 0")
        if self.alpha < 0:
            raise ValidationError("alpha must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValidationError("adam betas must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ValidationError("adam_epsilon must be > 0")
        if min(self.d_w, self.d_h, self.vocab_size) < 1:
            raise ValidationError("d_w, d_h, and vocab_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "max_epochs": self.max_epochs, "clip_threshold": self.clip_threshold,
            "alpha": self.alpha, "seed": self.seed,
            "adam_beta1": self.adam_beta1, "adam_beta2": self.adam_beta2,
            "adam_epsilon": self.adam_epsilon,
            "d_w": self.d_w, "d_h": self.d_h, "vocab_size": self.vocab_size,
        }

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        return cls(**values)


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: ModelGrads
    v: ModelGrads
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(m=ModelGrads.zeros_like(params), v=ModelGrads.zeros_like(params))


def init_params(
    n_embeddings: int,
    d_w: int,
    d_h: int,
    feature_dim: int,
    rng: np.random.Generator,
    dtype=np.float32,
) -> ModelParams:
    """Seeded initialization: uniform(-0.1, 0.1) word embeddings, fan-scaled
    uniform GRU/affine weights, zero biases.  Draw order is fixed."""
    def uniform(limit: float, shape: tuple[int, ...]) -> np.ndarray:
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    emb = uniform(0.1, (n_embeddings, d_w))
    in_limit = math.sqrt(6.0 / (d_w + d_h))
    rec_limit = math.sqrt(6.0 / (d_h + d_h))
    gru = GruParams(
        W_z=uniform(in_limit, (d_h, d_w)),
        W_r=uniform(in_limit, (d_h, d_w)),
        W_h=uniform(in_limit, (d_h, d_w)),
        U_z=uniform(rec_limit, (d_h, d_h)),
        U_r=uniform(rec_limit, (d_h, d_h)),
        U_h=uniform(rec_limit, (d_h, d_h)),
        b_z=np.zeros(d_h, dtype=dtype),
        b_r=np.zeros(d_h, dtype=dtype),
        b_h=np.zeros(d_h, dtype=dtype),
    )
    affine = AffineParams(
        W=uniform(math.sqrt(6.0 / (feature_dim + d_h)), (d_h, feature_dim)),
        b=np.zeros(d_h, dtype=dtype),
    )
    return ModelParams(embedding=emb, gru=gru, affine=affine)


def clip_gru_gradients(grads: ModelGrads, threshold: float) -> ModelGrads:
    """Scale the GRU gradients so their joint L2 norm is at most threshold.

    The norm is taken over all nine GRU tensors together; word-embedding and
    affine gradients pass through untouched.
    """
    if threshold <= 0:
        raise ValidationError("clip threshold must be > 0")
    total = 0.0
    for name in GRU_TENSOR_NAMES:
        g = get_tensor(grads, name)
        total += float(np.square(g, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if norm <= threshold:
        return grads
    scale = threshold / norm
    scaled = {name: get_tensor(grads, name) * scale for name in GRU_TENSOR_NAMES}
    clipped = dict(tensors(grads))
    clipped.update(scaled)
    return from_tensors(clipped, out_cls=ModelGrads)


def adam_step(
    params: ModelParams,
    grads: ModelGrads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected adaptive-moment update; rejects non-finite gradients."""
    for name, g in tensors(grads).items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}")
    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_p: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name in tensors(params):
        p = get_tensor(params, name)
        g = get_tensor(grads, name)
        m = beta1 * get_tensor(state.m, name) + (1.0 - beta1) * g
        v = beta2 * get_tensor(state.v, name) + (1.0 - beta2) * (g * g)
        new_m[name] = m
        new_v[name] = v
        new_p[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + epsilon)
    return (
        from_tensors(new_p, out_cls=ModelParams),
        AdamState(m=from_tensors(new_m, out_cls=ModelGrads),
                  v=from_tensors(new_v, out_cls=ModelGrads), t=t),
    )


@dataclass
class TrainReport:
    """Per-epoch record of a training run."""

    epoch_losses: list[float] = field(default_factory=list)
    epoch_scores: list[float] = field(default_factory=list)
    epoch_metrics: list[evaluation.Metrics] = field(default_factory=list)
    selected_epoch: int = 0
    wall_clock_seconds: float = 0.0
    aborted: bool = False
    abort_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "epoch_losses": self.epoch_losses,
            "epoch_scores": self.epoch_scores,
            "epoch_metrics": [m.to_dict() for m in self.epoch_metrics],
            "selected_epoch": self.selected_epoch,
            "wall_clock_seconds": self.wall_clock_seconds,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
        }


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # Batch composition is a pure function of (seed, epoch).
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, epoch)))


def _load_split_inputs(
    entries: Sequence[tensorio.ManifestEntry],
    stats: FneStats,
    fne_config: FneConfig,
    vocabulary: Vocabulary,
    layout: tuple | None,
) -> tuple[np.ndarray, list[np.ndarray], list[int], tuple]:
    """Read activations once; return FNE features, encoded captions, owners."""
    fne_rows = []
    token_seqs: list[np.ndarray] = []
    owners: list[int] = []
    for i, entry in enumerate(entries):
        acts = tensorio.read_activation_file(entry.activation_path)
        if layout is None:
            layout = acts.layout()
        elif acts.layout() != layout:
            raise ValidationError(
                f"activation layout of image {entry.image_id!r} differs from the rest "
                "of the dataset"
            )
        fne_rows.append(fne_embed(acts, stats, fne_config).values.astype(np.float32))
        kept = 0
        for caption in entry.captions:
            token_ids = encode(tokenize(caption), vocabulary)
            if token_ids.size == 0:
                logger.warning("dropping empty caption for image %r", entry.image_id)
                continue
            token_seqs.append(token_ids)
            owners.append(i)
            kept += 1
        if kept == 0:
            raise ValidationError(f"image {entry.image_id!r} has no usable captions")
    assert layout is not None
    return np.stack(fne_rows), token_seqs, owners, layout


def _validation_metrics(
    val_fne: np.ndarray,
    val_seqs: list[np.ndarray],
    val_owners: list[int],
    val_ids: list[str],
    val_texts: list[str],
    params: ModelParams,
) -> evaluation.Metrics:
    images = val_fne.astype(params.dtype) @ params.affine.W.T + params.affine.b
    captions = np.stack([gru_forward(seq, params.embedding, params.gru)[0]
                         for seq in val_seqs])
    split = evaluation.EmbeddedSplit(
        image_ids=val_ids, images=images, captions=captions,
        caption_owner=np.asarray(val_owners, dtype=np.int64), caption_texts=val_texts,
    )
    return evaluation.evaluate_split(split)


def train(
    manifest: tensorio.DatasetManifest,
    stats: FneStats,
    fne_config: FneConfig,
    config: TrainConfig,
) -> tuple[tensorio.Checkpoint, TrainReport]:
    """Run the full training loop and return the best-epoch checkpoint.

    Each epoch shuffles all (image, caption) pairs with a seeded permutation,
    walks them in batches (the final partial batch included), and applies
    backward, GRU clipping, and an ADAM step per batch.  After every epoch the
    model is scored on the validation split (sum of the six recalls) and the
    highest-scoring epoch's parameters are returned.
    """
    started = time.perf_counter()
    config.validate()
    train_entries = manifest.split("train")
    val_entries = manifest.split("val")
    if not train_entries or not val_entries:
        raise ValidationError("training needs non-empty train and val splits")

    vocabulary = build_vocab(
        (c for e in train_entries for c in e.captions), config.vocab_size
    )
    train_fne, train_seqs, train_owner, layout = _load_split_inputs(
        train_entries, stats, fne_config, vocabulary, None
    )
    val_fne, val_seqs, val_owners, _ = _load_split_inputs(
        val_entries, stats, fne_config, vocabulary, layout
    )
    val_ids = [e.image_id for e in val_entries]
    val_texts = [c for e in val_entries for c in e.captions
                 if encode(tokenize(c), vocabulary).size > 0]

    init_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=config.seed, spawn_key=(0,))
    )
    params = init_params(vocabulary.size, config.d_w, config.d_h, stats.d, init_rng)
    state = AdamState.zeros(params)

    n_pairs = len(train_seqs)
    report = TrainReport()
    best: tuple[ModelParams, int, float] | None = None
    for epoch in range(1, config.max_epochs + 1):
        perm = _epoch_rng(config.seed, epoch).permutation(n_pairs)
        epoch_loss = 0.0
        try:
            for start in range(0, n_pairs, config.batch_size):
                batch = perm[start:start + config.batch_size]
                fne_batch = train_fne[[train_owner[i] for i in batch]]
                seq_batch = [train_seqs[i] for i in batch]
                loss, grads = loss_backward(fne_batch, seq_batch, params, config.alpha)
                grads = clip_gru_gradients(grads, config.clip_threshold)
                params, state = adam_step(
                    params, grads, state, config.learning_rate,
                    beta1=config.adam_beta1, beta2=config.adam_beta2,
                    epsilon=config.adam_epsilon,
                )
                epoch_loss += loss
        except NumericError as exc:
            if best is None:
                raise
            logger.error("aborting at epoch %d: %s", epoch, exc)
            report.aborted = True
            report.abort_reason = str(exc)
            break
        metrics = _validation_metrics(
            val_fne, val_seqs, val_owners, val_ids, val_texts, params
        )
        score = metrics.combined_recall
        report.epoch_losses.append(epoch_loss)
        report.epoch_scores.append(score)
        report.epoch_metrics.append(metrics)
        if best is None or score > best[2]:
            best = (params.copy(), epoch, score)
        logger.info("epoch %d: loss %.4f, validation score %.4f", epoch, epoch_loss, score)

    assert best is not None
    best_params, best_epoch, best_score = best
    report.selected_epoch = best_epoch
    report.wall_clock_seconds = time.perf_counter() - started
    checkpoint = tensorio.Checkpoint(
        config=config.to_dict(),
        vocabulary=vocabulary,
        fne_stats=stats,
        fne_config=fne_config,
        params=best_params,
        epoch=best_epoch,
        seed=config.seed,
        validation_score=best_score,
    )
    return checkpoint, report
