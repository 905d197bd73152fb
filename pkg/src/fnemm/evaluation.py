"""Retrieval evaluation: Recall@K and median rank in both directions.

Annotation ranks every caption of a split for each image query; retrieval
ranks every image for each caption query.  Both directions reuse one
image-by-caption similarity matrix, so each item is embedded exactly once.
A query's rank is the 1-based position of its best ground-truth item after
sorting by similarity (descending, ties broken by ascending candidate index).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensorio
from .errors import DimensionError, ValidationError
from .fne import FneConfig, FneStats, fne_embed
from .mmspace import ModelParams, similarity_matrix
from .textenc import Vocabulary, encode, gru_forward, tokenize

logger = logging.getLogger(__name__)


@dataclass
class RankTable:
    """Best ground-truth rank per query for one retrieval direction."""

    ranks: np.ndarray
    direction: str

    def __post_init__(self) -> None:
        self.ranks = np.asarray(self.ranks, dtype=np.int64)
        if self.ranks.size and self.ranks.min() < 1:
            raise ValidationError("ranks are 1-based")


@dataclass
class DirectionMetrics:
    r_at_1: float
    r_at_5: float
    r_at_10: float
    med_r: float

    def to_dict(self) -> dict:
        return {"r_at_1": self.r_at_1, "r_at_5": self.r_at_5,
                "r_at_10": self.r_at_10, "med_r": self.med_r}


@dataclass
class Metrics:
    annotation: DirectionMetrics
    retrieval: DirectionMetrics

    def to_dict(self) -> dict:
        return {"annotation": self.annotation.to_dict(),
                "retrieval": self.retrieval.to_dict()}

    @property
    def combined_recall(self) -> float:
        """Sum of all six recalls; the validation selection score."""
        return (self.annotation.r_at_1 + self.annotation.r_at_5 + self.annotation.r_at_10
                + self.retrieval.r_at_1 + self.retrieval.r_at_5 + self.retrieval.r_at_10)


def rank_candidates(query: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidate indices sorted by cosine similarity to the query.

    Descending similarity; equal similarities keep ascending index order.
    """
    sims = similarity_matrix(np.asarray(query)[None, :], candidates)[0]
    return np.argsort(-sims, kind="stable")


def _best_ranks(sims: np.ndarray, truth_indices: Sequence[np.ndarray]) -> np.ndarray:
    """For each row of sims, the 1-based rank of its best true candidate."""
    out = np.empty(sims.shape[0], dtype=np.int64)
    positions = np.empty(sims.shape[1], dtype=np.int64)
    for i in range(sims.shape[0]):
        order = np.argsort(-sims[i], kind="stable")
        positions[order] = np.arange(1, sims.shape[1] + 1)
        out[i] = positions[np.asarray(truth_indices[i])].min()
    return out


def recall_at_k(table: RankTable, k: int) -> float:
    """Fraction of queries whose best ground-truth rank is within the top k."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if table.ranks.size == 0:
        raise ValidationError("cannot compute recall on an empty rank table")
    return float(np.mean(table.ranks <= k))


def median_rank(table: RankTable) -> float:
    """Median best rank; the mean of the two middle values for even counts."""
    if table.ranks.size == 0:
        raise ValidationError("cannot compute the median of an empty rank table")
    return float(np.median(table.ranks))


def direction_metrics(table: RankTable) -> DirectionMetrics:
    return DirectionMetrics(
        r_at_1=recall_at_k(table, 1),
        r_at_5=recall_at_k(table, 5),
        r_at_10=recall_at_k(table, 10),
        med_r=median_rank(table),
    )


@dataclass
class EmbeddedSplit:
    """Joint-space embeddings for one manifest split."""

    image_ids: list[str]
    images: np.ndarray          # (N, d_h)
    captions: np.ndarray        # (M, d_h)
    caption_owner: np.ndarray   # (M,) image index of each caption
    caption_texts: list[str]


def embed_split(
    entries: Sequence[tensorio.ManifestEntry],
    params: ModelParams,
    vocabulary: Vocabulary,
    stats: FneStats,
    fne_config: FneConfig,
    read_activations: Callable[..., tensorio.ActivationSet] = tensorio.read_activation_file,
) -> EmbeddedSplit:
    """Embed every image and caption of a split once."""
    if not entries:
        raise ValidationError("cannot embed an empty split")
    image_ids = []
    image_rows = []
    caption_rows = []
    owners = []
    texts = []
    layout = None
    for i, entry in enumerate(entries):
        acts = read_activations(entry.activation_path)
        if layout is None:
            layout = acts.layout()
        elif acts.layout() != layout:
            raise ValidationError(
                f"activation layout of image {entry.image_id!r} differs from the rest "
                "of the dataset"
            )
        fne_vec = fne_embed(acts, stats, fne_config)
        image_rows.append(
            params.affine.W @ fne_vec.values.astype(params.dtype) + params.affine.b
        )
        image_ids.append(entry.image_id)
        kept = 0
        for caption in entry.captions:
            token_ids = encode(tokenize(caption), vocabulary)
            if token_ids.size == 0:
                logger.warning("dropping empty caption for image %r", entry.image_id)
                continue
            h, _ = gru_forward(token_ids, params.embedding, params.gru)
            caption_rows.append(h)
            owners.append(i)
            texts.append(caption)
            kept += 1
        if kept == 0:
            raise ValidationError(f"image {entry.image_id!r} has no usable captions")
    return EmbeddedSplit(
        image_ids=image_ids,
        images=np.stack(image_rows),
        captions=np.stack(caption_rows),
        caption_owner=np.asarray(owners, dtype=np.int64),
        caption_texts=texts,
    )


def rank_tables(split: EmbeddedSplit) -> tuple[RankTable, RankTable]:
    """Annotation and retrieval rank tables from one similarity pass."""
    sims = similarity_matrix(split.images, split.captions)
    n_images = sims.shape[0]
    annotation_truth = [np.flatnonzero(split.caption_owner == i) for i in range(n_images)]
    annotation = RankTable(_best_ranks(sims, annotation_truth), direction="annotation")
    retrieval_truth = [np.array([owner]) for owner in split.caption_owner]
    retrieval = RankTable(_best_ranks(sims.T, retrieval_truth), direction="retrieval")
    return annotation, retrieval


def evaluate_split(split: EmbeddedSplit) -> Metrics:
    annotation, retrieval = rank_tables(split)
    return Metrics(annotation=direction_metrics(annotation),
                   retrieval=direction_metrics(retrieval))


def evaluate(
    checkpoint: tensorio.Checkpoint,
    manifest: tensorio.DatasetManifest,
    split_name: str,
) -> Metrics:
    """Evaluate a checkpoint on one manifest split, both directions."""
    entries = manifest.split(split_name)
    if not entries:
        raise ValidationError(f"split {split_name!r} is empty")
    embedded = embed_split(entries, checkpoint.params, checkpoint.vocabulary,
                           checkpoint.fne_stats, checkpoint.fne_config)
    return evaluate_split(embedded)


def render_metrics(metrics: Metrics, label: str = "model") -> str:
    """Human-readable table; recalls in percent, as conventionally reported."""
    header = f"{'':16s}{'R@1':>7s}{'R@5':>7s}{'R@10':>7s}{'Med r':>7s}"
    lines = [label, header]
    for name, m in (("annotation", metrics.annotation), ("retrieval", metrics.retrieval)):
        lines.append(
            f"{name:16s}{100 * m.r_at_1:7.1f}{100 * m.r_at_5:7.1f}"
            f"{100 * m.r_at_10:7.1f}{m.med_r:7g}"
        )
    return "\n".join(lines)
