"""Ranking, recall, median rank, and full-split evaluation."""

from __future__ import annotations

import math
import statistics

import numpy as np
import pytest

from fnemm.errors import ValidationError
from fnemm.evaluation import (
    EmbeddedSplit,
    Metrics,
    RankTable,
    direction_metrics,
    evaluate,
    evaluate_split,
    median_rank,
    rank_candidates,
    recall_at_k,
    render_metrics,
)
from fnemm.fne import FneConfig
from fnemm.optim import init_params
from fnemm.tensorio import Checkpoint, load_manifest
from fnemm.textenc import build_vocab

from conftest import build_toy_dataset


def _oracle_cosine(a, b) -> float:
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def test_rank_candidates_exact_match_first():
    candidates = np.eye(5)
    order = rank_candidates(candidates[3], candidates)
    assert order[0] == 3


def test_rank_candidates_tie_breaks_by_index():
    candidates = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    order = rank_candidates(np.array([1.0, 0.0]), candidates)
    assert order.tolist() == [0, 1, 2]


def test_rank_candidates_matches_brute_force(rng):
    candidates = rng.normal(size=(10, 6))
    query = rng.normal(size=6)
    sims = [_oracle_cosine(query, c) for c in candidates]
    expected = sorted(range(10), key=lambda i: (-sims[i], i))
    assert rank_candidates(query, candidates).tolist() == expected


def test_recall_examples():
    assert recall_at_k(RankTable([1, 1, 1], "annotation"), 1) == 1.0
    table = RankTable([1, 6, 11], "annotation")
    assert recall_at_k(table, 1) == pytest.approx(1 / 3)
    assert recall_at_k(table, 5) == pytest.approx(1 / 3)
    assert recall_at_k(table, 10) == pytest.approx(2 / 3)


def test_recall_monotone_in_k(rng):
    table = RankTable(rng.integers(1, 50, size=40), "retrieval")
    values = [recall_at_k(table, k) for k in range(1, 51)]
    assert all(a <= b for a, b in zip(values, values[1:]))


def test_recall_and_median_reject_empty():
    empty = RankTable(np.array([], dtype=np.int64), "annotation")
    with pytest.raises(ValidationError):
        recall_at_k(empty, 1)
    with pytest.raises(ValidationError):
        median_rank(empty)
    with pytest.raises(ValidationError):
        recall_at_k(RankTable([1], "annotation"), 0)


def test_rank_table_rejects_zero_rank():
    with pytest.raises(ValidationError):
        RankTable([0, 2], "annotation")


def test_median_examples():
    assert median_rank(RankTable([1, 5, 10], "annotation")) == 5.0
    assert median_rank(RankTable([2, 4], "annotation")) == 3.0


def test_median_matches_sort_oracle(rng):
    ranks = rng.integers(1, 200, size=101)
    assert median_rank(RankTable(ranks, "retrieval")) == statistics.median(ranks.tolist())


def _split_from(images, captions, owners) -> EmbeddedSplit:
    return EmbeddedSplit(
        image_ids=[f"i{k}" for k in range(len(images))],
        images=np.asarray(images, dtype=np.float64),
        captions=np.asarray(captions, dtype=np.float64),
        caption_owner=np.asarray(owners, dtype=np.int64),
        caption_texts=[f"c{j}" for j in range(len(captions))],
    )


def test_identity_embeddings_are_perfect():
    # Each image equals its first caption; everything else is orthogonal.
    n = 8
    eye = np.eye(3 * n)
    images = eye[:n]
    captions = np.empty((2 * n, 3 * n))
    captions[0::2] = eye[:n]              # caption 2i matches image i exactly
    captions[1::2] = eye[n:2 * n]         # caption 2i+1 is orthogonal to all images
    owners = np.repeat(np.arange(n), 2)
    metrics = evaluate_split(_split_from(images, captions, owners))
    assert metrics.annotation.r_at_1 == 1.0
    assert metrics.annotation.med_r == 1.0


def _oracle_metrics(images, captions, owners) -> Metrics:
    n_images, n_caps = len(images), len(captions)
    sims = [[_oracle_cosine(i, c) for c in captions] for i in images]

    def ranks_for(query_sims, truth):
        order = sorted(range(len(query_sims)), key=lambda j: (-query_sims[j], j))
        return min(order.index(t) + 1 for t in truth)

    ann = [ranks_for(sims[i], [j for j in range(n_caps) if owners[j] == i])
           for i in range(n_images)]
    ret = [ranks_for([sims[i][j] for i in range(n_images)], [owners[j]])
           for j in range(n_caps)]

    def direction(ranks):
        return {
            "r_at_1": sum(r <= 1 for r in ranks) / len(ranks),
            "r_at_5": sum(r <= 5 for r in ranks) / len(ranks),
            "r_at_10": sum(r <= 10 for r in ranks) / len(ranks),
            "med_r": float(statistics.median(ranks)),
        }

    return {"annotation": direction(ann), "retrieval": direction(ret)}


def test_random_embeddings_match_brute_force_oracle(rng):
    images = rng.normal(size=(8, 12))
    captions = rng.normal(size=(16, 12))
    owners = np.repeat(np.arange(8), 2)
    metrics = evaluate_split(_split_from(images, captions, owners))
    assert metrics.to_dict() == _oracle_metrics(images, captions, owners)


def test_evaluation_invariant_to_entry_order(rng):
    images = rng.normal(size=(6, 9))
    captions = rng.normal(size=(12, 9))
    owners = np.repeat(np.arange(6), 2)
    base = evaluate_split(_split_from(images, captions, owners))

    perm = rng.permutation(6)
    inverse = np.empty(6, dtype=np.int64)
    inverse[perm] = np.arange(6)
    permuted = evaluate_split(_split_from(images[perm], captions, inverse[owners]))
    assert permuted.to_dict() == base.to_dict()


def _toy_checkpoint(tmp_path, rng):
    manifest, manifest_path, stats, fne_cfg, _ = build_toy_dataset(
        tmp_path, rng, n_images=6)
    vocab = build_vocab(
        (c for e in manifest.split("train") for c in e.captions), 40)
    params = init_params(vocab.size, 5, 8, stats.d, np.random.default_rng(0))
    ckpt = Checkpoint(config={}, vocabulary=vocab, fne_stats=stats,
                      fne_config=fne_cfg, params=params,
                      epoch=1, seed=0, validation_score=0.0)
    return ckpt, manifest_path


def test_evaluate_end_to_end_structure(tmp_path, rng):
    ckpt, manifest_path = _toy_checkpoint(tmp_path, rng)
    manifest = load_manifest(manifest_path)
    metrics = evaluate(ckpt, manifest, "val")
    for direction in (metrics.annotation, metrics.retrieval):
        assert 0.0 <= direction.r_at_1 <= direction.r_at_5 <= direction.r_at_10 <= 1.0
        assert direction.med_r >= 1.0
    with pytest.raises(ValidationError):
        evaluate(ckpt, manifest, "test")


def test_render_metrics_layout():
    metrics = Metrics(
        annotation=direction_metrics(RankTable([1, 2, 12], "annotation")),
        retrieval=direction_metrics(RankTable([3, 7], "retrieval")),
    )
    text = render_metrics(metrics, label="demo")
    lines = text.splitlines()
    assert lines[0] == "demo"
    assert "R@1" in lines[1] and "Med r" in lines[1]
    assert lines[2].startswith("annotation") and lines[3].startswith("retrieval")
