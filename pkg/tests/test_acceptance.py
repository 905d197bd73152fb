"""Acceptance suite: one test per release criterion, at pinned tolerances.

Run with `pytest tests/test_acceptance.py -s` to see one PASS/FAIL line per
criterion.
"""

from __future__ import annotations

import functools
import math

import numpy as np
import pytest

from fnemm import tensorio
from fnemm.errors import FnemmError
from fnemm.evaluation import evaluate_split, EmbeddedSplit
from fnemm.fne import (
    FneConfig,
    FneStats,
    RawFeatureVector,
    discretize,
    fit_stats,
    fne_embed,
    spatial_pool,
    standardize,
)
from fnemm.mmspace import (
    GRU_TENSOR_NAMES,
    ModelGrads,
    PairBatch,
    get_tensor,
    loss_backward,
    ranking_loss,
    similarity_matrix,
    tensors,
)
from fnemm.optim import TrainConfig, clip_gru_gradients, init_params, train
from fnemm.textenc import gru_forward

from conftest import build_toy_dataset, make_activation_set, make_stats

GRAD_REL_TOL = 1e-4
FD_STEP = 1e-5
N_GRAD_INSTANCES = 20


def criterion(name):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\nACCEPTANCE {name}: FAIL")
                raise
            print(f"\nACCEPTANCE {name}: PASS")
        return wrapper
    return decorate


# ---------------------------------------------------------------------------
# Gradient fidelity
# ---------------------------------------------------------------------------

def _sample_instance(seed):
    rng = np.random.default_rng(seed)
    b = int(rng.integers(2, 5))
    feature_dim = int(rng.integers(4, 9))
    d_h = int(rng.integers(3, 7))
    d_w = int(rng.integers(2, 5))
    vocab_rows = int(rng.integers(3, 5))
    params = init_params(vocab_rows, d_w, d_h, feature_dim, rng, dtype=np.float64)
    fnes = [rng.integers(-1, 2, size=feature_dim).astype(np.float64) for _ in range(b)]
    seqs = [rng.integers(0, vocab_rows, size=int(rng.integers(1, 7))) for _ in range(b)]
    return params, fnes, seqs


def _forward_loss(params, fnes, seqs, alpha):
    images = np.stack([params.affine.W @ f + params.affine.b for f in fnes])
    captions = np.stack([gru_forward(s, params.embedding, params.gru)[0] for s in seqs])
    return ranking_loss(PairBatch(images, captions), alpha)


def _instance_is_well_posed(params, fnes, seqs, alpha):
    # Reject instances with a hinge argument near its kink (finite
    # differences would straddle the non-smooth point) or with a vanishing
    # gradient tensor (the relative error would be meaningless noise).
    images = np.stack([params.affine.W @ f + params.affine.b for f in fnes])
    captions = np.stack([gru_forward(s, params.embedding, params.gru)[0] for s in seqs])
    sims = similarity_matrix(images, captions)
    diag = np.diagonal(sims)
    off = ~np.eye(len(diag), dtype=bool)
    margins = np.concatenate([
        ((alpha - diag[:, None]) + sims)[off],
        ((alpha - diag[:, None]) + sims.T)[off],
    ])
    if np.abs(margins).min() < 1e-3:
        return False
    loss, grads = loss_backward(fnes, seqs, params, alpha)
    if loss < 0.05:
        return False
    return all(np.linalg.norm(g) > 1e-8 for g in tensors(grads).values())


@criterion("gradient fidelity")
def test_gradient_fidelity_finite_differences():
    alpha = 0.2
    checked = 0
    seed = 0
    while checked < N_GRAD_INSTANCES:
        seed += 1
        assert seed < 200, "could not find enough well-posed instances"
        params, fnes, seqs = _sample_instance(seed)
        if not _instance_is_well_posed(params, fnes, seqs, alpha):
            continue
        _, grads = loss_backward(fnes, seqs, params, alpha)
        for name, arr in tensors(params).items():
            g = tensors(grads)[name]
            fd = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + FD_STEP
                up = _forward_loss(params, fnes, seqs, alpha)
                arr[idx] = orig - FD_STEP
                down = _forward_loss(params, fnes, seqs, alpha)
                arr[idx] = orig
                fd[idx] = (up - down) / (2 * FD_STEP)
            rel = np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-8)
            assert rel < GRAD_REL_TOL, f"seed {seed} {name}: rel err {rel:.3e}"
        checked += 1
    assert checked == N_GRAD_INSTANCES


# ---------------------------------------------------------------------------
# FNE correctness
# ---------------------------------------------------------------------------

@criterion("FNE correctness")
def test_fne_correctness():
    rng = np.random.default_rng(11)

    # Streaming fit equals a two-pass oracle within 1e-5 relative.
    vectors = [RawFeatureVector(rng.normal(size=24) * 3 + 1) for _ in range(100)]
    stats = fit_stats(iter(vectors))
    stacked = np.stack([v.values for v in vectors])
    np.testing.assert_allclose(stats.mean, stacked.mean(axis=0), rtol=1e-5, atol=1e-12)
    np.testing.assert_allclose(stats.std, stacked.std(axis=0), rtol=1e-5, atol=1e-12)

    # Pooling equals hand means.
    acts = tensorio.ActivationSet("i", [
        tensorio.ActivationLayer(
            "c", "conv", np.array([1, 2, 3, 4], dtype=np.float32).reshape(2, 2, 1)),
        tensorio.ActivationLayer("f", "fc", np.array([5.0, -1.0], dtype=np.float32)),
    ])
    np.testing.assert_array_equal(spatial_pool(acts).values, [2.5, 5.0, -1.0])

    # Standardizing a fitting-set member whose features equal the mean gives 0.
    member = RawFeatureVector(stacked.mean(axis=0))
    np.testing.assert_allclose(standardize(member, stats), 0.0, atol=1e-6)

    # Output of the full pipeline is always ternary.
    cfg = FneConfig()
    pool_stats = fit_stats(
        spatial_pool(make_activation_set(rng, image_id=f"t{k}")) for k in range(10)
    )
    for k in range(20):
        out = fne_embed(make_activation_set(rng, image_id=f"q{k}"), pool_stats, cfg)
        assert set(np.unique(out.values)) <= {-1, 0, 1}
        assert out.d == pool_stats.d


# ---------------------------------------------------------------------------
# Loss properties
# ---------------------------------------------------------------------------

@criterion("loss properties")
def test_loss_properties():
    alpha = 0.2
    rng = np.random.default_rng(21)

    # Single pair and margin-separated batches cost nothing.
    assert ranking_loss(PairBatch(rng.normal(size=(1, 4)), rng.normal(size=(1, 4))),
                        alpha) == 0.0
    eye = np.eye(5)
    assert ranking_loss(PairBatch(eye, eye), alpha) == 0.0

    # Hand-built batch with exactly representable cosines: s11=0.5,
    # s12=s21=0.4, s22=0.9.
    images = np.array([[1, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0, 0]], dtype=np.float64)
    captions = np.array([[5, 4, 7, 3, 1, 0], [4, 9, 1, 1, 1, 0]], dtype=np.float64)
    loss = ranking_loss(PairBatch(images, captions), alpha)
    expected = 2 * max(0.0, (0.2 - 0.5) + 0.4) + 2 * max(0.0, (0.2 - 0.9) + 0.4)
    assert loss == expected
    assert loss == pytest.approx(0.2, abs=1e-15)

    # Invariance under positive rescaling of any single embedding.
    imgs = rng.normal(size=(4, 6))
    caps = rng.normal(size=(4, 6))
    base = ranking_loss(PairBatch(imgs, caps), alpha)
    for row in range(4):
        scaled = imgs.copy()
        scaled[row] *= 2.0
        assert ranking_loss(PairBatch(scaled, caps), alpha) == base
        scaled_caps = caps.copy()
        scaled_caps[row] *= 0.25
        assert ranking_loss(PairBatch(imgs, scaled_caps), alpha) == base

    # Invariance under batch permutation.
    perm = [3, 1, 0, 2]
    assert ranking_loss(PairBatch(imgs[perm], caps[perm]), alpha) == \
        pytest.approx(base, rel=1e-12)


# ---------------------------------------------------------------------------
# Evaluation oracle
# ---------------------------------------------------------------------------

def _split_from(images, captions, owners):
    return EmbeddedSplit(
        image_ids=[f"i{k}" for k in range(len(images))],
        images=np.asarray(images, float), captions=np.asarray(captions, float),
        caption_owner=np.asarray(owners, dtype=np.int64),
        caption_texts=[f"c{j}" for j in range(len(captions))],
    )


def _oracle_metrics(images, captions, owners):
    import statistics

    def cos(a, b):
        dot = sum(float(x) * float(y) for x, y in zip(a, b))
        return dot / (math.sqrt(sum(float(x) ** 2 for x in a))
                      * math.sqrt(sum(float(y) ** 2 for y in b)))

    sims = [[cos(i, c) for c in captions] for i in images]

    def best_rank(query_sims, truth):
        order = sorted(range(len(query_sims)), key=lambda j: (-query_sims[j], j))
        return min(order.index(t) + 1 for t in truth)

    ann = [best_rank(sims[i], [j for j, o in enumerate(owners) if o == i])
           for i in range(len(images))]
    ret = [best_rank([sims[i][j] for i in range(len(images))], [owners[j]])
           for j in range(len(captions))]

    def direction(ranks):
        return {
            "r_at_1": sum(r <= 1 for r in ranks) / len(ranks),
            "r_at_5": sum(r <= 5 for r in ranks) / len(ranks),
            "r_at_10": sum(r <= 10 for r in ranks) / len(ranks),
            "med_r": float(statistics.median(ranks)),
        }

    return {"annotation": direction(ann), "retrieval": direction(ret)}


@criterion("evaluation oracle")
def test_evaluation_oracle():
    rng = np.random.default_rng(31)

    # 8 images x 2 captions: exact agreement with the brute-force oracle.
    images = rng.normal(size=(8, 12))
    captions = rng.normal(size=(16, 12))
    owners = np.repeat(np.arange(8), 2)
    metrics = evaluate_split(_split_from(images, captions, owners))
    assert metrics.to_dict() == _oracle_metrics(images, captions, owners)

    # Identity construction: each image equals its first caption, everything
    # else orthogonal, so annotation is perfect.
    n = 8
    eye = np.eye(3 * n)
    id_captions = np.empty((2 * n, 3 * n))
    id_captions[0::2] = eye[:n]
    id_captions[1::2] = eye[n:2 * n]
    identity = evaluate_split(_split_from(eye[:n], id_captions, owners))
    assert identity.annotation.r_at_1 == 1.0
    assert identity.annotation.med_r == 1.0

    # Random embeddings land within 3 sigma of the analytic binomial
    # expectation, pooled over 200 seeded trials.
    trials = 200
    hits = {("annotation", k): 0 for k in (1, 5, 10)}
    hits.update({("retrieval", k): 0 for k in (1, 5, 10)})
    for t in range(trials):
        trial_rng = np.random.default_rng(1000 + t)
        imgs = trial_rng.normal(size=(8, 10))
        caps = trial_rng.normal(size=(16, 10))
        m = evaluate_split(_split_from(imgs, caps, owners))
        for k, value in ((1, m.annotation.r_at_1), (5, m.annotation.r_at_5),
                         (10, m.annotation.r_at_10)):
            hits[("annotation", k)] += value * 8
        for k, value in ((1, m.retrieval.r_at_1), (5, m.retrieval.r_at_5),
                         (10, m.retrieval.r_at_10)):
            hits[("retrieval", k)] += value * 16

    pools = {"annotation": (16, 2, 8 * trials), "retrieval": (8, 1, 16 * trials)}
    for (direction, k), hit_count in hits.items():
        pool, g, n_queries = pools[direction]
        if k >= pool:
            expected = 1.0    # every ranking fits in the top k
        else:
            expected = 1.0 - math.comb(pool - g, k) / math.comb(pool, k)
        observed = hit_count / n_queries
        sigma = math.sqrt(expected * (1.0 - expected) / n_queries)
        assert abs(observed - expected) <= 3 * sigma + 1e-12, (
            f"{direction} R@{k}: observed {observed:.4f}, "
            f"expected {expected:.4f} +/- {3 * sigma:.4f}"
        )


# ---------------------------------------------------------------------------
# Training sanity
# ---------------------------------------------------------------------------

@criterion("training sanity")
def test_training_sanity(tmp_path):
    rng = np.random.default_rng(41)
    manifest, _, stats, fne_config, _ = build_toy_dataset(tmp_path, rng, n_images=32)
    config = TrainConfig(
        learning_rate=0.01,     # free choice; margin/batch/clip/ADAM are the defaults
        batch_size=128,
        max_epochs=25,
        clip_threshold=2.0,
        alpha=0.2,
        seed=7,
        d_w=16,
        d_h=32,
        vocab_size=64,
    )
    checkpoint, report = train(manifest, stats, fne_config, config)

    chance = 1.0 / 32.0
    best_annotation_r1 = report.epoch_metrics[report.selected_epoch - 1].annotation.r_at_1
    assert best_annotation_r1 >= 5 * chance
    assert best_annotation_r1 >= 0.16
    assert checkpoint.validation_score == max(report.epoch_scores)
    assert report.selected_epoch == int(np.argmax(report.epoch_scores)) + 1


# ---------------------------------------------------------------------------
# Determinism and persistence
# ---------------------------------------------------------------------------

@criterion("determinism and persistence")
def test_determinism_and_persistence(tmp_path):
    rng = np.random.default_rng(51)

    # Identical seed/config/data give bit-identical checkpoints.
    manifest, _, stats, fne_config, _ = build_toy_dataset(tmp_path / "data", rng,
                                                          n_images=6)
    config = TrainConfig(learning_rate=0.01, max_epochs=3, seed=9,
                         d_w=8, d_h=16, vocab_size=64)
    paths = []
    for name in ("a.fnec", "b.fnec"):
        ckpt, _ = train(manifest, stats, fne_config, config)
        path = tmp_path / name
        tensorio.save_checkpoint(ckpt, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()

    # All four formats round-trip bit-exactly.
    acts = make_activation_set(rng, image_id="rt")
    act_path = tmp_path / "rt.fnea"
    tensorio.write_activation_file(acts, act_path)
    assert tensorio.read_activation_file(act_path) == acts

    stats2 = make_stats(rng, d=9)
    cfg2 = FneConfig(theta_pos=0.6, theta_neg=-0.1)
    stats_path = tmp_path / "rt.fnes"
    tensorio.save_fne_stats(stats2, cfg2, stats_path)
    loaded_stats, loaded_cfg = tensorio.load_fne_stats(stats_path)
    assert loaded_stats == stats2 and loaded_cfg == cfg2

    loaded_manifest = tensorio.load_manifest(tmp_path / "data" / "data.jsonl")
    copy_path = tmp_path / "copy.jsonl"
    tensorio.save_manifest(loaded_manifest, copy_path)
    assert tensorio.load_manifest(copy_path) == loaded_manifest

    ckpt = tensorio.load_checkpoint(paths[0])
    again = tmp_path / "c.fnec"
    tensorio.save_checkpoint(ckpt, again)
    assert again.read_bytes() == paths[0].read_bytes()

    # Fuzzed and mutated inputs never crash a reader.
    fuzz_rng = np.random.default_rng(52)
    readers = (tensorio.read_activation_file, tensorio.load_fne_stats,
               tensorio.load_checkpoint, tensorio.load_manifest)
    blob_path = tmp_path / "fuzz.bin"
    for _ in range(300):
        blob_path.write_bytes(fuzz_rng.bytes(int(fuzz_rng.integers(0, 200))))
        for reader in readers:
            try:
                reader(blob_path)
            except FnemmError:
                pass
    valid = act_path.read_bytes()
    for _ in range(100):
        mutated = bytearray(valid)
        mutated[int(fuzz_rng.integers(0, len(valid)))] ^= int(fuzz_rng.integers(1, 256))
        blob_path.write_bytes(bytes(mutated))
        try:
            tensorio.read_activation_file(blob_path)
        except FnemmError:
            pass


# ---------------------------------------------------------------------------
# Clipping contract
# ---------------------------------------------------------------------------

@criterion("clipping contract")
def test_clipping_contract():
    rng = np.random.default_rng(61)
    params = init_params(6, 3, 5, 7, rng, dtype=np.float32)

    def gru_norm(tree):
        return math.sqrt(sum(
            float(np.square(get_tensor(tree, n), dtype=np.float64).sum())
            for n in GRU_TENSOR_NAMES
        ))

    for trial in range(25):
        grads = ModelGrads.zeros_like(params)
        scale = float(rng.uniform(0.1, 30.0))
        for _, g in tensors(grads).items():
            g += (rng.normal(size=g.shape) * scale).astype(g.dtype)
        before = gru_norm(grads)
        emb_bytes = grads.embedding.tobytes()
        aw_bytes = grads.affine.W.tobytes()
        ab_bytes = grads.affine.b.tobytes()

        clipped = clip_gru_gradients(grads, 2.0)
        after = gru_norm(clipped)
        if before > 2.0:
            assert after <= 2.0 * (1 + 1e-6), f"trial {trial}: norm {after}"
        else:
            assert clipped is grads
        assert clipped.embedding.tobytes() == emb_bytes
        assert clipped.affine.W.tobytes() == aw_bytes
        assert clipped.affine.b.tobytes() == ab_bytes
