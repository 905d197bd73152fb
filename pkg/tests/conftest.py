"""Shared builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from fnemm.fne import FneConfig, FneStats
from fnemm.optim import init_params
from fnemm.tensorio import ActivationLayer, ActivationSet
from fnemm.textenc import Vocabulary


def make_activation_set(
    rng: np.random.Generator,
    image_id: str = "img",
    conv_shapes=((2, 3, 4), (2, 2, 2)),
    fc_sizes=(5,),
) -> ActivationSet:
    layers = []
    for i, shape in enumerate(conv_shapes):
        layers.append(ActivationLayer(
            name=f"conv{i + 1}", kind="conv",
            values=rng.normal(size=shape).astype(np.float32),
        ))
    for i, n in enumerate(fc_sizes):
        layers.append(ActivationLayer(
            name=f"fc{i + 1}", kind="fc",
            values=rng.normal(size=n).astype(np.float32),
        ))
    return ActivationSet(image_id=image_id, layers=layers)


def make_stats(rng: np.random.Generator, d: int) -> FneStats:
    return FneStats(
        mean=rng.normal(size=d).astype(np.float32),
        std=rng.uniform(0.5, 2.0, size=d).astype(np.float32),
        fitted_on=10,
    )


def make_small_params(rng, vocab_rows=5, d_w=3, d_h=4, feature_dim=6, dtype=np.float64):
    return init_params(vocab_rows, d_w, d_h, feature_dim, rng, dtype=dtype)


CAPTION_TEMPLATES = (
    "a photo of {w} in the sun",
    "the {w} is sitting there",
    "someone holds a {w} today",
    "this picture shows a {w}",
    "one small {w} near the water",
)


def build_toy_dataset(
    root,
    rng: np.random.Generator,
    n_images: int = 32,
    captions_per_image: int = 5,
    conv_channels: int = 8,
    fc_units: int = 16,
    val_copy: bool = True,
):
    """Write a small separable dataset: activations, manifest, fitted stats.

    Each image gets a distinctive random activation pattern and captions
    sharing a unique word, so a working model can align them.  The val
    split reuses the train images under new ids (a memorization target).
    """
    from fnemm import tensorio
    from fnemm.fne import FneConfig, fit_stats, spatial_pool
    from fnemm.tensorio import DatasetManifest, ManifestEntry

    root.mkdir(parents=True, exist_ok=True)
    entries = []
    pooled = []
    for i in range(n_images):
        acts = make_activation_set(
            rng, image_id=f"img{i:02d}",
            conv_shapes=((2, 2, conv_channels),), fc_sizes=(fc_units,),
        )
        path = root / f"img{i:02d}.fnea"
        tensorio.write_activation_file(acts, path)
        pooled.append(spatial_pool(acts))
        captions = [
            CAPTION_TEMPLATES[c % len(CAPTION_TEMPLATES)].format(w=f"thing{i:02d}")
            for c in range(captions_per_image)
        ]
        entries.append(ManifestEntry(f"img{i:02d}", "train", path, captions))
        if val_copy:
            entries.append(ManifestEntry(f"val{i:02d}", "val", path, list(captions)))
    manifest = DatasetManifest(entries)
    manifest_path = root / "data.jsonl"
    tensorio.save_manifest(manifest, manifest_path)

    stats = fit_stats(iter(pooled))
    fne_config = FneConfig()
    stats_path = root / "stats.fnes"
    tensorio.save_fne_stats(stats, fne_config, stats_path)
    return manifest, manifest_path, stats, fne_config, stats_path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_vocab() -> Vocabulary:
    return Vocabulary({"a": 1, "dog": 2, "runs": 3}, max_size=10)


@pytest.fixture
def default_fne_config() -> FneConfig:
    return FneConfig()
