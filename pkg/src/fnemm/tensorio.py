"""Persistent data formats: activation files, dataset manifests, feature
statistics, and model checkpoints.

All binary formats are little-endian with IEEE-754 32-bit floats and
length-prefixed UTF-8 strings:

  FNEA  magic "FNEA" | version u32 | image_id (u32 len + UTF-8) |
        layer_count u32 | per layer: name (u32 len + UTF-8) | kind u8
        (0=conv, 1=fc) | conv: H u32, W u32, C u32 / fc: N u32 |
        payload float32[] row-major.
  FNES  magic "FNES" | version u32 | D u32 | mean float32[D] |
        std float32[D] | theta_pos float32 | theta_neg float32 |
        fitted_on u32.
  FNEC  magic "FNEC" | version u32 | header_len u32 | JSON header
        (config, vocabulary, provenance, tensor directory) | raw
        tensor payloads in directory order.

Manifests are line-delimited JSON, one record per line.  Readers never
crash on malformed input: any bad byte stream raises a typed error.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    DimensionError,
    FormatError,
    IoError,
    TruncationError,
    ValidationError,
    VersionError,
)
from .fne import FneConfig, FneStats
from .mmspace import ModelParams, from_tensors, tensors
from .textenc import Vocabulary

FNEA_MAGIC = b"FNEA"
FNES_MAGIC = b"FNES"
FNEC_MAGIC = b"FNEC"
FORMAT_VERSION = 1

_KIND_CODES = {"conv": 0, "fc": 1}
_KIND_NAMES = {0: "conv", 1: "fc"}
_DTYPE_CODES = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}
_SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ActivationLayer:
    """One layer's raw activations: (H, W, C) for conv, (N,) for fc."""

    name: str
    kind: str
    values: np.ndarray

    def __post_init__(self) -> None:
        if self.kind not in _KIND_CODES:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float32)
        expected = 3 if self.kind == "conv" else 1
        if self.values.ndim != expected:
            raise ValidationError(
                f"{self.kind} layer {self.name!r} must be {expected}-D, got {self.values.ndim}-D"
            )
        if min(self.values.shape) < 1:
            raise ValidationError(f"layer {self.name!r} has an empty dimension")

    @property
    def width(self) -> int:
        """Features this layer contributes after pooling: C for conv, N for fc."""
        return self.values.shape[-1] if self.kind == "conv" else self.values.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ActivationLayer):
            return NotImplemented
        return (
            self.name == other.name
            and self.kind == other.kind
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(eq=False)
class ActivationSet:
    """Ordered per-layer activations for one image.

    A layerless set is constructible but cannot be written; the writer
    rejects it.
    """

    image_id: str
    layers: list[ActivationLayer]

    def __post_init__(self) -> None:
        self.layers = list(self.layers)

    def layout(self) -> tuple[tuple[str, str, int], ...]:
        """Layer signature (name, kind, width); must match across a dataset."""
        return tuple((l.name, l.kind, l.width) for l in self.layers)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ActivationSet):
            return NotImplemented
        return self.image_id == other.image_id and self.layers == other.layers


@dataclass
class ManifestEntry:
    image_id: str
    split: str
    activation_path: Path
    captions: list[str]


@dataclass
class DatasetManifest:
    """All images of a dataset with their split, activations, and captions."""

    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for entry in self.entries:
            if entry.image_id in seen:
                raise ValidationError(f"duplicate image_id {entry.image_id!r}")
            seen.add(entry.image_id)
            if entry.split not in _SPLITS:
                raise ValidationError(
                    f"image {entry.image_id!r} has unknown split {entry.split!r}"
                )
            if not entry.captions:
                raise ValidationError(f"image {entry.image_id!r} has no captions")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict[str, int]:
        out = {s: 0 for s in _SPLITS}
        for entry in self.entries:
            out[entry.split] += 1
        return out


@dataclass(eq=False)
class Checkpoint:
    """A trained model plus everything inference needs in one file."""

    config: dict
    vocabulary: Vocabulary
    fne_stats: FneStats
    fne_config: FneConfig
    params: ModelParams
    epoch: int
    seed: int
    validation_score: float
    format_version: int = FORMAT_VERSION


# ---------------------------------------------------------------------------
# Binary primitives
# ---------------------------------------------------------------------------

class _Cursor:
    """Sequential reader over a byte string with typed failure modes."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncationError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.data)}"
            )
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def f32(self) -> float:
        return float(np.frombuffer(self.take(4), dtype="<f4")[0])

    def text(self) -> str:
        raw = self.take(self.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{self.what}: invalid UTF-8 string") from exc

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()

    def done(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(
                f"{self.what}: {len(self.data) - self.pos} unexpected trailing bytes"
            )


def _pack_text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_file(path: Path | str, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {what} {path}: {exc}") from exc


def _write_file(path: Path | str, blobs: Iterable[bytes], what: str) -> None:
    # Write to a sibling temp file and rename, so a crashed run never leaves
    # a half-written artifact behind.
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise IoError(f"cannot write {what} {path}: {exc}") from exc


def _check_magic_version(cur: _Cursor, magic: bytes) -> None:
    got = cur.take(len(magic))
    if got != magic:
        raise FormatError(f"{cur.what}: bad magic {got!r}, expected {magic!r}")
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise VersionError(
            f"{cur.what}: unsupported format version {version}, expected {FORMAT_VERSION}"
        )


# ---------------------------------------------------------------------------
# Activation files (FNEA)
# ---------------------------------------------------------------------------

def write_activation_file(acts: ActivationSet, path: Path | str) -> None:
    """Serialize an activation set; refuses degenerate (layerless) sets."""
    if not acts.layers:
        raise FormatError("refusing to write an activation set with no layers")
    blobs = [FNEA_MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_text(acts.image_id),
             struct.pack("<I", len(acts.layers))]
    for layer in acts.layers:
        blobs.append(_pack_text(layer.name))
        blobs.append(struct.pack("<B", _KIND_CODES[layer.kind]))
        blobs.append(struct.pack(f"<{layer.values.ndim}I", *layer.values.shape))
        blobs.append(np.ascontiguousarray(layer.values, dtype="<f4").tobytes())
    _write_file(path, blobs, "activation file")


def read_activation_file(path: Path | str) -> ActivationSet:
    """Parse and validate an FNEA file."""
    cur = _Cursor(_read_file(path, "activation file"), f"activation file {path}")
    _check_magic_version(cur, FNEA_MAGIC)
    image_id = cur.text()
    layer_count = cur.u32()
    if layer_count == 0:
        raise FormatError(f"{cur.what}: zero layers")
    layers = []
    for _ in range(layer_count):
        name = cur.text()
        code = cur.u8()
        if code not in _KIND_NAMES:
            raise FormatError(f"{cur.what}: unknown layer kind code {code}")
        kind = _KIND_NAMES[code]
        shape = tuple(cur.u32() for _ in range(3 if kind == "conv" else 1))
        if min(shape) < 1:
            raise FormatError(f"{cur.what}: layer {name!r} has a zero dimension")
        count = 1
        for dim in shape:
            count *= dim
        values = cur.f32_array(count).reshape(shape)
        try:
            layers.append(ActivationLayer(name=name, kind=kind, values=values))
        except ValidationError as exc:
            raise FormatError(f"{cur.what}: {exc}") from exc
    cur.done()
    return ActivationSet(image_id=image_id, layers=layers)


# ---------------------------------------------------------------------------
# Dataset manifests (line-delimited JSON)
# ---------------------------------------------------------------------------

def load_manifest(path: Path | str, check_paths: bool = True) -> DatasetManifest:
    """Parse a JSONL manifest; relative activation paths resolve against
    the manifest's directory."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid UTF-8: {exc}") from exc
    base = path.resolve().parent
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(record, dict):
            raise ValidationError(f"{path}:{lineno}: record must be a JSON object")
        for key, typ in (("image_id", str), ("split", str),
                         ("activation_path", str), ("captions", list)):
            if key not in record:
                raise ValidationError(f"{path}:{lineno}: missing field {key!r}")
            if not isinstance(record[key], typ):
                raise ValidationError(f"{path}:{lineno}: field {key!r} has the wrong type")
        if not all(isinstance(c, str) for c in record["captions"]):
            raise ValidationError(f"{path}:{lineno}: captions must be strings")
        act_path = Path(record["activation_path"])
        if not act_path.is_absolute():
            act_path = base / act_path
        entries.append(ManifestEntry(
            image_id=record["image_id"],
            split=record["split"],
            activation_path=act_path,
            captions=list(record["captions"]),
        ))
    manifest = DatasetManifest(entries)
    if check_paths:
        for entry in manifest.entries:
            if not entry.activation_path.is_file():
                raise IoError(
                    f"activation file for image {entry.image_id!r} not found: "
                    f"{entry.activation_path}"
                )
    return manifest


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    lines = []
    for entry in manifest.entries:
        lines.append(json.dumps({
            "image_id": entry.image_id,
            "split": entry.split,
            "activation_path": str(entry.activation_path),
            "captions": entry.captions,
        }, ensure_ascii=False) + "\n")
    _write_file(path, [line.encode("utf-8") for line in lines], "manifest")


# ---------------------------------------------------------------------------
# Feature statistics (FNES)
# ---------------------------------------------------------------------------

def save_fne_stats(stats: FneStats, config: FneConfig, path: Path | str) -> None:
    blobs = [
        FNES_MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", stats.d),
        np.ascontiguousarray(stats.mean, dtype="<f4").tobytes(),
        np.ascontiguousarray(stats.std, dtype="<f4").tobytes(),
        struct.pack("<ff", config.theta_pos, config.theta_neg),
        struct.pack("<I", stats.fitted_on),
    ]
    _write_file(path, blobs, "stats file")


def load_fne_stats(path: Path | str) -> tuple[FneStats, FneConfig]:
    cur = _Cursor(_read_file(path, "stats file"), f"stats file {path}")
    _check_magic_version(cur, FNES_MAGIC)
    d = cur.u32()
    mean = cur.f32_array(d)
    std = cur.f32_array(d)
    theta_pos = cur.f32()
    theta_neg = cur.f32()
    fitted_on = cur.u32()
    cur.done()
    try:
        return (FneStats(mean=mean, std=std, fitted_on=fitted_on),
                FneConfig(theta_pos=theta_pos, theta_neg=theta_neg))
    except ValidationError as exc:
        raise FormatError(f"{cur.what}: {exc}") from exc


# ---------------------------------------------------------------------------
# Checkpoints (FNEC)
# ---------------------------------------------------------------------------

def _tensor_payload(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = list(tensors(ckpt.params).items())
    out.append(("fne.mean", ckpt.fne_stats.mean))
    out.append(("fne.std", ckpt.fne_stats.std))
    return out


def save_checkpoint(ckpt: Checkpoint, path: Path | str) -> None:
    """Write a checkpoint; parameter tensors round-trip bit-exactly."""
    named = _tensor_payload(ckpt)
    directory = []
    for name, arr in named:
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise ValidationError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        directory.append({"name": name, "shape": list(arr.shape), "dtype": code})
    header = {
        "config": ckpt.config,
        "fne_config": {"theta_pos": ckpt.fne_config.theta_pos,
                       "theta_neg": ckpt.fne_config.theta_neg},
        "fne_stats": {"fitted_on": ckpt.fne_stats.fitted_on},
        "vocabulary": {"max_size": ckpt.vocabulary.max_size,
                       "words": ckpt.vocabulary.words_in_order()},
        "provenance": {"epoch": ckpt.epoch, "seed": ckpt.seed,
                       "validation_score": ckpt.validation_score},
        "tensors": directory,
    }
    try:
        header_bytes = json.dumps(header, ensure_ascii=False).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"checkpoint config is not JSON-serializable: {exc}") from exc
    blobs = [FNEC_MAGIC, struct.pack("<I", ckpt.format_version),
             struct.pack("<I", len(header_bytes)), header_bytes]
    for _, arr in named:
        blobs.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    _write_file(path, blobs, "checkpoint")


def _require(mapping: dict, key: str, typ, what: str):
    if not isinstance(mapping, dict) or key not in mapping:
        raise FormatError(f"{what}: missing header field {key!r}")
    value = mapping[key]
    if typ is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, typ):
        raise FormatError(f"{what}: header field {key!r} has the wrong type")
    return value


def load_checkpoint(path: Path | str) -> Checkpoint:
    cur = _Cursor(_read_file(path, "checkpoint"), f"checkpoint {path}")
    _check_magic_version(cur, FNEC_MAGIC)
    header_bytes = cur.take(cur.u32())
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{cur.what}: invalid JSON header") from exc
    what = cur.what

    directory = _require(header, "tensors", list, what)
    arrays: dict[str, np.ndarray] = {}
    for item in directory:
        name = _require(item, "name", str, what)
        shape = tuple(_require(item, "shape", list, what))
        code = _require(item, "dtype", str, what)
        if code not in ("<f4", "<f8") or not all(isinstance(s, int) and s >= 0 for s in shape):
            raise FormatError(f"{what}: bad tensor directory entry for {name!r}")
        count = 1
        for dim in shape:
            count *= dim
        itemsize = 4 if code == "<f4" else 8
        raw = cur.take(count * itemsize)
        arrays[name] = np.frombuffer(raw, dtype=code).copy().reshape(shape)
    cur.done()

    vocab_h = _require(header, "vocabulary", dict, what)
    words = _require(vocab_h, "words", list, what)
    if not all(isinstance(w, str) for w in words):
        raise FormatError(f"{what}: vocabulary words must be strings")
    fne_h = _require(header, "fne_config", dict, what)
    stats_h = _require(header, "fne_stats", dict, what)
    prov = _require(header, "provenance", dict, what)
    try:
        for required in ("fne.mean", "fne.std", "embedding", "affine.W", "affine.b"):
            if required not in arrays:
                raise FormatError(f"{what}: missing tensor {required!r}")
        vocabulary = Vocabulary.from_words(words, _require(vocab_h, "max_size", int, what))
        stats = FneStats(mean=arrays.pop("fne.mean"), std=arrays.pop("fne.std"),
                         fitted_on=_require(stats_h, "fitted_on", int, what))
        fne_config = FneConfig(theta_pos=_require(fne_h, "theta_pos", float, what),
                               theta_neg=_require(fne_h, "theta_neg", float, what))
        params = from_tensors(arrays)
    except (ValidationError, DimensionError, KeyError, TypeError) as exc:
        raise FormatError(f"{what}: inconsistent checkpoint contents: {exc}") from exc
    if params.embedding.shape[0] != vocabulary.size:
        raise FormatError(f"{what}: embedding rows do not match the vocabulary size")
    return Checkpoint(
        config=_require(header, "config", dict, what),
        vocabulary=vocabulary,
        fne_stats=stats,
        fne_config=fne_config,
        params=params,
        epoch=_require(prov, "epoch", int, what),
        seed=_require(prov, "seed", int, what),
        validation_score=_require(prov, "validation_score", float, what),
    )
