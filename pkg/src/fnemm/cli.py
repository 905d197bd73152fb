"""Command-line surface: fit-fne, train, eval, embed-text, embed-image, search.

Exit codes: 0 success, 2 validation failure, 3 I/O failure, 4 numeric
failure.  Every subcommand validates all of its inputs before writing any
output file.  FNEMM_NUM_THREADS caps the BLAS thread pools; --deterministic
forces sequential reductions (this implementation always reduces
sequentially, so the flag simply records the guarantee).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import (
    DimensionError,
    FormatError,
    IoError,
    NumericError,
    ValidationError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

# Flag name -> TrainConfig field.
_TRAIN_FLAGS = {
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "epochs": "max_epochs",
    "clip": "clip_threshold",
    "alpha": "alpha",
    "seed": "seed",
    "d_w": "d_w",
    "d_h": "d_h",
    "vocab_size": "vocab_size",
}


def _apply_threads_env() -> None:
    threads = os.environ.get("FNEMM_NUM_THREADS")
    if not threads:
        return
    if not threads.isdigit() or int(threads) < 1:
        raise ValidationError("FNEMM_NUM_THREADS must be a positive integer")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def _print_vector(vector, as_json: bool) -> None:
    values = [float(v) for v in vector]
    if as_json:
        print(json.dumps(values))
    else:
        print(" ".join(str(v) for v in values))


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    from .optim import TrainConfig

    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config file {path}: {exc}") from exc
    try:
        values = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    defaults = TrainConfig()
    for key, value in values.items():
        if not hasattr(defaults, key):
            raise ValidationError(f"config file {path}: unknown option {key!r}")
        expected = type(getattr(defaults, key))
        if expected is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, expected) or isinstance(value, bool):
            raise ValidationError(
                f"config file {path}: option {key!r} must be {expected.__name__}"
            )
        values[key] = value
    return values


def _effective_train_config(args) -> "TrainConfig":
    from .optim import TrainConfig

    # Precedence: flags > config file > built-in defaults.
    merged = TrainConfig().to_dict()
    merged.update(_load_config_file(args.config))
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            merged[key] = value
    config = TrainConfig.from_dict(merged)
    config.validate()
    return config


def _echo_config(config) -> None:
    pairs = " ".join(f"{k}={v}" for k, v in sorted(config.to_dict().items()))
    print(f"config: {pairs}")


def cmd_fit_fne(args) -> int:
    from . import tensorio
    from .fne import FneConfig, spatial_pool
    from .fne import fit_stats

    fne_config = FneConfig(theta_pos=args.theta_pos, theta_neg=args.theta_neg)
    manifest = tensorio.load_manifest(args.manifest)
    entries = manifest.split("train")
    if not entries:
        raise ValidationError("manifest has no train entries to fit on")

    layout = None

    def pooled():
        nonlocal layout
        for entry in entries:
            acts = tensorio.read_activation_file(entry.activation_path)
            if layout is None:
                layout = acts.layout()
            elif acts.layout() != layout:
                raise ValidationError(
                    f"activation layout of image {entry.image_id!r} differs from the "
                    "rest of the dataset"
                )
            yield spatial_pool(acts)

    stats = fit_stats(pooled())
    tensorio.save_fne_stats(stats, fne_config, args.out)
    print(f"D={stats.d} fitted_on={stats.fitted_on}")
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from . import tensorio
    from .optim import train

    config = _effective_train_config(args)
    _echo_config(config)
    manifest = tensorio.load_manifest(args.manifest)
    stats, fne_config = tensorio.load_fne_stats(args.stats)

    checkpoint, report = train(manifest, stats, fne_config, config)

    tensorio.save_checkpoint(checkpoint, args.out)
    report_path = args.report or f"{args.out}.report.json"
    try:
        Path(report_path).write_text(
            json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    except OSError as exc:
        raise IoError(f"cannot write report {report_path}: {exc}") from exc
    print(f"selected epoch {report.selected_epoch} "
          f"(validation score {checkpoint.validation_score:.4f})")
    print(f"wrote {args.out}")
    print(f"wrote {report_path}")
    if report.aborted:
        print(f"training aborted early: {report.abort_reason}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import tensorio
    from .evaluation import evaluate, render_metrics

    checkpoint = tensorio.load_checkpoint(args.checkpoint)
    manifest = tensorio.load_manifest(args.manifest)
    metrics = evaluate(checkpoint, manifest, args.split)
    if args.json:
        print(json.dumps(metrics.to_dict()))
    else:
        print(render_metrics(metrics, label=Path(args.checkpoint).name))
    return EXIT_OK


def _caption_embedding(checkpoint, text: str):
    from .errors import EmptyCaptionError
    from .textenc import encode, gru_forward, tokenize

    token_ids = encode(tokenize(text), checkpoint.vocabulary)
    if token_ids.size == 0:
        raise EmptyCaptionError(f"caption {text!r} contains no tokens")
    vector, _ = gru_forward(token_ids, checkpoint.params.embedding, checkpoint.params.gru)
    return vector


def cmd_embed_text(args) -> int:
    from . import tensorio

    checkpoint = tensorio.load_checkpoint(args.checkpoint)
    _print_vector(_caption_embedding(checkpoint, args.text), args.json)
    return EXIT_OK


def _image_embedding(checkpoint, activation_path):
    from . import tensorio
    from .fne import fne_embed
    from .mmspace import project_image

    acts = tensorio.read_activation_file(activation_path)
    fne_vec = fne_embed(acts, checkpoint.fne_stats, checkpoint.fne_config)
    return project_image(fne_vec, checkpoint.params.affine)


def cmd_embed_image(args) -> int:
    from . import tensorio

    checkpoint = tensorio.load_checkpoint(args.checkpoint)
    _print_vector(_image_embedding(checkpoint, args.activations), args.json)
    return EXIT_OK


def cmd_search(args) -> int:
    import numpy as np

    from . import tensorio
    from .evaluation import embed_split
    from .mmspace import similarity_matrix

    checkpoint = tensorio.load_checkpoint(args.checkpoint)
    manifest = tensorio.load_manifest(args.manifest)
    entries = manifest.split(args.split)
    if not entries:
        raise ValidationError(f"split {args.split!r} is empty")
    index = embed_split(entries, checkpoint.params, checkpoint.vocabulary,
                        checkpoint.fne_stats, checkpoint.fne_config)

    if args.text is not None:
        query = _caption_embedding(checkpoint, args.text)
        candidates = index.images
        labels = index.image_ids
    else:
        query = _image_embedding(checkpoint, args.image)
        candidates = index.captions
        labels = [f"{index.image_ids[o]}: {t}"
                  for o, t in zip(index.caption_owner, index.caption_texts)]

    sims = similarity_matrix(np.asarray(query)[None, :], candidates)[0]
    order = np.argsort(-sims, kind="stable")[:args.k]
    results = [{"rank": r + 1, "similarity": float(sims[i]), "match": labels[i]}
               for r, i in enumerate(order)]
    if args.json:
        print(json.dumps(results))
    else:
        for item in results:
            print(f"{item['rank']:4d}  {item['similarity']: .6f}  {item['match']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fnemm",
        description="Train and query a joint image-caption embedding space "
                    "built on full-network image features.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="errors only")
    # Also accepted after the subcommand; SUPPRESS keeps a pre-subcommand
    # flag from being clobbered by the subparser's defaults.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS, help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true",
                        default=argparse.SUPPRESS, help="errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-fne", parents=[common],
                       help="fit feature statistics on the train split")
    p.add_argument("manifest", help="dataset manifest (JSONL)")
    p.add_argument("--out", required=True, help="output stats file (FNES)")
    p.add_argument("--theta-pos", type=float, default=0.15,
                   help="z-value above which a feature becomes +1")
    p.add_argument("--theta-neg", type=float, default=-0.25,
                   help="z-value below which a feature becomes -1")
    p.set_defaults(func=cmd_fit_fne)

    p = sub.add_parser("train", parents=[common], help="train the joint embedding space")
    p.add_argument("manifest")
    p.add_argument("--stats", required=True, help="fitted stats file (FNES)")
    p.add_argument("--out", required=True, help="output checkpoint (FNEC)")
    p.add_argument("--report", help="training report path (JSON)")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--lr", type=float, help="ADAM learning rate")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int, help="number of epochs to train")
    p.add_argument("--clip", type=float, help="GRU gradient clipping threshold")
    p.add_argument("--alpha", type=float, help="ranking loss margin")
    p.add_argument("--seed", type=int)
    p.add_argument("--d-w", dest="d_w", type=int, help="word embedding width")
    p.add_argument("--d-h", dest="d_h", type=int, help="GRU width / joint space size")
    p.add_argument("--vocab-size", dest="vocab_size", type=int)
    p.add_argument("--deterministic", action="store_true",
                   help="force sequential reductions (always on)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.add_argument("--deterministic", action="store_true",
                   help="force sequential reductions (always on)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("embed-text", parents=[common], help="print the joint-space vector of a caption")
    p.add_argument("checkpoint")
    p.add_argument("text")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_embed_text)

    p = sub.add_parser("embed-image", parents=[common], help="print the joint-space vector of an image")
    p.add_argument("checkpoint")
    p.add_argument("activations", help="activation file (FNEA)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_embed_image)

    p = sub.add_parser("search", parents=[common], help="rank a split's candidates against a query")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--text", help="caption query; ranks the split's images")
    group.add_argument("--image", help="activation-file query; ranks the split's captions")
    p.add_argument("-k", type=int, default=10, help="number of results")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_search)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.ERROR if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads_env()
        return args.func(args)
    except (ValidationError, DimensionError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except IoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
