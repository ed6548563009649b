"""Command-line entry point: preprocess, train, predict, evaluate.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
Progress goes to stderr; results only to files.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DataError,
    read_raw_volume,
    read_subject,
    read_subject_slices,
    raw_path,
    slices_from_normalized,
    normalize_stack,
    write_raw_volume,
    write_slice,
)
from .metrics import cohort_summary, evaluate_case, format_table, write_report_csv
from .model import CheckpointFormatError, build_drunet104, load_checkpoint
from .training import LabelError, SliceDataset, TrainConfig, TrainingError, predict_volume, train

log = logging.getLogger("drunet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, args: argparse.Namespace, **extra) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {"command": command, "version": __version__, "config": config, **extra}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _subject_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise UsageError(f"{root} is not a directory")
    return sorted(p for p in root.iterdir() if p.is_dir())


# -- commands -------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    out = Path(args.out)
    done, failed = [], {}
    for folder in _subject_dirs(Path(args.data_root)):
        subject = folder.name
        try:
            stack = read_subject(folder.parent, subject)
            vol, stats = normalize_stack(stack)
        except DataError as exc:
            log.warning("skipping %s: %s", subject, exc)
            failed[subject] = str(exc)
            continue
        for sample in slices_from_normalized(vol, stack.labels, subject):
            write_slice(sample, out)
        sidecar = {m: {"mean": s.mean, "sd": s.sd} for m, s in stats.items()}
        (out / subject / f"{subject}_stats.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        log.info("%s: %d slices", subject, vol.shape[1])
        done.append(subject)
    write_manifest(out / "manifest.json", "preprocess", args, subjects=done, skipped=failed)
    if not done:
        log.error("no subject could be preprocessed")
        return EXIT_DATA
    return EXIT_OK


def _load_training_set(root: Path) -> SliceDataset:
    samples = []
    for folder in _subject_dirs(root):
        samples.extend(read_subject_slices(folder))
    labelled = [s for s in samples if s.label is not None]
    if not labelled:
        raise DataError(f"no labelled slices found under {root}")
    log.info("%d labelled slices from %s", len(labelled), root)
    return SliceDataset.from_samples(labelled)


def cmd_train(args) -> int:
    config = TrainConfig(
        batch_size=args.batch,
        epochs=args.epochs,
        learning_rate=args.lr,
        dropout_rate=args.dropout,
        augment_flips=not args.no_augment,
        seed=args.seed,
    )
    dataset = _load_training_set(Path(args.data_root))
    ckpt = Path(args.out)
    loss_csv = ckpt.with_name(f"{ckpt.stem}_loss.csv")
    model = build_drunet104(dataset.images.shape[1], 4, config.dropout_rate, args.seed, args.width_divisor)
    train(
        model,
        dataset,
        config,
        checkpoint_path=ckpt,
        loss_csv=loss_csv,
        on_epoch=lambda e, l: log.info("epoch %d/%d mean loss %.6f", e, config.epochs, l),
    )
    write_manifest(ckpt.with_name(f"{ckpt.stem}_manifest.json"), "train", args, checkpoint_sha256=sha256_of(ckpt))
    return EXIT_OK


def cmd_predict(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    model, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    subjects = []
    for folder in _subject_dirs(Path(args.data_root)):
        samples = read_subject_slices(folder)
        volume = predict_volume(model, samples, args.batch)
        write_raw_volume(raw_path(out, folder.name, "seg"), volume, "seg")
        log.info("%s: predicted %s", folder.name, volume.shape)
        subjects.append(folder.name)
    write_manifest(out / "manifest.json", "predict", args, checkpoint_sha256=sha256_of(args.checkpoint), subjects=subjects)
    return EXIT_OK


def _label_volumes(root: Path) -> dict[str, Path]:
    return {d.name: raw_path(root, d.name, "seg") for d in _subject_dirs(root) if raw_path(root, d.name, "seg").exists()}


def cmd_evaluate(args) -> int:
    if not args.truth:
        raise UsageError("--truth is required")
    preds = _label_volumes(Path(args.data_root))
    truths = _label_volumes(Path(args.truth))
    common = sorted(preds.keys() & truths.keys())
    skipped = sorted(preds.keys() ^ truths.keys())
    if not common:
        raise DataError("prediction and truth roots share no subjects")
    reports = []
    for subject in common:
        pred, _ = read_raw_volume(preds[subject])
        truth, _ = read_raw_volume(truths[subject])
        reports.append(evaluate_case(pred.astype(np.int64), truth.astype(np.int64), subject))
    for subject in skipped:
        log.warning("skipping %s: present in only one root", subject)
    write_report_csv(args.out, reports, skipped)
    log.info("\n%s", format_table(cohort_summary(reports)))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drunet", description="DR-Unet104 brain lesion segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--data-root", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("preprocess", help="raw volumes -> standardised PNG slices")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train on a slice directory")
    common(p)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--width-divisor", type=int, default=1, help="divide every channel count (toy runs)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="slices -> reconstructed label volumes")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--batch", type=int, default=10)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="per-case and cohort metrics")
    common(p)
    p.add_argument("--truth", type=Path)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _thread_limit(deterministic: bool):
    if not deterministic:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version or a usage error
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if args.command != "preprocess":
        log.setLevel(logging.INFO)
    try:
        with _thread_limit(args.deterministic):
            return args.func(args)
    except (UsageError, ValueError) as exc:
        if isinstance(exc, (DataError, LabelError, CheckpointFormatError)):
            log.error("%s", exc)
            return EXIT_DATA
        log.error("%s", exc)
        return EXIT_USAGE
    except (TrainingError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
