"""Command-line entry point: ``aide <verb> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .core import (MANIFEST_NAME, TrainConfig, ValidationError, load_config, load_manifest, load_split,
                   read_mask, save_config, save_samples, write_mask)
from .experiment import emit_plot, load_dataset, run_experiment, save_aide_outputs, write_csv
from .network import NonFiniteGradient, load_checkpoint, predict, save_checkpoint
from .standardize import standardize
from .synth import NOISE_MODES, NoiseParams, build_benchmark, scene_preset
from .trainer import Monitor, TrainingAborted, binarize_batch, train

log = logging.getLogger("aide")

EVAL_COLUMNS = ("sample_id", "dsc", "ravd", "assd", "mssd")


def _apply_thread_cap() -> None:
    raw = os.environ.get("AIDE_THREADS")
    if not raw:
        return
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ValidationError(f"AIDE_THREADS must be a positive integer, got {raw!r}")
    import torch

    torch.set_num_threads(n)


def _noise_list(modes: str, mags: str, prob: float) -> list[NoiseParams]:
    mode_list = [m.strip() for m in modes.split(",") if m.strip()]
    mag_list = [int(k) for k in mags.split(",")]
    if len(mag_list) == 1:
        mag_list *= len(mode_list)
    if len(mag_list) != len(mode_list):
        raise ValidationError("--noise-mag needs one value or one per --noise-mode entry")
    return [NoiseParams(m, k, prob) for m, k in zip(mode_list, mag_list)]


def cmd_synth(args) -> None:
    scene = scene_preset(args.domain, size=args.size)
    paths = build_benchmark(args.out, args.n_train, args.n_test, args.hq_frac,
                            _noise_list(args.noise_mode, args.noise_mag, args.noise_prob), scene,
                            seed=args.seed, unlabeled=args.unlabeled)
    for name, p in paths.items():
        log.info("wrote %s split to %s", name, p)


def cmd_standardize(args) -> None:
    config = load_config(args.config).replace(task_mode=args.mode.upper())
    labeled = load_split(args.labeled, with_truth=True)
    unlabeled = load_split(args.unlabeled, with_truth=True)
    nll, model = standardize(args.mode, labeled, unlabeled, config)
    out = Path(args.out)
    save_samples(out / "train", nll, "train", truth_dir=out / "truth" / "train")
    save_checkpoint(model, out / "pretrain.ckpt")
    if args.test:
        save_samples(out / "test", load_split(args.test), "test")
    n_hq = sum(s.label.quality.value == "HQ" for s in nll)
    log.info("NLL dataset: %d HQ + %d LQ samples in %s", n_hq, len(nll) - n_hq, out / "train")


def cmd_train(args) -> None:
    config = load_config(args.config)
    data = load_dataset(args.data)
    monitor = Monitor.from_samples(data.train, data.test, spacing=config.spacing)
    result = train(config, data.train, monitor)
    out = Path(args.out)
    save_aide_outputs(result, out)
    save_config(config, out / "config.json")
    log.info("best epoch %d; outputs in %s", result.best_epoch, out)


def cmd_predict(args) -> None:
    models = [load_checkpoint(p) for p in args.ckpt]
    samples = load_split(args.data)
    images = np.stack([s.image for s in samples]).astype(np.float32)
    prob = np.mean([predict(m, images) for m in models], axis=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s, mask in zip(samples, binarize_batch(prob)):
        write_mask(out / f"{s.id}.pgm", metrics.largest_connected_component(mask) if args.pp else mask)
    log.info("wrote %d predictions to %s", len(samples), out)


def _mask_dir(path: str) -> dict[str, np.ndarray]:
    """Masks keyed by sample id, from a manifest's labels or from ``<id>.pgm`` files."""
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"not a directory: {p}")
    if (p / MANIFEST_NAME).exists():
        m = load_manifest(p)
        return {e.id: read_mask(m.resolve(e.label)) for e in m.samples if e.label is not None}
    return {f.stem: read_mask(f) for f in sorted(p.glob("*.pgm"))}


def cmd_eval(args) -> None:
    preds = _mask_dir(args.pred)
    refs = _mask_dir(args.ref)
    if not refs:
        raise ValidationError(f"{args.ref}: no reference masks found")
    missing = sorted(set(refs) - set(preds))
    if missing:
        raise ValidationError(f"{len(missing)} reference samples have no prediction (first: {missing[0]})")
    spacing = tuple(args.spacing)
    rows = []
    for sid in sorted(refs):
        pred = preds[sid]
        if args.pp:
            pred = metrics.largest_connected_component(pred)
        row = metrics.evaluate_pair(pred, refs[sid], spacing)
        row["ravd"] *= 100.0  # reported in percent
        rows.append({"sample_id": sid, **row})
    write_csv(args.report, EVAL_COLUMNS, rows)
    log.info("mean dsc %.4f over %d samples; report in %s", np.mean([r["dsc"] for r in rows]), len(rows),
             args.report)


def cmd_experiment(args) -> None:
    out = run_experiment(args.spec, args.out)
    log.info("results in %s", out)


def cmd_plot(args) -> None:
    emit_plot(args.metrics, args.out)
    log.info("wrote %s", args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aide", description="Self-correcting segmentation training from imperfect labels")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark with noisy labels")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-test", type=int, required=True)
    p.add_argument("--hq-frac", type=float, required=True)
    p.add_argument("--noise-mode", default="dilate",
                   help=f"one of {', '.join(NOISE_MODES[:-1])}; comma-separate to mix several")
    p.add_argument("--noise-mag", default="2", help="magnitude, or one per noise mode")
    p.add_argument("--noise-prob", type=float, default=1.0, help="probability an LQ label is corrupted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", choices=("A", "B"), default="A")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--unlabeled", action="store_true", help="leave non-HQ samples unlabeled (unlabeled/ split)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("standardize", help="pretrain on labeled data and pseudo-label the rest")
    p.add_argument("--mode", choices=("ssl", "uda"), required=True)
    p.add_argument("--labeled", required=True)
    p.add_argument("--unlabeled", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--test", help="test split to copy alongside the result")
    p.set_defaults(func=cmd_standardize)

    p = sub.add_parser("train", help="co-train two networks on an HQ/LQ dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset root with train/ (and optionally test/)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write binary predictions of one or more checkpoints")
    p.add_argument("--ckpt", required=True, nargs="+", help="several checkpoints are averaged")
    p.add_argument("--data", required=True, help="manifest directory")
    p.add_argument("--out", required=True)
    p.add_argument("--pp", action="store_true", help="keep only the largest connected component")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predicted masks against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--pp", action="store_true", help="keep only the largest connected component first")
    p.add_argument("--spacing", type=float, nargs=2, default=(1.0, 1.0), metavar=("ROW", "COL"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run an experiment spec (arms x seeds)")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("plot", help="SVG chart of DSC against epoch")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap()
        args.func(args)
    except (ValidationError, FileNotFoundError, TrainingAborted, NonFiniteGradient, OSError, ValueError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"aide {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
