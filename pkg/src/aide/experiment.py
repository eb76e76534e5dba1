"""Experiment orchestration: arms x seeds, baselines, summaries and plots."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import metrics
from .core import (MANIFEST_NAME, Sample, TrainConfig, ValidationError, load_split, write_mask)
from .network import SegNet, predict, save_checkpoint
from .trainer import Monitor, TrainResult, binarize_batch, train, train_supervised

log = logging.getLogger(__name__)

METHODS = ("aide", "fully_supervised", "pseudo_label_static")
SCORE_COLUMNS = ("dsc", "ravd", "assd", "mssd")
ARM_COLUMNS = ("seed", "model_id", "pp") + SCORE_COLUMNS


@dataclass
class Dataset:
    train: list[Sample]
    test: list[Sample]
    root: Path


def load_dataset(root: str | os.PathLike) -> Dataset:
    """Load ``root/train`` (with truth sidecars when present) and ``root/test``.

    ``root`` may also point straight at a training manifest directory, in
    which case there is no test split.
    """
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset not found: {root}")
    if (root / MANIFEST_NAME).exists():
        return Dataset(load_split(root, with_truth=True), [], root)
    if not (root / "train" / MANIFEST_NAME).exists():
        raise FileNotFoundError(f"{root}: no train/{MANIFEST_NAME}")
    test = load_split(root / "test") if (root / "test" / MANIFEST_NAME).exists() else []
    return Dataset(load_split(root / "train", with_truth=True), test, root)


# ---------------------------------------------------------------------------
# baselines

def baseline_fully_supervised(config: TrainConfig, samples: Sequence[Sample], monitor: Monitor | None = None):
    """Segmentation loss only, on the labels as given; returns the final-epoch result."""
    return train_supervised(config, samples, epochs=config.Q, monitor=monitor)


def baseline_pseudo_label_static(config: TrainConfig, samples: Sequence[Sample], monitor: Monitor | None = None):
    """Like the fully supervised baseline, but every LQ label is replaced by
    the current prediction after each epoch."""
    return train_supervised(config, samples, epochs=config.Q, monitor=monitor, relabel_lq=True)


# ---------------------------------------------------------------------------
# evaluation

def ensemble_predict(models: Sequence[SegNet], images: np.ndarray) -> np.ndarray:
    return binarize_batch(np.mean([predict(m, images) for m in models], axis=0))


def evaluate_masks(preds: np.ndarray, refs: np.ndarray, spacing, pp: bool) -> dict[str, float]:
    return metrics.summarize(preds, refs, spacing, pp=pp)


def _test_arrays(test: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray]:
    if not test:
        raise ValidationError("the dataset has no test split to evaluate on")
    return (np.stack([s.image for s in test]).astype(np.float32), np.stack([s.label.mask for s in test]))


def score_models(models: dict[str, SegNet], test: Sequence[Sample], spacing, ensemble: bool = False) -> list[dict]:
    """Test scores for each named model, with and without post-processing."""
    images, refs = _test_arrays(test)
    preds = {name: binarize_batch(predict(m, images)) for name, m in models.items()}
    if ensemble and len(models) > 1:
        preds["ensemble"] = ensemble_predict(list(models.values()), images)
    rows = []
    for pp in (False, True):
        for name, p in preds.items():
            rows.append({"model_id": name, "pp": int(pp), **evaluate_masks(p, refs, spacing, pp)})
    return rows


def selected_rows(rows: list[dict]) -> list[dict]:
    """Per post-processing flag, the better single network by test DSC."""
    out = []
    for pp in (0, 1):
        singles = [r for r in rows if r["pp"] == pp and r["model_id"] != "ensemble"]
        best = max(singles, key=lambda r: r["dsc"])
        out.append({**best, "model_id": "selected"})
    return out


# ---------------------------------------------------------------------------
# artifacts

def write_labels(out_dir: str | os.PathLike, labels) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in labels:
        write_mask(out / f"{rec.sample_id}.pgm", rec.mask)


def save_aide_outputs(result: TrainResult, out_dir: str | os.PathLike) -> None:
    """metrics.csv, best_n1.ckpt, best_n2.ckpt and labels_final/{N1,N2}/."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.report.save(out / "metrics.csv")
    save_checkpoint(result.models[0], out / "best_n1.ckpt")
    save_checkpoint(result.models[1], out / "best_n2.ckpt")
    for mid, labels in zip(("N1", "N2"), result.labels):
        write_labels(out / "labels_final" / mid, labels)


def _csv_value(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 10))
    return str(v)


def write_csv(path: str | os.PathLike, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_csv_value(r.get(c, "")) for c in columns])


# ---------------------------------------------------------------------------
# experiment specs

@dataclass
class Arm:
    name: str
    method: str
    overrides: dict[str, Any] = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    dataset: Path
    arms: list[Arm]
    seeds: list[int]
    base_config: dict[str, Any] = field(default_factory=dict)
    compare: list[tuple[str, str]] = field(default_factory=list)
    ensemble: bool = False
    monitor_test: bool = True

    @classmethod
    def from_dict(cls, doc: dict[str, Any], base_dir: Path = Path(".")) -> ExperimentSpec:
        for key in ("dataset", "arms", "seeds"):
            if key not in doc:
                raise ValidationError(f"experiment spec is missing {key!r}")
        raw_arms = doc["arms"]
        if isinstance(raw_arms, dict):
            raw_arms = [{"name": k, **v} for k, v in raw_arms.items()]
        arms = []
        for a in raw_arms:
            method = a.get("method")
            if method not in METHODS:
                raise ValidationError(f"unknown method {method!r}; expected one of {METHODS}")
            arms.append(Arm(a.get("name", method), method, dict(a.get("config", {}))))
        names = [a.name for a in arms]
        if not arms or len(set(names)) != len(names):
            raise ValidationError("arms must be non-empty with unique names")
        seeds = [int(s) for s in doc["seeds"]]
        if not seeds:
            raise ValidationError("at least one seed is required")
        compare = [tuple(p) for p in doc.get("compare", [])]
        for a, b in compare:
            if a not in names or b not in names:
                raise ValidationError(f"comparison names unknown arm: {a!r} vs {b!r}")
        dataset = Path(doc["dataset"])
        if not dataset.is_absolute():
            dataset = base_dir / dataset
        return cls(dataset, arms, seeds, dict(doc.get("config", {})), compare,
                   bool(doc.get("ensemble", False)), bool(doc.get("monitor_test", True)))


def load_experiment_spec(path: str | os.PathLike) -> ExperimentSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentSpec.from_dict(doc, path.parent)


def arm_config(spec: ExperimentSpec, arm: Arm, seed: int) -> TrainConfig:
    base = TrainConfig.from_dict(spec.base_config) if spec.base_config else TrainConfig()
    return base.replace(**{**arm.overrides, "seed": seed})


def run_arm_seed(arm: Arm, config: TrainConfig, data: Dataset, out_dir: Path, monitor_test: bool = True,
                 ensemble: bool = False) -> list[dict]:
    """Train one arm at one seed, save its artifacts, return its test score rows."""
    monitor = Monitor.from_samples(data.train, data.test if monitor_test else (), spacing=config.spacing)
    out_dir.mkdir(parents=True, exist_ok=True)
    if arm.method == "aide":
        result = train(config, data.train, monitor)
        save_aide_outputs(result, out_dir)
        models = {"N1": result.models[0], "N2": result.models[1]}
    else:
        fn = baseline_fully_supervised if arm.method == "fully_supervised" else baseline_pseudo_label_static
        result = fn(config, data.train, monitor)
        result.report.save(out_dir / "metrics.csv")
        save_checkpoint(result.model, out_dir / "model.ckpt")
        if arm.method == "pseudo_label_static":
            write_labels(out_dir / "labels_final" / "N1", result.labels)
        models = {"N1": result.model}
    rows = score_models(models, data.test, config.spacing, ensemble=ensemble or config.ensemble)
    return rows + selected_rows(rows)


def summarize_arm(rows: Sequence[dict], arm: str) -> list[dict]:
    """mean and sd over seeds of the selected model (and the ensemble, if scored)."""
    out = []
    for model_id in ("selected", "ensemble"):
        for pp in (0, 1):
            sel = [r for r in rows if r["model_id"] == model_id and r["pp"] == pp]
            if not sel:
                continue
            rec = {"arm": arm if model_id == "selected" else f"{arm}:ensemble", "pp": pp, "n_seeds": len(sel)}
            for c in SCORE_COLUMNS:
                vals = np.array([r[c] for r in sel], dtype=np.float64)
                rec[f"{c}_mean"] = float(np.mean(vals))
                rec[f"{c}_sd"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out.append(rec)
    return out


SUMMARY_COLUMNS = ("arm", "pp", "n_seeds") + tuple(f"{c}_{s}" for c in SCORE_COLUMNS for s in ("mean", "sd"))
PVALUE_COLUMNS = ("arm_a", "arm_b", "pp", "metric", "n", "t", "p")


def compare_arms(per_arm: dict[str, list[dict]], pairs: Sequence[tuple[str, str]]) -> list[dict]:
    """Paired t-tests over seeds on the selected model's test DSC."""
    out = []
    for a, b in pairs:
        for pp in (0, 1):
            xa = {r["seed"]: r["dsc"] for r in per_arm[a] if r["model_id"] == "selected" and r["pp"] == pp}
            xb = {r["seed"]: r["dsc"] for r in per_arm[b] if r["model_id"] == "selected" and r["pp"] == pp}
            seeds = sorted(set(xa) & set(xb))
            if len(seeds) < 2:
                continue
            try:
                t, p = metrics.paired_t_test([xa[s] for s in seeds], [xb[s] for s in seeds])
            except ValidationError:
                t, p = float("nan"), float("nan")
            out.append({"arm_a": a, "arm_b": b, "pp": pp, "metric": "dsc", "n": len(seeds), "t": t, "p": p})
    return out


def run_experiment(spec: ExperimentSpec | str | os.PathLike, out_dir: str | os.PathLike) -> Path:
    """Run every arm at every seed and write the per-arm and summary reports.

    Layout::

        out/<arm>/seed_<s>/...       training artifacts of one run
        out/<arm>/metrics.csv        test scores per seed, model and pp flag
        out/summary.csv              mean and sd per arm of the selected model
        out/pvalues.csv              paired t-tests for the designated pairs
    """
    if not isinstance(spec, ExperimentSpec):
        spec = load_experiment_spec(spec)
    data = load_dataset(spec.dataset)
    if not data.test:
        raise ValidationError(f"{spec.dataset}: experiments need a test split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_arm: dict[str, list[dict]] = {}
    summary = []
    for arm in spec.arms:
        rows = []
        for seed in spec.seeds:
            log.info("arm %s (%s), seed %d", arm.name, arm.method, seed)
            config = arm_config(spec, arm, seed)
            for r in run_arm_seed(arm, config, data, out / arm.name / f"seed_{seed}", spec.monitor_test,
                                  spec.ensemble):
                rows.append({"seed": seed, **r})
        write_csv(out / arm.name / "metrics.csv", ARM_COLUMNS, rows)
        per_arm[arm.name] = rows
        summary.extend(summarize_arm(rows, arm.name))
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    if spec.compare:
        write_csv(out / "pvalues.csv", PVALUE_COLUMNS, compare_arms(per_arm, spec.compare))
    return out


def read_summary(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            if k != "arm":
                r[k] = float(v)
    return rows


# ---------------------------------------------------------------------------
# plotting

PLOT_WIDTH, PLOT_HEIGHT, PLOT_MARGIN = 640, 400, 50
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def plot_coordinates(epoch: float, value: float, epoch_range: tuple[float, float]) -> tuple[float, float]:
    """Map (epoch, DSC) into SVG coordinates.

    x spans the epoch range across the plotting area (a single epoch sits in
    the middle); y maps DSC 0..1 from the bottom edge to the top edge.
    """
    lo, hi = epoch_range
    w = PLOT_WIDTH - 2 * PLOT_MARGIN
    h = PLOT_HEIGHT - 2 * PLOT_MARGIN
    x = PLOT_MARGIN + (w / 2 if hi == lo else (epoch - lo) / (hi - lo) * w)
    y = PLOT_MARGIN + (1.0 - value) * h
    return x, y


def _read_series(path: str | os.PathLike) -> dict[str, list[tuple[float, float]]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metrics file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "dsc" not in cols or "epoch" not in cols:
            raise ValidationError(f"{path}: expected 'epoch' and 'dsc' columns, got {cols}")
        keys = [c for c in ("arm", "model_id", "split") if c in cols]
        series: dict[str, list[tuple[float, float]]] = {}
        for lineno, rec in enumerate(reader, start=2):
            try:
                pt = (float(rec["epoch"]), float(rec["dsc"]))
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed row") from exc
            name = "/".join(rec[k] for k in keys) or "dsc"
            series.setdefault(name, []).append(pt)
    if not series:
        raise ValidationError(f"{path}: no data rows")
    return series


def emit_plot(metrics_csv: str | os.PathLike, out_svg: str | os.PathLike) -> Path:
    """Write a standalone SVG line chart of DSC against epoch, one line per series."""
    series = _read_series(metrics_csv)
    epochs = [e for pts in series.values() for e, _ in pts]
    rng = (min(epochs), max(epochs))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT_WIDTH}" height="{PLOT_HEIGHT}" '
             f'viewBox="0 0 {PLOT_WIDTH} {PLOT_HEIGHT}">',
             f'<rect x="0" y="0" width="{PLOT_WIDTH}" height="{PLOT_HEIGHT}" fill="white"/>']
    x0, y0 = plot_coordinates(rng[0], 0.0, rng)
    x1, y1 = plot_coordinates(rng[1], 1.0, rng)
    left, right = PLOT_MARGIN, PLOT_WIDTH - PLOT_MARGIN
    parts.append(f'<line x1="{left}" y1="{y0:.3f}" x2="{right}" y2="{y0:.3f}" stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{y0:.3f}" x2="{left}" y2="{y1:.3f}" stroke="black"/>')
    parts.append(f'<text x="{PLOT_WIDTH / 2}" y="{PLOT_HEIGHT - 12}" text-anchor="middle" '
                 f'font-size="12">epoch ({rng[0]:g} to {rng[1]:g})</text>')
    parts.append(f'<text x="12" y="{PLOT_HEIGHT / 2}" font-size="12" '
                 f'transform="rotate(-90 12 {PLOT_HEIGHT / 2})">DSC</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join("%.3f,%.3f" % plot_coordinates(e, v, rng) for e, v in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}">'
                     f'<title>{escape(name)}</title></polyline>')
        parts.append(f'<text x="{right + 4}" y="{PLOT_MARGIN + 14 * i}" font-size="10" fill="{color}">'
                     f'{escape(name)}</text>')
    parts.append("</svg>")
    out = Path(out_svg)
    out.write_text("\n".join(parts) + "\n")
    return out
