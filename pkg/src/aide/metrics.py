"""Overlap and surface-distance metrics, post-processing and significance testing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .core import ValidationError, as_mask

_CROSS = ndimage.generate_binary_structure(2, 1)
_EIGHT = ndimage.generate_binary_structure(2, 2)

DEFAULT_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


class UndefinedMetric(ValueError):
    """The metric has no value for these inputs (e.g. empty reference)."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    pred, ref = as_mask(pred), as_mask(ref)
    if pred.shape != ref.shape:
        raise ValidationError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    return pred.astype(bool), ref.astype(bool)


def confusion_counts(pred, ref) -> ConfusionCounts:
    p, r = _pair(pred, ref)
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def dsc(pred, ref) -> float:
    """Dice similarity 2TP / (2TP + FP + FN); two empty masks score 1."""
    c = confusion_counts(pred, ref)
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        return 1.0
    return 2 * c.tp / denom


def ravd(pred, ref) -> float:
    """Relative area difference (FP - FN) / (TP + FN) as a fraction."""
    c = confusion_counts(pred, ref)
    if c.tp + c.fn == 0:
        raise UndefinedMetric("undefined RAVD: empty reference")
    return (c.fp - c.fn) / (c.tp + c.fn)


def boundary_mask(mask) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the foreground.

    Pixels beyond the image border count as background.
    """
    m = as_mask(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, structure=_CROSS, border_value=0)


def extract_boundary(mask) -> list[tuple[int, int]]:
    rows, cols = np.nonzero(boundary_mask(mask))
    return list(zip(rows.tolist(), cols.tolist()))


def _directed_distances(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    # distance from every src boundary pixel to the nearest dst boundary pixel
    field = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return field[src]


def _surface_distances(pred, ref, spacing):
    p, r = _pair(pred, ref)
    if not p.any() or not r.any():
        raise UndefinedMetric("undefined surface distance: empty mask")
    bp = p & ~ndimage.binary_erosion(p, structure=_CROSS, border_value=0)
    br = r & ~ndimage.binary_erosion(r, structure=_CROSS, border_value=0)
    spacing = tuple(float(s) for s in spacing)
    return _directed_distances(bp, br, spacing), _directed_distances(br, bp, spacing)


def assd(pred, ref, spacing=(1.0, 1.0)) -> float:
    """Average symmetric surface distance between the two boundaries."""
    d_pr, d_rp = _surface_distances(pred, ref, spacing)
    return float((d_pr.sum() + d_rp.sum()) / (d_pr.size + d_rp.size))


def mssd(pred, ref, spacing=(1.0, 1.0)) -> float:
    """Maximum symmetric surface distance (symmetric Hausdorff on boundaries)."""
    d_pr, d_rp = _surface_distances(pred, ref, spacing)
    return float(max(d_pr.max(), d_rp.max()))


def largest_connected_component(mask) -> np.ndarray:
    """Keep the largest 8-connected foreground component.

    Equal-sized components are resolved in favour of the one whose first
    pixel comes earliest in row-major order.
    """
    m = as_mask(mask)
    labels, n = ndimage.label(m, structure=_EIGHT)
    if n <= 1:
        return m.copy()
    sizes = np.bincount(labels.ravel())[1:]
    # ndimage.label numbers components in raster order of their first pixel
    keep = int(np.argmax(sizes)) + 1
    return (labels == keep).astype(np.uint8)


def multi_threshold_dsc(pred, ref_continuous, thresholds=DEFAULT_THRESHOLDS) -> float:
    """Mean DSC after binarizing prediction and continuous reference at each threshold.

    ``pred`` is either a (2, H, W) probability map or its (H, W) foreground
    channel.
    """
    pred = np.asarray(pred, dtype=np.float64)
    fg = pred[1] if pred.ndim == 3 else pred
    ref = np.asarray(ref_continuous, dtype=np.float64)
    if fg.shape != ref.shape:
        raise ValidationError(f"shape mismatch: {fg.shape} vs {ref.shape}")
    if len(thresholds) == 0:
        raise ValidationError("at least one threshold is required")
    scores = [dsc(fg >= t, ref >= t) for t in thresholds]
    return float(np.mean(scores))


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p value)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValidationError("paired t-test needs at least two pairs")
    diff = a - b
    if np.ptp(diff) <= 1e-12 * max(1.0, float(np.abs(diff).max())):
        raise ValidationError("paired t-test undefined: differences have zero variance")
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)


def evaluate_pair(pred, ref, spacing=(1.0, 1.0)) -> dict[str, float]:
    """All four scores for one prediction; undefined ones come back as NaN."""
    out = {"dsc": dsc(pred, ref)}
    for name, fn in (("ravd", ravd), ("assd", assd), ("mssd", mssd)):
        try:
            out[name] = fn(pred, ref) if name == "ravd" else fn(pred, ref, spacing)
        except UndefinedMetric:
            out[name] = float("nan")
    return out


def dsc_batch(preds: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Per-sample DSC for stacks of (N, H, W) binary masks."""
    p = np.asarray(preds, dtype=bool).reshape(len(preds), -1)
    r = np.asarray(refs, dtype=bool).reshape(len(refs), -1)
    if p.shape != r.shape:
        raise ValidationError(f"shape mismatch: {p.shape} vs {r.shape}")
    tp = np.count_nonzero(p & r, axis=1)
    denom = np.count_nonzero(p, axis=1) + np.count_nonzero(r, axis=1)
    out = np.ones(len(p))
    nz = denom > 0
    out[nz] = 2 * tp[nz] / denom[nz]
    return out


def summarize(preds: np.ndarray, refs: np.ndarray, spacing=(1.0, 1.0), pp: bool = False) -> dict[str, float]:
    """Mean DSC/RAVD/ASSD/MSSD over a stack; undefined per-sample values are skipped."""
    rows = [evaluate_pair(largest_connected_component(p) if pp else p, r, spacing) for p, r in zip(preds, refs)]
    out = {}
    for k in ("dsc", "ravd", "assd", "mssd"):
        vals = np.array([row[k] for row in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[k] = float(vals.mean()) if vals.size else float("nan")
    return out
