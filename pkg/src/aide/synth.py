"""Synthetic scenes with exact ground truth, and controllable label corruption."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .core import (LabelRecord, Quality, Sample, SeededRng, ValidationError, as_mask, save_samples)
from .metrics import dsc

SHAPES = ("disk", "ellipse", "blob")
NOISE_MODES = ("dilate", "erode", "translate", "drop_region", "add_blob", "replace_with_model")


@dataclass(frozen=True)
class SceneParams:
    size: int = 64
    shapes: tuple[str, ...] = ("disk", "ellipse")
    radius: tuple[float, float] = (8.0, 15.0)
    fg_band: tuple[float, float] = (0.6, 0.85)
    bg_level: float = 0.25
    texture: float = 0.08
    texture_sigma: float = 1.5
    confounders: int = 2
    domain: str = "A"

    def __post_init__(self):
        if self.size % 16 or self.size < 16:
            raise ValidationError("scene size must be a positive multiple of 16")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise ValidationError(f"unknown shape families {sorted(bad)}")
        if not 0 < self.radius[0] <= self.radius[1]:
            raise ValidationError("radius range must be positive and ordered")
        if self.radius[1] + 2 >= self.size / 2:
            raise ValidationError(f"radius range {self.radius} does not fit a {self.size}x{self.size} scene")
        if self.confounders < 0 or self.texture < 0:
            raise ValidationError("confounder count and texture amplitude must be non-negative")


# Domain presets: A is bright-on-dark with little texture, B inverts the
# contrast and roughens the background.
DOMAIN_PRESETS = {
    "A": dict(fg_band=(0.6, 0.85), bg_level=0.25, texture=0.08, domain="A"),
    "B": dict(fg_band=(0.15, 0.35), bg_level=0.65, texture=0.2, domain="B"),
}


def scene_preset(domain: str = "A", **overrides) -> SceneParams:
    """Preset scene parameters; the radius range scales with a non-default size."""
    if domain not in DOMAIN_PRESETS:
        raise ValidationError(f"unknown domain preset {domain!r}")
    size = overrides.get("size", SceneParams.size)
    if "radius" not in overrides and size != SceneParams.size:
        scale = size / SceneParams.size
        overrides["radius"] = tuple(r * scale for r in SceneParams.radius)
    return SceneParams(**{**DOMAIN_PRESETS[domain], **overrides})


@dataclass(frozen=True)
class NoiseParams:
    mode: str = "dilate"
    magnitude: int = 2
    apply_probability: float = 1.0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValidationError(f"unknown noise mode {self.mode!r}")
        if self.magnitude < 0:
            raise ValidationError("noise magnitude must be >= 0")
        if not 0 <= self.apply_probability <= 1:
            raise ValidationError("apply_probability must be in [0, 1]")


def _grid(size):
    return np.mgrid[:size, :size].astype(np.float64)


def _shape_mask(shape: str, params: SceneParams, gen: np.random.Generator) -> np.ndarray:
    n = params.size
    yy, xx = _grid(n)
    lo, hi = params.radius
    r = gen.uniform(lo, hi)
    margin = hi + 2
    cy, cx = gen.uniform(margin, n - margin, size=2)
    if shape == "disk":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "ellipse":
        a = r
        b = r * gen.uniform(0.55, 0.9)
        th = gen.uniform(0, math.pi)
        u = (yy - cy) * math.cos(th) + (xx - cx) * math.sin(th)
        v = -(yy - cy) * math.sin(th) + (xx - cx) * math.cos(th)
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    # blob: a main disk plus overlapping lobes
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= (0.8 * r) ** 2
    for _ in range(int(gen.integers(1, 3))):
        ang = gen.uniform(0, 2 * math.pi)
        d = 0.7 * r
        rr = 0.55 * r
        mask |= (yy - cy - d * math.sin(ang)) ** 2 + (xx - cx - d * math.cos(ang)) ** 2 <= rr * rr
    return mask


def _texture(params: SceneParams, gen: np.random.Generator) -> np.ndarray:
    noise = gen.standard_normal((params.size, params.size))
    if params.texture == 0:
        return np.zeros_like(noise)
    smooth = ndimage.gaussian_filter(noise, params.texture_sigma, mode="wrap")
    smooth /= smooth.std() + 1e-12
    return params.texture * smooth


def generate_scene(params: SceneParams, rng: SeededRng | np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Return a (1, H, W) image in [0, 1] and its exact foreground mask.

    Confounders are small rectangles drawn in the foreground intensity band
    but kept out of the mask.
    """
    gen = rng.generator if isinstance(rng, SeededRng) else rng
    n = params.size
    shape = params.shapes[int(gen.integers(len(params.shapes)))]
    mask = _shape_mask(shape, params, gen)
    fg = gen.uniform(*params.fg_band)

    image = np.full((n, n), params.bg_level) + _texture(params, gen)
    forbidden = ndimage.binary_dilation(mask, iterations=3)
    placed = 0
    for _ in range(params.confounders * 20):
        if placed == params.confounders:
            break
        h, w = gen.integers(3, 8, size=2)
        top, left = gen.integers(0, n - h), gen.integers(0, n - w)
        if forbidden[top : top + h, left : left + w].any():
            continue
        image[top : top + h, left : left + w] = gen.uniform(*params.fg_band)
        forbidden[max(top - 2, 0) : top + h + 2, max(left - 2, 0) : left + w + 2] = True
        placed += 1
    image[mask] = fg + (image[mask] - params.bg_level) * 0.5
    # 8-bit quantization happens here so in-memory scenes equal their PGM round trip
    image = np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
    return image[None].astype(np.float32), mask.astype(np.uint8)


def _disk_offsets(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy ** 2 + xx ** 2) <= radius * radius


def corrupt_label(truth, noise: NoiseParams, rng: SeededRng | np.random.Generator,
                  image: np.ndarray | None = None,
                  predictor: Callable[[np.ndarray], np.ndarray] | None = None) -> tuple[np.ndarray, float]:
    """Corrupt a mask and report the DSC the corruption achieved against ``truth``.

    ``replace_with_model`` needs ``image`` and a ``predictor`` returning a
    binary mask for it.
    """
    gen = rng.generator if isinstance(rng, SeededRng) else rng
    truth = as_mask(truth)
    m = truth.astype(bool)
    k = noise.magnitude
    # the probability draw always happens so streams stay aligned across modes
    if gen.random() >= noise.apply_probability or (k == 0 and noise.mode != "replace_with_model"):
        out = m.copy()
    elif noise.mode == "dilate":
        out = ndimage.distance_transform_edt(~m) <= k if m.any() else m.copy()
    elif noise.mode == "erode":
        out = ndimage.distance_transform_edt(m) > k
    elif noise.mode == "translate":
        ang = gen.uniform(0, 2 * math.pi)
        dy, dx = int(round(k * math.sin(ang))), int(round(k * math.cos(ang)))
        out = np.zeros_like(m)
        h, w = m.shape
        src = m[max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)]
        out[max(dy, 0) : h - max(-dy, 0), max(dx, 0) : w - max(-dx, 0)] = src
    elif noise.mode == "drop_region":
        out = m.copy()
        fg = np.argwhere(m)
        if len(fg):
            cy, cx = fg[int(gen.integers(len(fg)))]
            out[max(cy - k, 0) : cy + k + 1, max(cx - k, 0) : cx + k + 1] = False
    elif noise.mode == "add_blob":
        out = m.copy()
        h, w = m.shape
        cy, cx = gen.integers(0, h), gen.integers(0, w)
        disk = _disk_offsets(k)
        r = disk.shape[0] // 2
        ys, xs = np.nonzero(disk)
        ys, xs = ys + cy - r, xs + cx - r
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        out[ys[keep], xs[keep]] = True
    else:  # replace_with_model
        if image is None or predictor is None:
            raise ValidationError("replace_with_model noise needs an image and a predictor")
        out = as_mask(predictor(image)).astype(bool)
    out = out.astype(np.uint8)
    return out, dsc(out, truth)


def build_benchmark(out_dir, n_train: int, n_test: int, hq_fraction: float,
                    noise: NoiseParams | Sequence[NoiseParams], scene: SceneParams | None = None,
                    seed: int = 0, unlabeled: bool = False) -> dict[str, Path]:
    """Write ``train/``, ``test/`` (and ``unlabeled/`` if requested) manifests.

    The first ``round(hq_fraction * n_train)`` training samples keep their
    true mask as an HQ label; the rest get a corrupted LQ label (or no label
    at all with ``unlabeled=True``, in which case they go to ``unlabeled/``).
    Ground truth lives under ``truth/`` and is only referenced through the
    manifests' optional ``truth`` field.  With several noise settings each LQ
    sample draws one uniformly.
    """
    if not 0 < hq_fraction <= 1:
        raise ValidationError("hq_fraction must be in (0, 1]")
    scene = scene or SceneParams()
    noises = [noise] if isinstance(noise, NoiseParams) else list(noise)
    if not noises:
        raise ValidationError("at least one noise setting is required")
    root = Path(out_dir)
    rng = SeededRng(seed).split("synth")
    scene_rng = rng.split("scenes")
    noise_rng = rng.split("noise")
    n_hq = max(1, int(round(hq_fraction * n_train))) if n_train else 0

    # non-A domains get an id prefix so source and target sets can be merged
    tag = "" if scene.domain == "A" else f"{scene.domain.lower()}_"
    train, pool, test = [], [], []
    for i in range(n_train):
        image, truth = generate_scene(scene, scene_rng.split(f"train{i}"))
        sid = f"{tag}train_{i:04d}"
        if i < n_hq:
            train.append(Sample(sid, image, LabelRecord(sid, truth, Quality.HQ), truth))
            continue
        if unlabeled:
            pool.append(Sample(sid, image, None, truth))
            continue
        srng = noise_rng.split(sid)
        chosen = noises[int(srng.integers(len(noises)))]
        lq, _ = corrupt_label(truth, chosen, srng)
        train.append(Sample(sid, image, LabelRecord(sid, lq, Quality.LQ), truth))
    for i in range(n_test):
        image, truth = generate_scene(scene, scene_rng.split(f"test{i}"))
        sid = f"{tag}test_{i:04d}"
        test.append(Sample(sid, image, LabelRecord(sid, truth, Quality.HQ)))

    out = {"train": root / "train", "test": root / "test"}
    save_samples(out["train"], train, "train", truth_dir=root / "truth" / "train")
    save_samples(out["test"], test, "test")
    if unlabeled:
        out["unlabeled"] = root / "unlabeled"
        save_samples(out["unlabeled"], pool, "train", truth_dir=root / "truth" / "unlabeled")
    return out


def scene_to_dict(params: SceneParams) -> dict:
    return dataclasses.asdict(params)
