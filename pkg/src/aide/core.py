"""Domain types, on-disk formats, configuration and seeded randomness."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


class ValidationError(ValueError):
    pass


class Quality(str, enum.Enum):
    HQ = "HQ"
    LQ = "LQ"


class LabelSource(str, enum.Enum):
    ANNOTATOR = "annotator"
    PRETRAIN_PSEUDOLABEL = "pretrain_pseudolabel"
    GLOBAL_CORRECTION = "global_correction"


# ---------------------------------------------------------------------------
# grids

def as_mask(values) -> np.ndarray:
    """Return ``values`` as a validated (H, W) uint8 mask in {0, 1}."""
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValidationError(f"mask must be a non-empty 2D grid, got shape {arr.shape}")
    if arr.dtype == bool:
        return arr.astype(np.uint8)
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError("mask values must be 0 or 1")
    return arr.astype(np.uint8)


def check_probmap(prob: np.ndarray, atol: float = 1e-6) -> None:
    """Raise unless ``prob`` is a (2, H, W) map of per-pixel distributions."""
    if prob.ndim != 3 or prob.shape[0] != 2:
        raise ValidationError(f"probability map must have shape (2, H, W), got {prob.shape}")
    if (prob < -atol).any() or (prob > 1 + atol).any():
        raise ValidationError("probability map values outside [0, 1]")
    if np.abs(prob.sum(axis=0) - 1.0).max() > atol:
        raise ValidationError("probability map channels do not sum to 1")


def probmap_from_foreground(fg: np.ndarray) -> np.ndarray:
    fg = np.asarray(fg, dtype=np.float64)
    return np.stack([1.0 - fg, fg])


def binarize(prob: np.ndarray) -> np.ndarray:
    """Argmax over the two channels; ties go to background."""
    return (prob[1] > prob[0]).astype(np.uint8)


# ---------------------------------------------------------------------------
# PGM (P5, 8-bit)

def _pgm_tokens(data: bytes, count: int) -> tuple[list[int], int]:
    tokens: list[int] = []
    pos = 2
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError("truncated PGM header")
        tokens.append(int(data[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm_header(path: str | os.PathLike) -> tuple[int, int]:
    """Return (height, width) without decoding the raster."""
    with open(path, "rb") as fh:
        head = fh.read(256)
    if head[:2] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM (P5) file")
    (width, height, _), _ = _pgm_tokens(head, 3)
    return height, width


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ValidationError(f"{path}: not a binary PGM (P5) file")
    (width, height, maxval), offset = _pgm_tokens(data, 3)
    if maxval > 255:
        raise ValidationError(f"{path}: only 8-bit PGM is supported")
    raster = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=offset)
    return raster.reshape(height, width).copy()


def write_pgm(path: str | os.PathLike, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValidationError("PGM payload must be a 2D uint8 array")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.tobytes())


def read_mask(path: str | os.PathLike) -> np.ndarray:
    raw = read_pgm(path)
    if not np.isin(raw, (0, 255)).all():
        raise ValidationError(f"{path}: mask pixels must be 0 or 255")
    return (raw == 255).astype(np.uint8)


def write_mask(path: str | os.PathLike, mask: np.ndarray) -> None:
    write_pgm(path, as_mask(mask) * np.uint8(255))


def read_image(path: str | os.PathLike) -> np.ndarray:
    return read_pgm(path).astype(np.float32) / 255.0


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Quantize a [0, 1] intensity grid to 8 bits."""
    q = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    write_pgm(path, q.astype(np.uint8))


# ---------------------------------------------------------------------------
# labels and manifests

@dataclass
class LabelRecord:
    sample_id: str
    mask: np.ndarray
    quality: Quality
    source: LabelSource = LabelSource.ANNOTATOR
    corrected_at_epochs: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.mask = as_mask(self.mask)
        self.quality = Quality(self.quality)
        self.source = LabelSource(self.source)
        if self.quality is Quality.HQ and self.corrected_at_epochs:
            raise ValidationError(f"{self.sample_id}: HQ labels carry no correction history")

    def rewrite(self, mask: np.ndarray, epoch: int) -> None:
        if self.quality is Quality.HQ:
            raise ValidationError(f"{self.sample_id}: refusing to rewrite an HQ label")
        mask = as_mask(mask)
        if mask.shape != self.mask.shape:
            raise ValidationError(f"{self.sample_id}: corrected mask shape {mask.shape} != {self.mask.shape}")
        self.mask = mask
        self.source = LabelSource.GLOBAL_CORRECTION
        self.corrected_at_epochs.append(int(epoch))

    def copy(self) -> LabelRecord:
        return LabelRecord(self.sample_id, self.mask.copy(), self.quality, self.source,
                           list(self.corrected_at_epochs))


@dataclass
class ManifestEntry:
    id: str
    images: list[str]
    label: str | None = None
    quality: Quality = Quality.LQ
    truth: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"id": self.id, "images": list(self.images), "label": self.label,
                               "quality": Quality(self.quality).value}
        if self.truth is not None:
            out["truth"] = self.truth
        return out


@dataclass
class DatasetManifest:
    """A split of samples; file paths are relative to ``root``."""

    samples: list[ManifestEntry]
    split: str = "train"
    root: Path = field(default_factory=Path)

    def to_dict(self) -> dict[str, Any]:
        return {"samples": [s.to_dict() for s in self.samples], "split": self.split}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps())

    def resolve(self, rel: str) -> Path:
        return self.root / rel


MANIFEST_NAME = "manifest.json"


def _manifest_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    return p / MANIFEST_NAME if p.is_dir() else p


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    """Parse and validate a manifest file (or a directory holding ``manifest.json``)."""
    mpath = _manifest_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"manifest not found: {mpath}")
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{mpath}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("samples"), list):
        raise ValidationError(f"{mpath}: expected an object with a 'samples' list")
    split = doc.get("split", "train")
    if split not in ("train", "test"):
        raise ValidationError(f"{mpath}: split must be 'train' or 'test', got {split!r}")

    root = mpath.parent
    seen: set[str] = set()
    entries = []
    for raw in doc["samples"]:
        try:
            entry = ManifestEntry(id=str(raw["id"]), images=list(raw["images"]), label=raw.get("label"),
                                  quality=Quality(raw.get("quality", "LQ")), truth=raw.get("truth"))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{mpath}: malformed sample entry {raw!r}") from exc
        if entry.id in seen:
            raise ValidationError(f"{mpath}: duplicate sample id {entry.id!r}")
        seen.add(entry.id)
        if not entry.images:
            raise ValidationError(f"{mpath}: sample {entry.id!r} lists no images")

        shape = None
        for rel in [*entry.images, entry.label, entry.truth]:
            if rel is None:
                continue
            fp = root / rel
            if not fp.exists():
                raise FileNotFoundError(f"{mpath}: sample {entry.id!r} references missing file {fp}")
            dims = read_pgm_header(fp)
            if shape is None:
                shape = dims
            elif dims != shape:
                raise ValidationError(
                    f"{mpath}: sample {entry.id!r} dimension mismatch ({rel} is {dims[0]}x{dims[1]}, "
                    f"expected {shape[0]}x{shape[1]})")
        entries.append(entry)
    return DatasetManifest(entries, split, root)


@dataclass
class Sample:
    """A loaded sample. ``truth`` is only ever read by evaluation code."""

    id: str
    image: np.ndarray              # (M, H, W) float32 in [0, 1]
    label: LabelRecord | None
    truth: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def load_samples(manifest: DatasetManifest, with_truth: bool = False) -> list[Sample]:
    out = []
    for e in manifest.samples:
        image = np.stack([read_image(manifest.resolve(p)) for p in e.images])
        label = None
        if e.label is not None:
            label = LabelRecord(e.id, read_mask(manifest.resolve(e.label)), e.quality)
        truth = read_mask(manifest.resolve(e.truth)) if with_truth and e.truth else None
        out.append(Sample(e.id, image, label, truth))
    return out


def load_split(path: str | os.PathLike, with_truth: bool = False) -> list[Sample]:
    return load_samples(load_manifest(path), with_truth=with_truth)


def save_samples(out_dir: str | os.PathLike, samples: list[Sample], split: str = "train",
                 truth_dir: str | os.PathLike | None = None) -> DatasetManifest:
    """Write samples in the directory-per-sample PGM layout plus a manifest.

    Truth masks, when present and ``truth_dir`` is given, go to that sidecar
    directory (referenced from the manifest) rather than next to the label.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        sdir = out / s.id
        sdir.mkdir(exist_ok=True)
        images = []
        for m in range(s.image.shape[0]):
            write_image(sdir / f"image_{m}.pgm", s.image[m])
            images.append(f"{s.id}/image_{m}.pgm")
        label = None
        quality = Quality.LQ
        if s.label is not None:
            write_mask(sdir / "label.pgm", s.label.mask)
            label = f"{s.id}/label.pgm"
            quality = s.label.quality
        truth = None
        if s.truth is not None and truth_dir is not None:
            tdir = Path(truth_dir)
            tdir.mkdir(parents=True, exist_ok=True)
            write_mask(tdir / f"{s.id}.pgm", s.truth)
            truth = os.path.relpath(tdir / f"{s.id}.pgm", out)
        entries.append(ManifestEntry(s.id, images, label, quality, truth))
    manifest = DatasetManifest(entries, split, out)
    manifest.save(out / MANIFEST_NAME)
    return manifest


# ---------------------------------------------------------------------------
# configuration

@dataclass
class ArchConfig:
    base_channels: int = 16
    growth: int = 2
    depth: int = 5
    modalities: int = 1

    def __post_init__(self):
        if self.base_channels < 1 or self.growth < 1 or self.depth < 1 or self.modalities < 1:
            raise ValidationError(f"invalid architecture {self}")

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.depth - 1)


TASK_MODES = ("SSL", "UDA", "NLL")
SHARPEN_FORMS = ("softmax", "power")
OPTIMIZERS = ("sgd", "adam")
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class TrainConfig:
    # field names follow the algorithm's symbols so config files read like its input list
    seed: int = 0
    Q: int = 40
    q_w: int = 20
    B: int = 8
    lr: float = 0.01
    K: int = 2
    T: float = 0.5
    lambda_max: float = 1.0
    alpha: float = 1.0
    epsilon: float = 1.0
    R: float = 0.25
    select_fraction: float = 0.5
    update_period: int = 10
    arch: ArchConfig = field(default_factory=ArchConfig)
    task_mode: str = "NLL"
    sharpen_form: str = "softmax"
    optimizer: str = "sgd"
    lr_schedule: str = "constant"
    pretrain_epochs: int = 30
    spacing: tuple[float, float] = (1.0, 1.0)
    ensemble: bool = False

    def __post_init__(self):
        if isinstance(self.arch, dict):
            self.arch = ArchConfig(**self.arch)
        self.spacing = tuple(float(s) for s in self.spacing)
        problems = []
        if not 0 < self.select_fraction <= 1:
            problems.append("select_fraction must be in (0, 1]")
        if not 0 < self.R < 1:
            problems.append("R must be in (0, 1)")
        if not 0 < self.q_w <= self.Q:
            problems.append("q_w must satisfy 0 < q_w <= Q")
        if self.T <= 0:
            problems.append("T must be positive")
        if self.B < 1 or self.K < 1:
            problems.append("B and K must be >= 1")
        if self.epsilon <= 0:
            problems.append("epsilon must be positive")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if self.update_period < 1:
            problems.append("update_period must be >= 1")
        if self.task_mode not in TASK_MODES:
            problems.append(f"task_mode must be one of {TASK_MODES}")
        if self.sharpen_form not in SHARPEN_FORMS:
            problems.append(f"sharpen_form must be one of {SHARPEN_FORMS}")
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr_schedule not in LR_SCHEDULES:
            problems.append(f"lr_schedule must be one of {LR_SCHEDULES}")
        if len(self.spacing) != 2 or min(self.spacing) <= 0:
            problems.append("spacing must be two positive numbers")
        if problems:
            raise ValidationError("; ".join(problems))

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["spacing"] = list(self.spacing)
        return d

    def replace(self, **overrides) -> TrainConfig:
        d = self.to_dict()
        arch = overrides.pop("arch", None)
        if arch:
            d["arch"] = {**d["arch"], **(arch if isinstance(arch, dict) else dataclasses.asdict(arch))}
        unknown = set(overrides) - set(d)
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        d.update(overrides)
        return TrainConfig.from_dict(d)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> TrainConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValidationError(f"unknown config fields: {sorted(unknown)}")
        doc = dict(doc)
        if "arch" in doc:
            arch = doc["arch"]
            arch_names = {f.name for f in dataclasses.fields(ArchConfig)}
            if not isinstance(arch, dict) or set(arch) - arch_names:
                raise ValidationError(f"invalid arch block {arch!r}")
            doc["arch"] = ArchConfig(**arch)
        return cls(**doc)


def load_config(path: str | os.PathLike) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    return TrainConfig.from_dict(doc)


def save_config(config: TrainConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# randomness

class SeededRng:
    """Deterministic random stream that can be split into named sub-streams.

    A child stream depends only on the root seed and the path of names used
    to reach it, never on how many draws other streams have made.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = path
        key = [int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little") for name in path]
        self._seq = np.random.SeedSequence(self.seed, spawn_key=key)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, name: str) -> SeededRng:
        return SeededRng(self.seed, self.path + (str(name),))

    def int_seed(self) -> int:
        """A 63-bit integer derived from this stream's identity (for torch generators)."""
        return int(self._seq.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 2**31], dtype=np.uint64))

    # thin delegation for the common draws
    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)


def seeded_rng(seed: int) -> SeededRng:
    return SeededRng(seed)


# ---------------------------------------------------------------------------
# reports

METRIC_COLUMNS = ("epoch", "model_id", "split", "dsc", "ravd", "assd", "mssd", "lambda_q",
                  "n_labels_corrected", "train_label_dsc_vs_truth")


@dataclass
class MetricsRow:
    epoch: int
    model_id: str
    split: str
    dsc: float
    ravd: float
    assd: float
    mssd: float
    lambda_q: float
    n_labels_corrected: int
    train_label_dsc_vs_truth: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.dsc <= 1.0:
            raise ValidationError(f"dsc out of range: {self.dsc}")
        for name in ("assd", "mssd"):
            v = getattr(self, name)
            if v == v and v < 0:  # NaN marks "undefined"
                raise ValidationError(f"{name} must be non-negative, got {v}")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if v != v else repr(round(v, 10))
    return str(v)


@dataclass
class MetricsReport:
    rows: list[MetricsRow] = field(default_factory=list)

    def add(self, **kw) -> None:
        self.rows.append(MetricsRow(**kw))

    def to_csv(self) -> str:
        lines = [",".join(METRIC_COLUMNS)]
        for r in self.rows:
            lines.append(",".join(_fmt(getattr(r, c)) for c in METRIC_COLUMNS))
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_csv())

    def select(self, model_id: str | None = None, split: str | None = None) -> list[MetricsRow]:
        return [r for r in self.rows
                if (model_id is None or r.model_id == model_id) and (split is None or r.split == split)]

    @classmethod
    def load(cls, path: str | os.PathLike) -> MetricsReport:
        import csv

        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != METRIC_COLUMNS:
                raise ValidationError(f"{path}: unexpected metrics columns {reader.fieldnames}")
            rows = []
            for rec in reader:
                truth = rec["train_label_dsc_vs_truth"]
                rows.append(MetricsRow(
                    int(rec["epoch"]), rec["model_id"], rec["split"], float(rec["dsc"]), float(rec["ravd"]),
                    float(rec["assd"]), float(rec["mssd"]), float(rec["lambda_q"]),
                    int(rec["n_labels_corrected"]), float(truth) if truth else None))
        return cls(rows)
