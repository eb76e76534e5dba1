"""Cross-model self-correcting training of two segmentation networks.

Each iteration both networks score the batch against their own label maps,
pick their small-loss halves, and hand those picks to the other network:
approved samples get the full segmentation loss, the rest are trained
towards the network's own augmentation-distilled pseudo-labels with a
weight that ramps up over the warm-up epochs.  Between epochs each network
re-ranks the whole training set and its lowest-Dice non-HQ samples get their
labels in the *other* network's map replaced by its binarized prediction.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import stats

from . import metrics
from .augment import distill_pseudo_label, sample_transform
from .core import (LabelRecord, MetricsReport, Quality, Sample, SeededRng, TrainConfig, ValidationError)
from .losses import consistency_loss, seg_loss
from .network import SegNet, build_network, gradient_step, make_optimizer, make_scheduler, predict

log = logging.getLogger(__name__)

MODEL_IDS = ("N1", "N2")


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule and selection

def lambda_schedule(q: int, q_w: int, lambda_max: float = 1.0) -> float:
    if q < 0 or q_w <= 0:
        raise ValueError("need q >= 0 and q_w > 0")
    return min(lambda_max * (q / q_w) ** 2, lambda_max)


def update_criterion(q: int, q_w: int, period: int = 10) -> bool:
    """Relabel every epoch during warm-up, then every ``period`` epochs."""
    if period <= 0:
        raise ValueError("period must be positive")
    return q < q_w or (q - q_w) % period == 0


def select_small_loss(per_sample_losses, fraction: float) -> list[int]:
    """Indices of the floor(fraction * B) smallest losses (at least one), sorted.

    Equal losses are taken in index order.
    """
    losses = np.asarray(torch.as_tensor(per_sample_losses).detach().cpu(), dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise ValueError("need a non-empty list of losses")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must be in (0, 1]")
    n = max(1, math.floor(fraction * losses.size))
    order = np.argsort(losses, kind="stable")
    return sorted(order[:n].tolist())


def _complement(idx: Sequence[int], n: int) -> list[int]:
    chosen = set(idx)
    return [i for i in range(n) if i not in chosen]


# ---------------------------------------------------------------------------
# data held by the trainer

@dataclass
class TrainingSet:
    """Stacked images plus one mutable label map per network.

    Ground truth is deliberately absent; evaluation against it goes through a
    :class:`Monitor`.
    """

    ids: list[str]
    images: np.ndarray                     # (N, M, H, W) float32
    labels: tuple[list[LabelRecord], list[LabelRecord]]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> TrainingSet:
        if not samples:
            raise ValidationError("training set is empty")
        missing = [s.id for s in samples if s.label is None]
        if missing:
            raise ValidationError(f"unlabeled training samples: {missing[:5]}")
        images = np.stack([s.image for s in samples]).astype(np.float32)
        first = [s.label.copy() for s in samples]
        second = [s.label.copy() for s in samples]
        return cls([s.id for s in samples], images, (first, second))

    def __len__(self):
        return len(self.ids)

    def label_stack(self, m: int) -> np.ndarray:
        return np.stack([r.mask for r in self.labels[m]])

    def hq(self) -> np.ndarray:
        return np.array([r.quality is Quality.HQ for r in self.labels[0]])


@dataclass
class Monitor:
    """Evaluation-only view: training-set truth and a held-out test split."""

    train_truth: dict[str, np.ndarray] = field(default_factory=dict)
    test_images: np.ndarray | None = None
    test_masks: np.ndarray | None = None
    spacing: tuple[float, float] = (1.0, 1.0)
    pp: bool = False

    @classmethod
    def from_samples(cls, train: Sequence[Sample] = (), test: Sequence[Sample] = (), **kw) -> Monitor:
        truth = {s.id: s.truth for s in train if s.truth is not None}
        images = np.stack([s.image for s in test]).astype(np.float32) if test else None
        masks = np.stack([s.label.mask for s in test]) if test else None
        return cls(truth, images, masks, **kw)

    def label_dsc_vs_truth(self, ids: Sequence[str], masks: Sequence[np.ndarray]) -> float | None:
        pairs = [(m, self.train_truth[i]) for i, m in zip(ids, masks) if i in self.train_truth]
        if not pairs:
            return None
        return float(np.mean([metrics.dsc(m, t) for m, t in pairs]))

    def test_scores(self, model: SegNet) -> dict[str, float] | None:
        if self.test_images is None:
            return None
        preds = binarize_batch(predict(model, self.test_images))
        return metrics.summarize(preds, self.test_masks, self.spacing, pp=self.pp)


def binarize_batch(prob: np.ndarray) -> np.ndarray:
    return (prob[:, 1] > prob[:, 0]).astype(np.uint8)


# ---------------------------------------------------------------------------
# trainer state and one iteration

@dataclass
class TrainerState:
    config: TrainConfig
    models: tuple[SegNet, SegNet]
    optimizers: tuple[torch.optim.Optimizer, torch.optim.Optimizer]
    schedulers: tuple
    data: TrainingSet
    aug_rng: SeededRng
    epoch: int = 0
    lambda_q: float = 0.0
    best_epoch: int = 0
    best_dsc_train: float = -math.inf
    best_states: tuple[dict, dict] | None = None
    loss_trace: list[tuple[float, float]] = field(default_factory=list)


def init_state(config: TrainConfig, data: TrainingSet, init_seeds: tuple[int, int] | None = None) -> TrainerState:
    root = SeededRng(config.seed)
    if init_seeds is None:
        init_seeds = (root.split("N1").int_seed(), root.split("N2").int_seed())
    h, w = data.images.shape[2:]
    if data.images.shape[1] != config.arch.modalities:
        raise ValidationError(f"config expects {config.arch.modalities} modalities, data has {data.images.shape[1]}")
    models = tuple(build_network(config.arch, s, (h, w)) for s in init_seeds)
    opts = tuple(make_optimizer(m, config) for m in models)
    scheds = tuple(make_scheduler(o, config) for o in opts)
    return TrainerState(config, models, opts, scheds, data, root.split("augment"))


def _batch_losses(model: SegNet, x: torch.Tensor, y: torch.Tensor, config: TrainConfig):
    model.train()
    prob = model(x)
    return prob, seg_loss(prob, y, config.alpha, config.epsilon).per_sample


def iteration_step(state: TrainerState, batch: Sequence[int]) -> tuple[float, float]:
    """One co-training update on the samples at ``batch``; returns (L1, L2)."""
    cfg = state.config
    data = state.data
    idx = list(batch)
    x = torch.from_numpy(data.images[idx])
    ys = [torch.from_numpy(np.stack([data.labels[m][i].mask for i in idx])).float() for m in (0, 1)]
    lam = state.lambda_q

    probs, seg = [], []
    for m in (0, 1):
        p, s = _batch_losses(state.models[m], x, ys[m], cfg)
        probs.append(p)
        seg.append(s)
    selected = [select_small_loss(s.detach(), cfg.select_fraction) for s in seg]
    transforms = [sample_transform(state.aug_rng) for _ in range(cfg.K)]

    losses = []
    for m in (0, 1):
        other = 1 - m
        approved = selected[other]
        suspected = _complement(approved, len(idx))
        loss = seg[m][approved].mean()
        if suspected:
            loss = loss + (1.0 - lam) * seg[m][suspected].mean()
            if lam > 0:
                pseudo = distill_pseudo_label(state.models[m], x[suspected], cfg.K, cfg.T,
                                              form=cfg.sharpen_form, transforms=transforms)
                loss = loss + lam * consistency_loss(probs[m][suspected], pseudo).scalar
        if not torch.isfinite(loss):
            raise TrainingAborted(f"non-finite loss for {MODEL_IDS[m]} at epoch {state.epoch + 1} "
                                  f"(batch {idx[:8]}, lambda_q={lam})")
        losses.append(loss)

    # both losses come from pre-update parameters; the networks share nothing,
    # so stepping them one after the other is a simultaneous update
    for m in (0, 1):
        gradient_step(state.models[m], lambda: losses[m], optimizer=state.optimizers[m])
    out = (float(losses[0].detach()), float(losses[1].detach()))
    state.loss_trace.append(out)
    return out


# ---------------------------------------------------------------------------
# epoch-level steps

def predict_training_set(state: TrainerState) -> tuple[np.ndarray, np.ndarray]:
    return tuple(binarize_batch(predict(m, state.data.images)) for m in state.models)


def global_label_correction(state: TrainerState, preds: tuple[np.ndarray, np.ndarray] | None = None,
                            epoch: int | None = None) -> int:
    """Cross-assign binarized predictions to the lowest-Dice non-HQ samples.

    Each network ranks the training set by the Dice between its prediction
    and its own label map; for the ``floor(R * |D|)`` worst-ranked samples
    that are not HQ, the other network's label is replaced by this network's
    prediction.  Returns the number of labels rewritten.
    """
    cfg = state.config
    data = state.data
    epoch = state.epoch if epoch is None else epoch
    if preds is None:
        preds = predict_training_set(state)
    n_sel = max(1, math.floor(cfg.R * len(data)))
    ranked = []
    for m in (0, 1):
        scores = metrics.dsc_batch(preds[m], data.label_stack(m))
        ranked.append(np.argsort(scores, kind="stable")[:n_sel])
    corrected = 0
    for m in (0, 1):
        target = data.labels[1 - m]
        for i in ranked[m]:
            if target[i].quality is Quality.HQ:
                continue
            target[i].rewrite(preds[m][i], epoch)
            corrected += 1
    return corrected


def memorization_probe(model, samples: Sequence[Sample]) -> list[tuple[float, float]]:
    """Per-sample (DSC of prediction vs label, DSC of label vs truth).

    ``model`` may also be a callable returning binary masks for a (N, M, H, W)
    image stack.
    """
    if any(s.truth is None for s in samples):
        raise ValidationError("memorization probe needs ground truth for every sample")
    if any(s.label is None for s in samples):
        raise ValidationError("memorization probe needs a label for every sample")
    images = np.stack([s.image for s in samples]).astype(np.float32)
    preds = binarize_batch(predict(model, images)) if isinstance(model, SegNet) else np.asarray(model(images))
    return [(metrics.dsc(p, s.label.mask), metrics.dsc(s.label.mask, s.truth)) for p, s in zip(preds, samples)]


def spearman(pairs: Sequence[tuple[float, float]]) -> float:
    a, b = zip(*pairs)
    return float(stats.spearmanr(a, b).statistic)


# ---------------------------------------------------------------------------
# the full run

@dataclass
class TrainResult:
    models: tuple[SegNet, SegNet]
    best_epoch: int
    report: MetricsReport
    labels: tuple[list[LabelRecord], list[LabelRecord]]
    loss_trace: list[tuple[float, float]]
    dsc_train: list[float]


def _train_row(report, epoch, model_id, pred, labels, lam, n_corr, truth_dsc, spacing):
    s = metrics.summarize(pred, labels, spacing)
    report.add(epoch=epoch, model_id=model_id, split="train", lambda_q=lam, n_labels_corrected=n_corr,
               train_label_dsc_vs_truth=truth_dsc, **s)


def _test_row(report, epoch, model_id, scores, lam, n_corr):
    report.add(epoch=epoch, model_id=model_id, split="test", lambda_q=lam, n_labels_corrected=n_corr,
               train_label_dsc_vs_truth=None, **scores)


def train(config: TrainConfig, samples: Sequence[Sample], monitor: Monitor | None = None,
          init_seeds: tuple[int, int] | None = None,
          on_epoch: Callable[[TrainerState], None] | None = None) -> TrainResult:
    """Run the full two-network schedule and return the best checkpoint pair.

    Ground truth on ``samples`` is ignored; pass it through ``monitor`` to get
    label-vs-truth and test-split rows in the report.
    """
    data = TrainingSet.from_samples(samples)
    state = init_state(config, data, init_seeds)
    shuffle_rng = SeededRng(config.seed).split("shuffle")
    monitor = monitor or Monitor(spacing=config.spacing)
    report = MetricsReport()
    dsc_history = []
    hq = data.hq()

    for q in range(1, config.Q + 1):
        state.epoch = q
        order = shuffle_rng.permutation(len(data))
        for start in range(0, len(data), config.B):
            iteration_step(state, order[start : start + config.B].tolist())
        for sched in state.schedulers:
            if sched is not None:
                sched.step()
        lam_used = state.lambda_q
        state.lambda_q = lambda_schedule(q, config.q_w, config.lambda_max)

        preds = predict_training_set(state)
        n_corr = global_label_correction(state, preds, q) if update_criterion(q, config.q_w, config.update_period) else 0

        per_model = [float(metrics.dsc_batch(preds[m], data.label_stack(m)).mean()) for m in (0, 1)]
        dsc_train = float(np.mean(per_model))
        dsc_history.append(dsc_train)
        if dsc_train > state.best_dsc_train:
            state.best_dsc_train = dsc_train
            state.best_epoch = q
            state.best_states = tuple(copy.deepcopy(m.state_dict()) for m in state.models)

        for m, mid in enumerate(MODEL_IDS):
            truth_dsc = monitor.label_dsc_vs_truth(data.ids, [r.mask for r in data.labels[m]])
            _train_row(report, q, mid, preds[m], data.label_stack(m), lam_used, n_corr, truth_dsc, config.spacing)
            scores = monitor.test_scores(state.models[m])
            if scores is not None:
                _test_row(report, q, mid, scores, lam_used, n_corr)
        log.info("epoch %d/%d  loss=(%.4f, %.4f)  dsc_train=%.4f  corrected=%d  lambda=%.3f", q, config.Q,
                 *np.mean(state.loss_trace[-math.ceil(len(data) / config.B):], axis=0), dsc_train, n_corr,
                 state.lambda_q)
        if on_epoch is not None:
            on_epoch(state)

    for m in (0, 1):
        rewritten = [r.sample_id for r, is_hq in zip(data.labels[m], hq) if is_hq and r.corrected_at_epochs]
        assert not rewritten, f"HQ labels were rewritten: {rewritten}"

    best = []
    for m in (0, 1):
        model = build_network(config.arch, 0)
        model.load_state_dict(state.best_states[m])
        best.append(model)
    return TrainResult(tuple(best), state.best_epoch, report, data.labels, state.loss_trace, dsc_history)


# ---------------------------------------------------------------------------
# single-network supervised training (baselines, pretraining)

@dataclass
class SupervisedResult:
    model: SegNet
    report: MetricsReport
    labels: list[LabelRecord]


def train_supervised(config: TrainConfig, samples: Sequence[Sample], epochs: int | None = None,
                     monitor: Monitor | None = None, relabel_lq: bool = False,
                     on_epoch: Callable[[int, SegNet], None] | None = None) -> SupervisedResult:
    """Minimize the segmentation loss alone on whatever labels ``samples`` carry.

    With ``relabel_lq`` every LQ label is replaced by the network's current
    binarized prediction after each epoch (the plain pseudo-label scheme).
    The final-epoch network is returned.
    """
    data = TrainingSet.from_samples(samples)
    labels = data.labels[0]
    epochs = config.Q if epochs is None else epochs
    root = SeededRng(config.seed)
    h, w = data.images.shape[2:]
    model = build_network(config.arch, root.split("N1").int_seed(), (h, w))
    opt = make_optimizer(model, config)
    sched = make_scheduler(opt, config, epochs)
    shuffle_rng = root.split("shuffle")
    monitor = monitor or Monitor(spacing=config.spacing)
    report = MetricsReport()
    lq = [i for i, r in enumerate(labels) if r.quality is Quality.LQ]

    for q in range(1, epochs + 1):
        order = shuffle_rng.permutation(len(data))
        for start in range(0, len(data), config.B):
            idx = order[start : start + config.B].tolist()
            x = torch.from_numpy(data.images[idx])
            y = torch.from_numpy(np.stack([labels[i].mask for i in idx])).float()

            def closure():
                model.train()
                loss = seg_loss(model(x), y, config.alpha, config.epsilon).scalar
                if not torch.isfinite(loss):
                    raise TrainingAborted(f"non-finite loss at epoch {q}")
                return loss

            gradient_step(model, closure, optimizer=opt)
        if sched is not None:
            sched.step()
        preds = binarize_batch(predict(model, data.images))
        n_corr = 0
        if relabel_lq:
            for i in lq:
                labels[i].rewrite(preds[i], q)
            n_corr = len(lq)
        truth_dsc = monitor.label_dsc_vs_truth(data.ids, [r.mask for r in labels])
        _train_row(report, q, "N1", preds, np.stack([r.mask for r in labels]), 0.0, n_corr, truth_dsc,
                   config.spacing)
        scores = monitor.test_scores(model)
        if scores is not None:
            _test_row(report, q, "N1", scores, 0.0, n_corr)
        if on_epoch is not None:
            on_epoch(q, model)
    return SupervisedResult(model, report, labels)
