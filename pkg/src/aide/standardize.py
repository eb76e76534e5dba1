"""Turn semi-supervised and domain-adaptation data into a noisy-label training set.

A network is pretrained on whatever is labeled (the few annotated samples,
or the source domain), its binarized predictions become LQ labels for the
unlabeled samples, and the union is what the co-training loop consumes.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .core import LabelRecord, LabelSource, Quality, Sample, TrainConfig, ValidationError
from .network import SegNet, predict
from .trainer import binarize_batch, train_supervised

log = logging.getLogger(__name__)


def pretrain_baseline(labeled: Sequence[Sample], config: TrainConfig, epochs: int | None = None) -> SegNet:
    if not labeled:
        raise ValidationError("pretraining needs at least one labeled sample")
    epochs = config.pretrain_epochs if epochs is None else epochs
    log.info("pretraining on %d labeled samples for %d epochs", len(labeled), epochs)
    return train_supervised(config, labeled, epochs=epochs).model


def generate_lq_labels(model, unlabeled: Sequence[Sample]) -> list[Sample]:
    """Label every sample with the model's argmax prediction, flagged LQ.

    ``model`` may be a :class:`SegNet` or a callable mapping a (N, M, H, W)
    image stack to binary masks.  Inputs are not modified.
    """
    if not unlabeled:
        return []
    images = np.stack([s.image for s in unlabeled]).astype(np.float32)
    masks = binarize_batch(predict(model, images)) if isinstance(model, SegNet) else np.asarray(model(images))
    return [Sample(s.id, s.image, LabelRecord(s.id, m, Quality.LQ, LabelSource.PRETRAIN_PSEUDOLABEL), s.truth)
            for s, m in zip(unlabeled, masks)]


def build_nll_dataset(hq: Sequence[Sample], lq: Sequence[Sample]) -> list[Sample]:
    ids = [s.id for s in hq] + [s.id for s in lq]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"sample id collision between labeled and pseudo-labeled sets: {dup[:5]}")
    for s in hq:
        if s.label is None or s.label.quality is not Quality.HQ:
            raise ValidationError(f"{s.id}: expected an HQ label")
    for s in lq:
        if s.label is None or s.label.quality is not Quality.LQ:
            raise ValidationError(f"{s.id}: expected an LQ label")
    return [*hq, *lq]


def standardize(mode: str, labeled: Sequence[Sample], unlabeled: Sequence[Sample],
                config: TrainConfig) -> tuple[list[Sample], SegNet]:
    """Pretrain on ``labeled`` and pseudo-label ``unlabeled``.

    ``mode`` only names where the labeled set comes from (the same domain for
    SSL, the source domain for UDA); the procedure is identical.
    """
    if mode.upper() not in ("SSL", "UDA"):
        raise ValidationError(f"mode must be 'ssl' or 'uda', got {mode!r}")
    hq = []
    for s in labeled:
        if s.label is None:
            raise ValidationError(f"{s.id}: labeled set contains an unlabeled sample")
        hq.append(s if s.label.quality is Quality.HQ else
                  Sample(s.id, s.image, LabelRecord(s.id, s.label.mask, Quality.HQ), s.truth))
    model = pretrain_baseline(hq, config)
    return build_nll_dataset(hq, generate_lq_labels(model, unlabeled)), model
