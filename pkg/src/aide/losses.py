"""Segmentation and consistency objectives plus temperature sharpening.

All losses take foreground probabilities shaped ``(B, H, W)`` (a bare
``(H, W)`` grid is treated as a batch of one) and return a :class:`LossValue`
whose ``per_sample`` entries are the per-image losses used for small-loss
selection.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

CE_CLIP = 1e-7


class LossValue(NamedTuple):
    scalar: torch.Tensor
    per_sample: torch.Tensor


def _batched(*tensors):
    out = []
    for t in tensors:
        t = torch.as_tensor(t)
        if t.dim() == 2:
            t = t.unsqueeze(0)
        out.append(t)
    shapes = {tuple(t.shape) for t in out}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {[tuple(t.shape) for t in out]}")
    return out


def _reduce(per_sample: torch.Tensor) -> LossValue:
    return LossValue(per_sample.mean(), per_sample)


def dice_loss(pred_fg, ref, epsilon: float = 1.0) -> LossValue:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    pred_fg, ref = _batched(pred_fg, ref)
    ref = ref.to(pred_fg.dtype)
    inter = (pred_fg * ref).flatten(1).sum(1)
    total = pred_fg.flatten(1).sum(1) + ref.flatten(1).sum(1)
    return _reduce(1.0 - (2.0 * inter + epsilon) / (total + epsilon))


def cross_entropy_loss(pred_fg, ref) -> LossValue:
    pred_fg, ref = _batched(pred_fg, ref)
    ref = ref.to(pred_fg.dtype)
    p = pred_fg.clamp(CE_CLIP, 1.0 - CE_CLIP)
    ll = ref * torch.log(p) + (1.0 - ref) * torch.log1p(-p)
    return _reduce(-ll.flatten(1).mean(1))


def _foreground(pred):
    pred = torch.as_tensor(pred)
    # (B, 2, H, W) or (2, H, W) probability maps -> foreground channel
    if pred.dim() == 4 and pred.shape[1] == 2:
        return pred[:, 1]
    if pred.dim() == 3 and pred.shape[0] == 2:
        return pred[1]
    raise ValueError(f"expected a probability map with 2 channels, got shape {tuple(pred.shape)}")


def seg_loss(pred, ref, alpha: float = 1.0, epsilon: float = 1.0) -> LossValue:
    """Dice + alpha * cross-entropy on the foreground channel of ``pred``."""
    fg = _foreground(pred)
    d = dice_loss(fg, ref, epsilon).per_sample
    if alpha == 0:
        return _reduce(d)
    return _reduce(d + alpha * cross_entropy_loss(fg, ref).per_sample)


def consistency_loss(pred, pseudo) -> LossValue:
    """(1 / 2N) * sum of squared foreground differences, per image."""
    a, b = _batched(_foreground(pred), _foreground(pseudo))
    return _reduce(0.5 * ((a - b) ** 2).flatten(1).mean(1))


def sharpen(prob, T: float, form: str = "softmax"):
    """Temperature-sharpen a probability map over its channel axis.

    ``softmax``: exp(p / T) normalised over channels.
    ``power``:   p ** (1 / T) normalised over channels.
    The channel axis is 0 for ``(C, H, W)`` input and 1 for ``(B, C, H, W)``.
    """
    if T <= 0:
        raise ValueError("sharpening temperature must be positive")
    prob = torch.as_tensor(prob)
    dim = 1 if prob.dim() == 4 else 0
    if form == "softmax":
        return torch.softmax(prob / T, dim=dim)
    if form == "power":
        # log-domain keeps tiny T from underflowing every channel to zero
        return torch.softmax(torch.log(prob.clamp_min(1e-30)) / T, dim=dim)
    raise ValueError(f"unknown sharpen form {form!r}")
