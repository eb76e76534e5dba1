"""Lossless dihedral augmentation and augmentation-averaged pseudo-labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .core import SeededRng
from .losses import sharpen


@dataclass(frozen=True)
class TransformDescriptor:
    """``rotation`` quarter turns applied after the optional flips.

    The map is ``x -> rot90(vflip?(hflip?(x)), rotation)`` on the last two
    axes.  Sixteen descriptors name the eight elements of D4; equality and
    hashing use the canonical form.
    """

    rotation: int = 0
    hflip: bool = False
    vflip: bool = False

    def canonical(self) -> tuple[int, bool]:
        # vflip == rot180 . hflip, so (k, h, True) ~ (k + 2, not h, False)
        k, h = self.rotation % 4, bool(self.hflip)
        if self.vflip:
            k, h = (k + 2) % 4, not h
        return k, h

    def __eq__(self, other):
        if not isinstance(other, TransformDescriptor):
            return NotImplemented
        return self.canonical() == other.canonical()

    def __hash__(self):
        return hash(self.canonical())

    @property
    def is_identity(self) -> bool:
        return self.canonical() == (0, False)

    def compose(self, other: TransformDescriptor) -> TransformDescriptor:
        """The transform equivalent to applying ``other`` first, then ``self``."""
        ka, ha = self.canonical()
        kb, hb = other.canonical()
        k = (ka + (-kb if ha else kb)) % 4
        return TransformDescriptor(k, ha != hb)

    def inverse(self) -> TransformDescriptor:
        k, h = self.canonical()
        return TransformDescriptor(k, True) if h else TransformDescriptor(-k % 4, False)


IDENTITY = TransformDescriptor()
DIHEDRAL_GROUP = tuple(TransformDescriptor(k, h) for h in (False, True) for k in range(4))


def sample_transform(rng: SeededRng | np.random.Generator) -> TransformDescriptor:
    """Uniform draw over the 16 (rotation, hflip, vflip) combinations."""
    gen = rng.generator if isinstance(rng, SeededRng) else rng
    code = int(gen.integers(0, 16))
    return TransformDescriptor(code % 4, bool(code & 4), bool(code & 8))


def apply(t: TransformDescriptor, grid):
    """Apply ``t`` to the last two axes of a numpy array or torch tensor."""
    if torch.is_tensor(grid):
        if t.hflip:
            grid = torch.flip(grid, dims=(-1,))
        if t.vflip:
            grid = torch.flip(grid, dims=(-2,))
        return torch.rot90(grid, t.rotation % 4, dims=(-2, -1))
    grid = np.asarray(grid)
    if t.hflip:
        grid = np.flip(grid, axis=-1)
    if t.vflip:
        grid = np.flip(grid, axis=-2)
    return np.ascontiguousarray(np.rot90(grid, t.rotation % 4, axes=(-2, -1)))


def _as_predictor(model) -> Callable[[torch.Tensor], torch.Tensor]:
    from .network import SegNet, forward

    if isinstance(model, SegNet):
        return lambda x: forward(model, x)
    return model


def distill_pseudo_label(model, images, K: int, T: float, rng: SeededRng | np.random.Generator | None = None,
                         form: str = "softmax",
                         transforms: Sequence[TransformDescriptor] | None = None) -> torch.Tensor:
    """Average the model's predictions over K augmented copies, then sharpen.

    Each prediction is mapped back to the original pixel frame before
    averaging.  ``model`` is a :class:`SegNet` (run in evaluation mode) or
    any callable from a (B, M, H, W) tensor to (B, 2, H, W) probabilities.
    One transform is drawn per augmentation and shared across the batch.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if transforms is None:
        if rng is None:
            raise ValueError("either rng or explicit transforms are required")
        transforms = [sample_transform(rng) for _ in range(K)]
    elif len(transforms) != K:
        raise ValueError(f"expected {K} transforms, got {len(transforms)}")
    x = torch.as_tensor(images, dtype=torch.float32)
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    predict = _as_predictor(model)
    total = None
    with torch.no_grad():
        for t in transforms:
            out = apply(t.inverse(), predict(apply(t, x)))
            total = out if total is None else total + out
    pseudo = sharpen(total / K, T, form)
    return pseudo[0] if single else pseudo
