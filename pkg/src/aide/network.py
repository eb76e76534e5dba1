"""Encoder-decoder segmentation network with one encoder stream per modality."""

from __future__ import annotations

import io
import json
import math
import os
import struct
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ArchConfig, TrainConfig, ValidationError

CHECKPOINT_MAGIC = b"AIDECKPT"
CHECKPOINT_VERSION = 1


class NonFiniteGradient(FloatingPointError):
    pass


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class SegNet(nn.Module):
    """U-shaped network: ``depth`` encoder blocks separated by max-pooling,
    ``depth - 1`` decoder blocks each paired with a 2x bilinear upsampling,
    skip connections by concatenation, and a 1x1 two-class softmax head.

    With several modalities every modality gets its own encoder stream and
    the streams' features are concatenated level by level.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        widths = [arch.base_channels * arch.growth ** i for i in range(arch.depth)]
        self.widths = widths
        self.streams = nn.ModuleList()
        for _ in range(arch.modalities):
            blocks = nn.ModuleList()
            cin = 1
            for w in widths:
                blocks.append(conv_block(cin, w))
                cin = w
            self.streams.append(blocks)
        m = arch.modalities
        self.decoder = nn.ModuleList()
        cin = widths[-1] * m
        for level in reversed(range(arch.depth - 1)):
            cout = widths[level]
            self.decoder.append(conv_block(cin + widths[level] * m, cout))
            cin = cout
        self.head = nn.Conv2d(cin, 2, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        per_stream = []
        for s, blocks in enumerate(self.streams):
            h = x[:, s : s + 1]
            feats = []
            for i, block in enumerate(blocks):
                if i:
                    h = F.max_pool2d(h, 2)
                h = block(h)
                feats.append(h)
            per_stream.append(feats)
        levels = [torch.cat([f[i] for f in per_stream], dim=1) for i in range(self.arch.depth)]
        h = levels[-1]
        for j, block in enumerate(self.decoder):
            skip = levels[-2 - j]
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1))
        return self.head(h)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def _check_input(model: SegNet, x: torch.Tensor) -> None:
    arch = model.arch
    if x.dim() != 4:
        raise ValidationError(f"expected a (B, M, H, W) batch, got shape {tuple(x.shape)}")
    if x.shape[1] != arch.modalities:
        raise ValidationError(f"model expects {arch.modalities} modalities, got {x.shape[1]}")
    mult = arch.size_multiple
    if x.shape[2] % mult or x.shape[3] % mult:
        raise ValidationError(f"input size {x.shape[2]}x{x.shape[3]} is not divisible by {mult}")


def build_network(arch: ArchConfig, seed: int, input_size: tuple[int, int] | None = None) -> SegNet:
    if input_size is not None and (input_size[0] % arch.size_multiple or input_size[1] % arch.size_multiple):
        raise ValidationError(f"input size {input_size} is not divisible by {arch.size_multiple}")
    # fork_rng keeps the global torch stream untouched by model construction
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SegNet(arch)
    return model


def forward(model: SegNet, images, train: bool = False) -> torch.Tensor:
    """Probability maps (B, 2, H, W) for a batch of (B, M, H, W) images.

    Outside training the network runs with frozen normalization statistics
    and without gradient tracking.
    """
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images, dtype=torch.float32)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    _check_input(model, x)
    if train:
        model.train()
        return model(x)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(x)
    model.train(was_training)
    return out


def predict(model: SegNet, images, batch_size: int = 16) -> np.ndarray:
    """Evaluation-mode probability maps as float64 numpy, batched for memory."""
    images = np.asarray(images, dtype=np.float32)
    outs = [forward(model, images[i : i + batch_size]).double().numpy()
            for i in range(0, len(images), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, 2) + images.shape[2:])


def make_optimizer(model: nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.lr)
    return torch.optim.SGD(model.parameters(), lr=config.lr)


def make_scheduler(optimizer: torch.optim.Optimizer, config: TrainConfig, epochs: int | None = None):
    """Per-epoch learning-rate schedule, or None for a constant rate."""
    if config.lr_schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs or config.Q)
    return None


def gradient_step(model: nn.Module, closure: Callable[[], torch.Tensor], lr: float | None = None,
                  optimizer: torch.optim.Optimizer | None = None) -> torch.Tensor:
    """Evaluate ``closure``, backpropagate and update the parameters in place.

    Without an optimizer the update is plain gradient descent ``w -= lr * grad``.
    Returns the detached loss.
    """
    if optimizer is None and lr is None:
        raise ValueError("either lr or optimizer is required")
    params = [p for p in model.parameters() if p.requires_grad]
    for p in params:
        p.grad = None
    loss = closure()
    if loss.requires_grad:
        loss.backward()
    for name, p in model.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradient(f"non-finite gradient in parameter {name!r} (loss={loss.item():.6g})")
    if optimizer is not None:
        optimizer.step()
    else:
        with torch.no_grad():
            for p in params:
                if p.grad is not None:
                    p.sub_(lr * p.grad)
    return loss.detach()


# ---------------------------------------------------------------------------
# checkpoints: magic, version, JSON header, then raw little-endian float64 blobs

def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def save_checkpoint(model: SegNet, path: str | os.PathLike) -> None:
    arrays = state_arrays(model)
    entries = []
    blobs = io.BytesIO()
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str.lstrip("<>|="), "shape": list(arr.shape),
                        "offset": blobs.tell(), "nbytes": len(data)})
        blobs.write(data)
    header = json.dumps({"arch": vars(model.arch), "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        fh.write(blobs.getvalue())


def load_checkpoint(path: str | os.PathLike) -> SegNet:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen])
    body = raw[16 + hlen :]
    model = SegNet(ArchConfig(**header["arch"]))
    state = {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(body, dtype=dt, count=math.prod(e["shape"]) if e["shape"] else 1,
                            offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    model.load_state_dict(state)
    return model


def clone_model(model: SegNet) -> SegNet:
    copy = SegNet(model.arch)
    copy.load_state_dict(model.state_dict())
    return copy


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
