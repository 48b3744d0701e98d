"""One-class bottleneck and student decoder (reverse distillation)."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import gradcore as gc
from .teacher import he_normal


class _ConvStack:
    def __init__(self):
        self.params: dict[str, gc.Tensor] = {}

    def _conv(self, name: str, c_out: int, c_in: int, k: int, rng: np.random.Generator) -> None:
        self.params[f"{name}/w"] = gc.Tensor(he_normal(rng, (c_out, c_in, k, k), c_in * k * k), requires_grad=True)
        self.params[f"{name}/b"] = gc.Tensor(np.zeros(c_out, np.float32), requires_grad=True)

    def conv(self, name: str, x: gc.Tensor, stride: int = 1) -> gc.Tensor:
        return gc.conv2d(x, self.params[f"{name}/w"], self.params[f"{name}/b"], stride=stride)

    def named_params(self) -> dict[str, gc.Tensor]:
        return dict(self.params)


class Bottleneck(_ConvStack):
    """Downsample every level to the coarsest grid, concatenate, fuse with a 1x1 conv.

    Level k (of K) passes through K-1-k stride-2 conv3x3 + relu steps that
    double its channels each time, then the concatenation is fused to C_K
    channels followed by relu.
    """

    def __init__(self, channels: Sequence[int], seed: int = 1):
        super().__init__()
        rng = np.random.default_rng([seed, 303])
        self.channels = tuple(channels)
        depth = len(channels)
        self.paths: list[list[str]] = []
        concat_c = 0
        for k, c in enumerate(channels):
            names = []
            c_in = c
            for step in range(depth - 1 - k):
                c_out = c_in * 2
                name = f"bn/level{k}/down{step}"
                self._conv(name, c_out, c_in, 3, rng)
                names.append(name)
                c_in = c_out
            self.paths.append(names)
            concat_c += c_in
        self._conv("bn/fuse", channels[-1], concat_c, 1, rng)

    def __call__(self, pyramid: Sequence) -> gc.Tensor:
        if len(pyramid) != len(self.channels):
            raise ValueError(f"bottleneck expects {len(self.channels)} levels, got {len(pyramid)}")
        coarse = pyramid[-1].shape[-2:]
        parts = []
        for k, (f, names) in enumerate(zip(pyramid, self.paths)):
            x = gc.as_tensor(f)
            if x.ndim != 4 or x.shape[1] != self.channels[k]:
                raise ValueError(f"level {k}: expected (N, {self.channels[k]}, H, W), got {x.shape}")
            for name in names:
                x = gc.relu(self.conv(name, x, stride=2))
            if x.shape[-2:] != coarse:
                raise ValueError(f"level {k} reduces to {x.shape[-2:]}, expected {coarse}")
            parts.append(x)
        return gc.relu(self.conv("bn/fuse", gc.concat(parts, axis=1)))


class Decoder(_ConvStack):
    """Mirror of the teacher: emits level K first, upsampling by 2 between levels.

    Block k: [upsample x2] -> conv3x3 -> relu -> (carried forward) and a
    conv3x3 head that emits the level-k feature map.
    """

    def __init__(self, channels: Sequence[int], seed: int = 1):
        super().__init__()
        rng = np.random.default_rng([seed, 404])
        self.channels = tuple(channels)
        c_in = channels[-1]
        for k in reversed(range(len(channels))):
            c = channels[k]
            self._conv(f"student/level{k}/body", c, c_in, 3, rng)
            self._conv(f"student/level{k}/head", c, c, 3, rng)
            c_in = c

    def __call__(self, embedding) -> list[gc.Tensor]:
        h = gc.as_tensor(embedding)
        if h.ndim != 4 or h.shape[1] != self.channels[-1]:
            raise ValueError(f"embedding must be (N, {self.channels[-1]}, H, W), got {h.shape}")
        outs: list[gc.Tensor] = [None] * len(self.channels)  # type: ignore[list-item]
        for k in reversed(range(len(self.channels))):
            if k < len(self.channels) - 1:
                h = gc.bilinear_upsample(h, (h.shape[2] * 2, h.shape[3] * 2))
            h = gc.relu(self.conv(f"student/level{k}/body", h))
            outs[k] = self.conv(f"student/level{k}/head", h)
        return outs


def bottleneck(pyramid: Sequence, params: Bottleneck) -> gc.Tensor:
    return params(pyramid)


def decode(embedding, params: Decoder) -> list[gc.Tensor]:
    return params(embedding)


class Student:
    """Bottleneck + decoder pair trained in the normality-distillation stage."""

    def __init__(self, channels: Sequence[int], seed: int = 1):
        self.bottleneck = Bottleneck(channels, seed)
        self.decoder = Decoder(channels, seed)

    def named_params(self) -> dict[str, gc.Tensor]:
        return {**self.bottleneck.named_params(), **self.decoder.named_params()}

    def __call__(self, pyramid: Sequence) -> list[gc.Tensor]:
        return self.decoder(self.bottleneck(pyramid))

    def predict(self, pyramid: Sequence[np.ndarray], batch_size: int = 64) -> list[np.ndarray]:
        n = pyramid[0].shape[0]
        chunks: list[list[np.ndarray]] = [[] for _ in pyramid]
        with gc.no_grad():
            for start in range(0, n, batch_size):
                outs = self([np.asarray(f[start:start + batch_size], np.float32) for f in pyramid])
                for k, o in enumerate(outs):
                    chunks[k].append(o.data)
        return [np.concatenate(c) for c in chunks]
