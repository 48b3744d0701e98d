"""Residual anomaly amplification: matching-guided gate + attribute-scaling residuals.

Per teacher level the module holds a query projector, a residual generator
(both 3-layer perceptrons of width C_k) and a pair of learnable memory banks.
Advanced features are F_A = F_T + w * delta, where w is the summed softmax
affinity of the query to the anomaly bank.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .teacher import he_normal

MODES = ("inference", "train")


class MLP:
    """Dense relu perceptron; no activation after the last layer."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, zero_last: bool = False):
        self.layers: list[tuple[gc.Tensor, gc.Tensor]] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            w = np.zeros((a, b), np.float32) if (last and zero_last) else he_normal(rng, (a, b), a)
            self.layers.append((gc.Tensor(w, requires_grad=True), gc.Tensor(np.zeros(b, np.float32), requires_grad=True)))

    def __call__(self, x: gc.Tensor) -> gc.Tensor:
        for i, (w, b) in enumerate(self.layers):
            x = gc.linear(x, w, b)
            if i < len(self.layers) - 1:
                x = gc.relu(x)
        return x

    def named_params(self, prefix: str) -> dict[str, gc.Tensor]:
        out = {}
        for i, (w, b) in enumerate(self.layers):
            out[f"{prefix}/w{i}"] = w
            out[f"{prefix}/b{i}"] = b
        return out


def position_encoding(channels: int, height: int, width: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding (C, H, W); first half of channels encode rows, second half columns."""
    half = channels // 2
    pe = np.zeros((channels, height, width), dtype=np.float64)

    def axis_code(n_ch: int, positions: np.ndarray) -> np.ndarray:
        i = np.arange(n_ch)
        freq = 1.0 / 10000 ** ((i // 2) * 2 / max(n_ch, 1))
        angle = positions[None, :] * freq[:, None]
        return np.where(i[:, None] % 2 == 0, np.sin(angle), np.cos(angle))

    rows = axis_code(half, np.arange(height, dtype=np.float64))
    cols = axis_code(channels - half, np.arange(width, dtype=np.float64))
    pe[:half] = rows[:, :, None]
    pe[half:] = cols[:, None, :]
    return pe.astype(np.float32)


def project_query(features: gc.Tensor, pos: np.ndarray | gc.Tensor, phi1: MLP) -> gc.Tensor:
    """q = phi1(F + p) over patch rows (P, C)."""
    return phi1(gc.add(features, pos))


def match_memories(query: gc.Tensor, mem_n: gc.Tensor, mem_a: gc.Tensor) -> gc.Tensor:
    """Softmax over the 2L cosine similarities; columns [0, L) normal, [L, 2L) anomaly."""
    bank = gc.concat([mem_n, mem_a], axis=0)
    return gc.softmax(gc.pairwise_cosine(query, bank), axis=-1)


def anomaly_weight(weights: gc.Tensor, n_items: int) -> gc.Tensor:
    """Summed anomaly-bank affinity per query, in [0, 1]."""
    return gc.sum(gc.take(weights, np.arange(n_items, 2 * n_items), axis=1), axis=1)


def generate_residual(features: gc.Tensor, phi2: MLP) -> gc.Tensor:
    """delta = tanh(phi2(F)) * F, so |delta| <= |F| per channel."""
    return gc.mul(gc.tanh(phi2(features)), features)


def advance_features(features: gc.Tensor, gate: gc.Tensor | np.ndarray, residual: gc.Tensor) -> gc.Tensor:
    """F + gate * delta with a per-row gate of shape (P,)."""
    gate = gate if isinstance(gate, gc.Tensor) else gc.Tensor(np.asarray(gate, dtype=features.dtype))
    return gc.add(features, gc.mul(gc.reshape(gate, (-1, 1)), residual))


def to_rows(fmap: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, C)."""
    n, c, h, w = fmap.shape
    return np.ascontiguousarray(fmap.transpose(0, 2, 3, 1).reshape(n * h * w, c))


def from_rows(rows: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, c, h, w = shape
    return np.ascontiguousarray(rows.reshape(n, h, w, c).transpose(0, 3, 1, 2))


@dataclass
class LevelOutput:
    """Row-major (P = N*H*W) results for one level."""
    teacher: gc.Tensor
    advanced: gc.Tensor
    gate: gc.Tensor
    residual: gc.Tensor
    shape: tuple[int, int, int, int]


class RAALevel:
    def __init__(self, channels: int, grid: tuple[int, int], n_memory: int, rng: np.random.Generator,
                 zero_init_residual: bool = True, pos_scale: float = 1.0):
        c = channels
        self.channels = c
        self.n_memory = n_memory
        self.phi1 = MLP([c, c, c, c], rng)
        self.phi2 = MLP([c, c, c, c], rng, zero_last=zero_init_residual)
        self.mem_n = gc.Tensor(rng.standard_normal((n_memory, c)).astype(np.float32), requires_grad=True)
        self.mem_a = gc.Tensor(rng.standard_normal((n_memory, c)).astype(np.float32), requires_grad=True)
        self.pos = (pos_scale * position_encoding(c, *grid)).astype(np.float32)

    def named_params(self, prefix: str) -> dict[str, gc.Tensor]:
        out = {}
        out.update(self.phi1.named_params(f"{prefix}/phi1"))
        out.update(self.phi2.named_params(f"{prefix}/phi2"))
        out[f"{prefix}/mem_n"] = self.mem_n
        out[f"{prefix}/mem_a"] = self.mem_a
        return out

    def forward(self, fmap: np.ndarray, mode: str = "inference", mask: np.ndarray | None = None) -> LevelOutput:
        """Advance a (N, C, H, W) teacher level.

        In ``train`` mode the gate is replaced by the ground-truth patch mask
        (N, H, W): normal patches keep F_T exactly, anomalous get F_T + delta.
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        n, c, h, w = fmap.shape
        if c != self.channels or self.pos.shape[1:] != (h, w):
            raise ValueError(f"level expects (*, {self.channels}, {self.pos.shape[1]}, {self.pos.shape[2]}), got {fmap.shape}")
        rows = gc.Tensor(to_rows(fmap))
        pos_rows = np.tile(self.pos.reshape(c, h * w).T, (n, 1))
        query = project_query(rows, pos_rows, self.phi1)
        gate = anomaly_weight(match_memories(query, self.mem_n, self.mem_a), self.n_memory)
        residual = generate_residual(rows, self.phi2)
        if mode == "train":
            if mask is None:
                raise ValueError("train mode requires the ground-truth patch mask")
            bits = np.asarray(mask).reshape(-1).astype(fmap.dtype)
            if bits.shape[0] != n * h * w:
                raise ValueError(f"mask has {bits.shape[0]} cells, expected {n * h * w}")
            advanced = advance_features(rows, bits, residual)
        else:
            advanced = advance_features(rows, gate, residual)
        return LevelOutput(rows, advanced, gate, residual, (n, c, h, w))


class RAA:
    """One :class:`RAALevel` per teacher level."""

    def __init__(self, channels: Sequence[int], image_size: int, n_memory: int = 50, seed: int = 0,
                 zero_init_residual: bool = True, pos_scale: float = 1.0):
        rng = np.random.default_rng([seed, 202])
        self.levels = [
            RAALevel(c, (image_size // 2 ** (k + 1),) * 2, n_memory, rng, zero_init_residual, pos_scale)
            for k, c in enumerate(channels)
        ]

    def named_params(self) -> dict[str, gc.Tensor]:
        out = {}
        for k, level in enumerate(self.levels):
            out.update(level.named_params(f"raa/level{k}"))
        return out

    def forward(self, pyramid: Sequence[np.ndarray], mode: str = "inference",
                masks: Sequence[np.ndarray] | None = None) -> list[LevelOutput]:
        if len(pyramid) != len(self.levels):
            raise ValueError(f"pyramid has {len(pyramid)} levels, RAA has {len(self.levels)}")
        if mode == "train" and masks is None:
            raise ValueError("train mode requires per-level masks")
        return [level.forward(f, mode, None if masks is None else masks[k])
                for k, (level, f) in enumerate(zip(self.levels, pyramid))]

    def advance(self, pyramid: Sequence[np.ndarray], batch_size: int = 64) -> list[np.ndarray]:
        """Inference-mode advanced pyramid as plain arrays (no graph kept)."""
        n = pyramid[0].shape[0]
        chunks: list[list[np.ndarray]] = [[] for _ in self.levels]
        with gc.no_grad():
            for start in range(0, n, batch_size):
                part = [f[start:start + batch_size] for f in pyramid]
                for k, out in enumerate(self.forward(_detached(part), "inference")):
                    chunks[k].append(from_rows(out.advanced.data, out.shape))
        return [np.concatenate(c) for c in chunks]

    def gates_and_residuals(self, pyramid: Sequence[np.ndarray]) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per level: predicted gate (N, H, W) and raw residual (N, C, H, W)."""
        result = []
        with gc.no_grad():
            outs = self.forward(_detached(pyramid), "inference")
        for out in outs:
            n, c, h, w = out.shape
            result.append((out.gate.data.reshape(n, h, w), from_rows(out.residual.data, out.shape)))
        return result


def _detached(pyramid: Sequence[np.ndarray]) -> list[np.ndarray]:
    return [np.asarray(f, dtype=np.float32) for f in pyramid]
