"""Frozen convolutional teacher pyramid and patch bookkeeping."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .tensorio import FormatError, load_checkpoint_file, save_checkpoint_file

DEFAULT_CHANNELS = (16, 32, 64)
# inputs live in [0, 1]; centring keeps random filters from encoding mostly local brightness
INPUT_MEAN = 0.5
INPUT_STD = 0.25


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def hash_arrays(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arrays[name], dtype=np.float32).tobytes())
    return h.hexdigest()


class EncoderWeights:
    """Per-block conv kernels and biases; read-only after construction.

    Each block: conv3x3 stride 2 -> relu -> conv3x3 stride 1 -> relu.
    """

    def __init__(self, in_channels: int = 1, channels: Sequence[int] = DEFAULT_CHANNELS, seed: int = 0,
                 arrays: dict[str, np.ndarray] | None = None):
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.seed = seed
        if arrays is None:
            arrays = {}
            rng = np.random.default_rng([seed, 101])
            c_in = in_channels
            for k, c in enumerate(self.channels):
                arrays[f"teacher/block{k}/conv0/w"] = he_normal(rng, (c, c_in, 3, 3), c_in * 9)
                arrays[f"teacher/block{k}/conv0/b"] = np.zeros(c, np.float32)
                arrays[f"teacher/block{k}/conv1/w"] = he_normal(rng, (c, c, 3, 3), c * 9)
                arrays[f"teacher/block{k}/conv1/b"] = np.zeros(c, np.float32)
                c_in = c
        self.arrays = {}
        for name, arr in arrays.items():
            arr = np.array(arr, dtype=np.float32)
            arr.setflags(write=False)
            self.arrays[name] = arr

    @property
    def depth(self) -> int:
        return len(self.channels)

    def digest(self) -> str:
        return hash_arrays(self.arrays)

    def block(self, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        a = self.arrays
        p = f"teacher/block{k}"
        return a[f"{p}/conv0/w"], a[f"{p}/conv0/b"], a[f"{p}/conv1/w"], a[f"{p}/conv1/b"]


def _batched(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    if images.ndim == 2:
        images = images[None, None]
    elif images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) images, got shape {images.shape}")
    return images


def normalize_input(x: np.ndarray) -> np.ndarray:
    """Fixed affine input standardization applied before the first convolution."""
    return ((x - INPUT_MEAN) / INPUT_STD).astype(np.float32)


def encode(images: np.ndarray, weights: EncoderWeights, batch_size: int = 64) -> list[np.ndarray]:
    """Teacher feature pyramid for a batch of images.

    Images are standardized with fixed constants first.
    Returns K arrays shaped (N, C_k, H / 2^(k+1), W / 2^(k+1)).
    """
    x = normalize_input(_batched(images))
    n, c, h, w = x.shape
    scale = 2 ** weights.depth
    if h % scale or w % scale:
        raise ValueError(f"image size {h}x{w} must be divisible by {scale}")
    if c != weights.in_channels:
        raise ValueError(f"image has {c} channels, encoder expects {weights.in_channels}")
    levels: list[list[np.ndarray]] = [[] for _ in range(weights.depth)]
    for start in range(0, n, batch_size):
        t = gc.Tensor(x[start:start + batch_size])
        for k in range(weights.depth):
            w0, b0, w1, b1 = (gc.Tensor(a) for a in weights.block(k))
            t = gc.relu(gc.conv2d(t, w0, b0, stride=2))
            t = gc.relu(gc.conv2d(t, w1, b1, stride=1))
            levels[k].append(t.data)
    return [np.concatenate(chunks) for chunks in levels]


def pyramid_shapes(image_size: int, channels: Sequence[int]) -> list[tuple[int, int, int]]:
    return [(c, image_size // 2 ** (k + 1), image_size // 2 ** (k + 1)) for k, c in enumerate(channels)]


def save_features(path, pyramid: Sequence[np.ndarray]) -> None:
    save_checkpoint_file(path, {f"level{k}": np.asarray(f, np.float32) for k, f in enumerate(pyramid)})


def load_features(path, expected_shapes: Sequence[tuple[int, int, int]] | None = None) -> list[np.ndarray]:
    """Read a feature pyramid file (``level0`` .. ``level{K-1}``), validating shapes.

    Each level may be stored per image (C, H, W) or batched (N, C, H, W).
    """
    tensors = load_checkpoint_file(path)
    names = sorted(tensors, key=lambda s: (len(s), s))
    k_file = len(names)
    if names != [f"level{k}" for k in range(k_file)]:
        raise FormatError(f"{path}: feature file must contain level0..level{k_file - 1}, got {names}")
    pyramid = [tensors[f"level{k}"] for k in range(k_file)]
    if expected_shapes is not None:
        if k_file != len(expected_shapes):
            raise FormatError(f"{path}: file has K={k_file} levels but config expects K={len(expected_shapes)}")
        for k, (arr, shape) in enumerate(zip(pyramid, expected_shapes)):
            if tuple(arr.shape[-3:]) != tuple(shape) or arr.ndim not in (3, 4):
                raise FormatError(f"{path}: level{k} has shape {arr.shape}, expected {tuple(shape)}")
    return pyramid


def subsample_mask(mask: np.ndarray, level: int) -> np.ndarray:
    """Any-pooling of a (…, H, W) mask over 2^level x 2^level blocks."""
    f = 2 ** level
    mask = np.asarray(mask)
    h, w = mask.shape[-2:]
    if h % f or w % f:
        raise ValueError(f"mask size {h}x{w} not divisible by {f}")
    blocks = mask.reshape(*mask.shape[:-2], h // f, f, w // f, f)
    return blocks.max(axis=(-3, -1)).astype(np.uint8)


def level_masks(masks: np.ndarray, depth: int) -> list[np.ndarray]:
    """Masks at every teacher level (level k has stride 2^(k+1))."""
    return [subsample_mask(masks, k + 1) for k in range(depth)]


@dataclass
class PatchPartition:
    normal: np.ndarray
    abnormal: np.ndarray
    normal_index: np.ndarray
    abnormal_index: np.ndarray
    grid: tuple[int, int]

    def reassemble(self) -> np.ndarray:
        h, w = self.grid
        c = self.normal.shape[1] if len(self.normal) else self.abnormal.shape[1]
        flat = np.empty((h * w, c), dtype=np.result_type(self.normal, self.abnormal))
        flat[self.normal_index] = self.normal
        flat[self.abnormal_index] = self.abnormal
        return flat.T.reshape(c, h, w)


def partition_patches(features: np.ndarray, mask: np.ndarray) -> PatchPartition:
    """Split a (C, H, W) feature map into normal / abnormal patch rows by mask bit."""
    c, h, w = features.shape
    if mask.shape != (h, w):
        raise ValueError(f"mask {mask.shape} does not match feature grid {(h, w)}")
    flat = features.reshape(c, h * w).T
    bits = mask.reshape(-1).astype(bool)
    ni = np.flatnonzero(~bits)
    ai = np.flatnonzero(bits)
    return PatchPartition(flat[ni], flat[ai], ni, ai, (h, w))
