"""Anomaly maps from teacher-student discrepancy, plus feature diagnostics."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .gradcore import COS_EPS, bilinear_weights

SMOOTHING_SIGMA = 4.0
INTERCLASS_CAP = 512


def _normalize(x: np.ndarray, axis: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=axis, keepdims=True), COS_EPS)


def discrepancy_map(advanced: np.ndarray, student: np.ndarray) -> np.ndarray:
    """1 - cosine over the channel axis; (..., C, H, W) -> (..., H, W) in [0, 2]."""
    advanced = np.asarray(advanced)
    student = np.asarray(student)
    if advanced.shape != student.shape:
        raise ValueError(f"shape mismatch: {advanced.shape} vs {student.shape}")
    cos = (_normalize(advanced, -3) * _normalize(student, -3)).sum(axis=-3)
    return np.clip(1.0 - cos, 0.0, 2.0)


def upsample_map(m: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear (align_corners=False) upsampling of the trailing two axes."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape[-2:]
    if (h, w) == tuple(size):
        return m.copy()
    uh = bilinear_weights(h, size[0])
    uw = bilinear_weights(w, size[1])
    return np.matmul(np.matmul(uh, m), uw.T)


def aggregate_map(level_maps: Sequence[np.ndarray], size: tuple[int, int], smoothing: bool = False,
                  sigma: float = SMOOTHING_SIGMA) -> np.ndarray:
    """Sum of per-level maps upsampled to ``size``; optional Gaussian smoothing afterwards."""
    total = np.zeros(np.shape(level_maps[0])[:-2] + tuple(size), dtype=np.float64)
    for m in level_maps:
        total += upsample_map(m, size)
    if smoothing:
        axes = (0,) * (total.ndim - 2) + (sigma, sigma)
        total = gaussian_filter(total, sigma=axes, mode="nearest")
    return total


def anomaly_maps(advanced: Sequence[np.ndarray], student: Sequence[np.ndarray], size: tuple[int, int],
                 smoothing: bool = False) -> np.ndarray:
    """(N, H, W) anomaly maps for batched pyramids."""
    return aggregate_map([discrepancy_map(a, s) for a, s in zip(advanced, student)], size, smoothing)


def image_score(amap: np.ndarray) -> float | np.ndarray:
    """Maximum of a map; for a stack (N, H, W) returns one score per map."""
    amap = np.asarray(amap)
    if amap.size == 0:
        raise ValueError("empty anomaly map")
    if amap.ndim == 3:
        return amap.reshape(len(amap), -1).max(axis=1)
    return float(amap.max())


def _subsample(x: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(x) <= cap:
        return x
    return x[np.sort(rng.choice(len(x), size=cap, replace=False))]


def interclass_distance(normal: Sequence[np.ndarray], abnormal: Sequence[np.ndarray],
                        cap: int = INTERCLASS_CAP, seed: int = 0) -> list[float]:
    """Per level mean (1 - cos) over normal x abnormal patch pairs.

    Each level is given as (P, C) patch rows; sets larger than ``cap`` are
    subsampled with a seeded generator.
    """
    out = []
    for k, (n, a) in enumerate(zip(normal, abnormal)):
        if len(n) == 0 or len(a) == 0:
            raise ValueError(f"level {k}: empty patch set ({len(n)} normal, {len(a)} abnormal)")
        rng = np.random.default_rng([seed, k])
        n = _subsample(np.asarray(n), cap, rng)
        a = _subsample(np.asarray(a), cap, rng)
        sims = _normalize(n, 1) @ _normalize(a, 1).T
        out.append(float(np.mean(1.0 - sims)))
    return out


def residual_intensity(residuals: np.ndarray) -> float:
    """Mean squared residual entry over an (N, C) set."""
    r = np.asarray(residuals, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty residual set")
    return float(np.mean(r * r))
