"""Training objectives for both stages."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradcore as gc

PROB_CLAMP = 1e-7


@dataclass
class LossConfig:
    alpha: float = 0.3
    k_hard: int = 10
    gamma: float = 2.0
    focal_weight: float = 1.0
    amplification_weight: float = 1.0
    kd_weight: float = 1.0
    hkd_weight: float = 1.0
    level_reduction: str = "sum"

    def __post_init__(self):
        if not 0.0 < self.alpha < 2.0:
            raise ValueError(f"alpha must lie in (0, 2), got {self.alpha}")
        if self.k_hard < 1:
            raise ValueError(f"k_hard must be >= 1, got {self.k_hard}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.level_reduction not in ("sum", "mean"):
            raise ValueError(f"level_reduction must be 'sum' or 'mean', got {self.level_reduction!r}")


def reduce_levels(terms: Sequence[gc.Tensor], how: str = "sum") -> gc.Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = gc.add(total, t)
    return gc.mul(total, 1.0 / len(terms)) if how == "mean" else total


def focal_loss(pred, target, gamma: float = 2.0) -> gc.Tensor:
    """Mean of -(1 - p_t)^gamma * log(p_t) with p_t clamped to [1e-7, 1 - 1e-7]."""
    pred = gc.as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    # p_t = p where target == 1, else 1 - p
    p_t = gc.add(gc.mul(pred, 2 * target - 1), 1 - target)
    p_t = gc.clip(p_t, PROB_CLAMP, 1 - PROB_CLAMP)
    nll = gc.mul(gc.log(p_t), -1.0)
    if gamma:
        nll = gc.mul(gc.power(gc.sub(1.0, p_t), gamma), nll)
    return gc.mean(nll)


def margin_matrix(teacher_abnormal: np.ndarray, teacher_normal: np.ndarray, alpha: float = 0.3,
                  level: int | None = None) -> np.ndarray:
    """Reference similarity s(F_T^a_i, F_T^n_j) - alpha; a constant (no gradient)."""
    a = np.asarray(teacher_abnormal)
    n = np.asarray(teacher_normal)
    if len(a) == 0 or len(n) == 0:
        where = "" if level is None else f" at level {level}"
        raise ValueError(f"no supervision pairs{where}: {len(a)} abnormal, {len(n)} normal patches")
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), gc.COS_EPS)
    nn_ = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), gc.COS_EPS)
    return (an @ nn_.T - alpha).astype(a.dtype)


def anomaly_amplification_loss(advanced_abnormal, teacher_normal, reference: np.ndarray) -> gc.Tensor:
    """Mean over pairs of max(s(F_A^a_i, F_T^n_j), S_ref_ij); gradient only via F_A^a."""
    advanced_abnormal = gc.as_tensor(advanced_abnormal)
    teacher_normal = gc.Tensor(np.asarray(getattr(teacher_normal, "data", teacher_normal)), dtype=advanced_abnormal.dtype)
    sims = gc.pairwise_cosine(advanced_abnormal, teacher_normal)
    return gc.mean(gc.maximum(sims, reference))


def _check_mirrored(a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise ValueError(f"pyramids have {len(a)} and {len(b)} levels")
    for k, (x, y) in enumerate(zip(a, b)):
        if tuple(x.shape) != tuple(y.shape):
            raise ValueError(f"level {k}: shape {tuple(x.shape)} vs {tuple(y.shape)}")


def kd_level(teacher: gc.Tensor, student: gc.Tensor) -> gc.Tensor:
    """Batch mean of 1 - cos between flattened (C*H*W) per-image features."""
    n = teacher.shape[0]
    t = gc.reshape(gc.as_tensor(teacher), (n, -1))
    s = gc.reshape(gc.as_tensor(student), (n, -1))
    return gc.mean(gc.sub(1.0, gc.cosine_similarity(t, s, axis=1)))


def patch_discrepancy(teacher: gc.Tensor, student: gc.Tensor) -> gc.Tensor:
    """(N, C, H, W) pair -> (N, H*W) per-patch 1 - cosine over channels."""
    n, c = teacher.shape[:2]
    t = gc.reshape(gc.as_tensor(teacher), (n, c, -1))
    s = gc.reshape(gc.as_tensor(student), (n, c, -1))
    return gc.sub(1.0, gc.cosine_similarity(t, s, axis=1))


def hard_indices(disc: np.ndarray, k_hard: int) -> np.ndarray:
    """Flat indices of the top-k per row, ties to the lowest patch index."""
    n, p = disc.shape
    m = min(k_hard, p)
    order = np.argsort(-disc, axis=1, kind="stable")[:, :m]
    return (order + np.arange(n)[:, None] * p).reshape(-1)


def hkd_level(teacher: gc.Tensor, student: gc.Tensor, k_hard: int) -> gc.Tensor:
    """Per image: mean discrepancy of the k_hard hardest patches; then batch mean."""
    disc = patch_discrepancy(teacher, student)
    idx = hard_indices(disc.data, k_hard)
    picked = gc.take(gc.reshape(disc, (-1,)), idx)
    return gc.mean(picked)


def kd_loss(advanced: Sequence, student: Sequence, reduction: str = "sum") -> gc.Tensor:
    _check_mirrored(advanced, student)
    return reduce_levels([kd_level(gc.as_tensor(a), gc.as_tensor(s)) for a, s in zip(advanced, student)], reduction)


def hkd_loss(advanced: Sequence, student: Sequence, k_hard: int = 10, reduction: str = "sum") -> gc.Tensor:
    _check_mirrored(advanced, student)
    return reduce_levels([hkd_level(gc.as_tensor(a), gc.as_tensor(s), k_hard) for a, s in zip(advanced, student)],
                         reduction)


def stage1_loss(focal_terms: Sequence[gc.Tensor], amplification_terms: Sequence[gc.Tensor],
                cfg: LossConfig | None = None) -> tuple[gc.Tensor, float, float]:
    """L1 = focal + amplification, each reduced over levels; returns (total, focal, amplification)."""
    cfg = cfg or LossConfig()
    focal = reduce_levels(focal_terms, cfg.level_reduction)
    parts = [gc.mul(focal, cfg.focal_weight)]
    amp_value = 0.0
    if amplification_terms:
        amp = reduce_levels(amplification_terms, cfg.level_reduction)
        amp_value = float(amp.data)
        parts.append(gc.mul(amp, cfg.amplification_weight))
    return reduce_levels(parts), float(focal.data), amp_value


def stage2_loss(advanced: Sequence, student: Sequence, cfg: LossConfig | None = None,
                use_hkd: bool = True) -> tuple[gc.Tensor, float, float]:
    """L2 = KD + HKD; returns (total, kd, hkd)."""
    cfg = cfg or LossConfig()
    kd = kd_loss(advanced, student, cfg.level_reduction)
    if not use_hkd:
        return gc.mul(kd, cfg.kd_weight), float(kd.data), 0.0
    hkd = hkd_loss(advanced, student, cfg.k_hard, cfg.level_reduction)
    total = gc.add(gc.mul(kd, cfg.kd_weight), gc.mul(hkd, cfg.hkd_weight))
    return total, float(kd.data), float(hkd.data)
