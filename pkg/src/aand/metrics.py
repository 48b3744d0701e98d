"""Image AUROC, pixel AUROC and the per-region-overlap (PRO) metric."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .tensorio import atomic_write

REPORT_HEADER = ("class", "i_auc", "p_auc", "pro", "n_normal", "n_abnormal", "config_hash")
FOUR_CONNECTIVITY = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic: (concordant + 0.5 * ties) / (P * N)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """AUROC over the pooled pixel population of all maps."""
    if len(maps) != len(gts):
        raise ValueError(f"{len(maps)} maps vs {len(gts)} masks")
    for m, g in zip(maps, gts):
        if np.shape(m) != np.shape(g):
            raise ValueError(f"map {np.shape(m)} vs mask {np.shape(g)}")
    return auroc(np.concatenate([np.ravel(m) for m in maps]), np.concatenate([np.ravel(g) for g in gts]))


def label_regions(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of a binary mask."""
    return ndimage.label(np.asarray(mask).astype(bool), structure=FOUR_CONNECTIVITY)


def pro_curve(maps: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, mean region overlap) at every distinct threshold, prediction = score >= t.

    The curve starts at (0, 0) (threshold above every score) and points are
    ordered by decreasing threshold.
    """
    scores, region_ids, normal = [], [], []
    n_regions = 0
    for m, g in zip(maps, gts):
        labels, count = label_regions(g)
        scores.append(np.asarray(m, dtype=np.float64).ravel())
        lab = labels.ravel().astype(np.int64)
        region_ids.append(np.where(lab > 0, lab + n_regions, 0))
        normal.append((np.asarray(g).ravel() == 0).astype(np.float64))
        n_regions += count
    if n_regions == 0:
        raise ValueError("pro needs at least one ground-truth anomaly region")
    s = np.concatenate(scores)
    rid = np.concatenate(region_ids)
    neg = np.concatenate(normal)
    n_neg = neg.sum()
    if n_neg == 0:
        raise ValueError("pro needs at least one normal pixel")
    order = np.argsort(-s, kind="stable")
    s, rid, neg = s[order], rid[order], neg[order]
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True]) + 1
    fpr = np.cumsum(neg)[ends - 1] / n_neg
    # per-region hit counts at each threshold, so full coverage gives exactly 1
    positions = np.flatnonzero(rid)
    by_region = np.argsort(rid[positions], kind="stable")
    sizes = np.bincount(rid[positions], minlength=n_regions + 1)[1:]
    bounds = np.r_[0, np.cumsum(sizes)]
    sorted_pos = positions[by_region]
    overlap = np.zeros(len(ends))
    for r in range(n_regions):
        hits = np.searchsorted(sorted_pos[bounds[r]:bounds[r + 1]], ends)
        overlap += hits / sizes[r]
    return np.r_[0.0, fpr], np.r_[0.0, overlap / n_regions]


def _area_to_limit(x: np.ndarray, y: np.ndarray, limit: float) -> float:
    """Trapezoidal area under a curve with non-decreasing x, cut at x = limit."""
    area = 0.0
    for i in range(1, len(x)):
        x0, x1, y0, y1 = x[i - 1], x[i], y[i - 1], y[i]
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def pro(maps: Sequence[np.ndarray], gts: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Normalized area under the PRO curve for FPR in [0, fpr_limit]."""
    if not 0.0 < fpr_limit <= 1.0:
        raise ValueError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    fpr, overlap = pro_curve(maps, gts)
    return float(_area_to_limit(fpr, overlap, fpr_limit) / fpr_limit)


@dataclass
class EvalReport:
    name: str
    i_auc: float
    p_auc: float
    pro: float
    n_normal: int
    n_abnormal: int
    config_hash: str = ""

    def row(self) -> tuple:
        return (self.name, f"{self.i_auc:.6f}", f"{self.p_auc:.6f}", f"{self.pro:.6f}",
                self.n_normal, self.n_abnormal, self.config_hash)

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_maps(maps: np.ndarray, masks: np.ndarray, labels: np.ndarray, name: str = "",
                  config_hash: str = "", fpr_limit: float = 0.3, scores: np.ndarray | None = None) -> EvalReport:
    """Metric triple for (N, H, W) maps, GT masks and image labels.

    Image scores default to the per-map maximum.
    """
    maps = np.asarray(maps)
    labels = np.asarray(labels).astype(int)
    if scores is None:
        scores = maps.reshape(len(maps), -1).max(axis=1)
    return EvalReport(
        name=name,
        i_auc=auroc(scores, labels),
        p_auc=pixel_auroc(list(maps), list(masks)),
        pro=pro(list(maps), list(masks), fpr_limit),
        n_normal=int((labels == 0).sum()),
        n_abnormal=int((labels == 1).sum()),
        config_hash=config_hash,
    )


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def write_reports(path, reports: Sequence[EvalReport]) -> None:
    atomic_write(path, reports_to_csv(reports).encode())
