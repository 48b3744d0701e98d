"""Procedural normal textures and DRAEM-style synthetic anomalies.

Images are float32 arrays shaped (C, H, W) with values in [0, 1]; masks are
uint8 (H, W) arrays of {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORMAL_FAMILIES = ("stripes", "checker", "blobs", "grid_object")
ANOMALY_FAMILIES = ("hf_noise", "contrast_blobs")

PERLIN_THRESHOLD = 0.5
OPACITY_RANGE = (0.15, 1.0)
NOISE_STD = 0.02


@dataclass
class SynthSample:
    normal: np.ndarray
    corrupted: np.ndarray
    mask: np.ndarray
    seed: int


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def perlin_gradients(seed: int, cells_y: int, cells_x: int) -> np.ndarray:
    """Unit gradient vectors on the (cells_y + 1) x (cells_x + 1) lattice."""
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * np.pi, size=(cells_y + 1, cells_x + 1))
    return np.stack([np.cos(angles), np.sin(angles)], axis=-1)


def perlin_field(seed: int, height: int, width: int, grid_period: int) -> np.ndarray:
    """Single-octave gradient noise, rescaled so that max |value| == 1.

    Lattice points (multiples of ``grid_period``) are exact zeros.
    """
    if grid_period <= 0 or height % grid_period or width % grid_period:
        raise ValueError(f"grid period {grid_period} must divide image size {height}x{width}")
    cy, cx = height // grid_period, width // grid_period
    grads = perlin_gradients(seed, cy, cx)
    ys = np.arange(height)
    xs = np.arange(width)
    iy, fy = ys // grid_period, (ys % grid_period) / grid_period
    ix, fx = xs // grid_period, (xs % grid_period) / grid_period
    FY, FX = np.meshgrid(fy, fx, indexing="ij")
    IY, IX = np.meshgrid(iy, ix, indexing="ij")

    def corner(dy: int, dx: int) -> np.ndarray:
        g = grads[IY + dy, IX + dx]
        return g[..., 0] * (FY - dy) + g[..., 1] * (FX - dx)

    u, v = _fade(FX), _fade(FY)
    top = corner(0, 0) + u * (corner(0, 1) - corner(0, 0))
    bottom = corner(1, 0) + u * (corner(1, 1) - corner(1, 0))
    field = top + v * (bottom - top)
    peak = np.abs(field).max()
    if peak > 0:
        field = field / peak
    return field.astype(np.float32)


def binarize(field: np.ndarray, threshold: float = PERLIN_THRESHOLD) -> np.ndarray:
    return (np.asarray(field) > threshold).astype(np.uint8)


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    return image.mean(axis=0) if image.ndim == 3 else image


def otsu_threshold(gray: np.ndarray) -> int | None:
    """Otsu level on a 256-bin histogram; None for a single-level image.

    Pixels with quantized level > threshold form the bright class.
    Ties resolve to the lowest level.
    """
    levels = np.clip(np.round(np.asarray(gray, dtype=np.float64) * 255), 0, 255).astype(np.int64)
    hist = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    if np.count_nonzero(hist) < 2:
        return None
    p = hist / hist.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * np.arange(256))
    mu_t = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * omega - mu) ** 2 / (omega * (1 - omega))
    between[~np.isfinite(between)] = -1.0
    return int(np.argmax(between))


def foreground_mask(image: np.ndarray) -> np.ndarray:
    """Bright-class Otsu mask of the grayscale image; all ones for a constant image."""
    gray = to_gray(image)
    t = otsu_threshold(gray)
    if t is None:
        return np.ones(gray.shape, dtype=np.uint8)
    levels = np.clip(np.round(np.asarray(gray, dtype=np.float64) * 255), 0, 255)
    return (levels > t).astype(np.uint8)


def compose_mask(anomaly: np.ndarray, foreground: np.ndarray) -> np.ndarray:
    if anomaly.shape != foreground.shape:
        raise ValueError(f"mask shapes differ: {anomaly.shape} vs {foreground.shape}")
    return (anomaly.astype(bool) & foreground.astype(bool)).astype(np.uint8)


def synthesize_anomaly(normal: np.ndarray, texture: np.ndarray, mask: np.ndarray, opacity: float) -> np.ndarray:
    if not 0.0 <= opacity <= 1.0:
        raise ValueError(f"opacity must lie in [0, 1], got {opacity}")
    if normal.shape != texture.shape or normal.shape[-2:] != mask.shape:
        raise ValueError(f"shape mismatch: image {normal.shape}, texture {texture.shape}, mask {mask.shape}")
    blended = ((1.0 - opacity) * normal + opacity * texture).astype(normal.dtype)
    return np.where(mask.astype(bool), blended, normal)


# ----------------------------------------------------------------------------
# procedural images
# ----------------------------------------------------------------------------

def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")


def _finish(img: np.ndarray, channels: int) -> np.ndarray:
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return np.repeat(img[None], channels, axis=0)


def gen_normal_texture(family: str, seed: int, size: int = 64, channels: int = 1, period: int = 8) -> np.ndarray:
    """One seeded image from a normal-product family, shaped (channels, size, size)."""
    if family not in NORMAL_FAMILIES:
        raise ValueError(f"unknown normal family {family!r}; expected one of {NORMAL_FAMILIES}")
    rng = np.random.default_rng([seed, NORMAL_FAMILIES.index(family)])
    Y, X = _grid(size, size)
    noise = rng.normal(0.0, NOISE_STD, size=(size, size))
    if family == "stripes":
        phase = rng.uniform(0, period)
        img = 0.5 + 0.3 * np.sin(2 * np.pi * (Y + phase) / period)
    elif family == "checker":
        oy, ox = rng.integers(0, period, size=2)
        cells = ((Y + oy) // (period // 2) + (X + ox) // (period // 2)) % 2
        img = 0.3 + 0.4 * cells
    elif family == "blobs":
        img = np.full((size, size), 0.25)
        n = 6
        cy = (np.arange(n) % 3 + 0.5) * size / 3 + rng.normal(0, 1.5, n)
        cx = (np.arange(n) // 3 + 0.5) * size / 2 + rng.normal(0, 1.5, n)
        radius = size / 10 + rng.normal(0, 0.5, n)
        for y0, x0, r in zip(cy, cx, radius):
            img += 0.5 * np.exp(-((Y - y0) ** 2 + (X - x0) ** 2) / (2 * r * r))
    else:
        img = np.full((size, size), 0.2)
        img[(Y % period == 0) | (X % period == 0)] = 0.35
        y0, x0 = size / 2 + rng.normal(0, 1.0, 2)
        disc = (Y - y0) ** 2 + (X - x0) ** 2 <= (size * 0.3) ** 2
        img[disc] = 0.75 + 0.05 * np.sin(2 * np.pi * X[disc] / period)
    return _finish(img + noise, channels)


def texture_source(seed: int, size: int = 64, channels: int = 1) -> np.ndarray:
    """Seeded anomaly texture from families disjoint from the normal ones."""
    rng = np.random.default_rng([seed, 1000])
    family = ANOMALY_FAMILIES[int(rng.integers(len(ANOMALY_FAMILIES)))]
    if family == "hf_noise":
        img = rng.uniform(0.0, 1.0, size=(size, size))
    else:
        Y, X = _grid(size, size)
        img = np.full((size, size), float(rng.choice([0.05, 0.95])))
        for _ in range(12):
            y0, x0 = rng.uniform(0, size, 2)
            r = rng.uniform(2, 6)
            img[(Y - y0) ** 2 + (X - x0) ** 2 <= r * r] = rng.choice([0.0, 1.0])
    return _finish(img, channels)


def sample_anomaly_mask(image: np.ndarray, seed: int, periods=(8, 16),
                        threshold: float = PERLIN_THRESHOLD, max_tries: int = 32) -> tuple[np.ndarray, int]:
    """Perlin ∩ foreground mask, retrying derived seeds until it is non-empty.

    Returns the mask and the Perlin seed that produced it.
    """
    h, w = image.shape[-2:]
    fg = foreground_mask(image)
    mask = np.zeros((h, w), dtype=np.uint8)
    perlin_seed = seed
    for attempt in range(max_tries):
        perlin_seed = seed * max_tries + attempt
        period = periods[perlin_seed % len(periods)]
        mask = compose_mask(binarize(perlin_field(perlin_seed, h, w, period), threshold), fg)
        if mask.any():
            break
    return mask, perlin_seed


def perlin_mask_for(perlin_seed: int, shape: tuple[int, int], periods=(8, 16),
                    threshold: float = PERLIN_THRESHOLD) -> np.ndarray:
    period = periods[perlin_seed % len(periods)]
    return binarize(perlin_field(perlin_seed, shape[0], shape[1], period), threshold)


def make_sample(normal: np.ndarray, seed: int, periods=(8, 16)) -> SynthSample:
    """Corrupt ``normal`` with a seeded texture, Perlin footprint and opacity."""
    rng = np.random.default_rng([seed, 7])
    mask, _ = sample_anomaly_mask(normal, seed, periods)
    texture = texture_source(int(rng.integers(2 ** 31)), normal.shape[-1], normal.shape[0])
    opacity = float(rng.uniform(*OPACITY_RANGE))
    return SynthSample(normal, synthesize_anomaly(normal, texture, mask, opacity), mask, seed)
