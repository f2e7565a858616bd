"""Deterministic content preparation: 4:3 center crops and Lanczos-3 pyramids.

Rasters are float64 arrays shaped (height, width, channels) with samples in
[0, 1]. 8-bit sources are mapped to [0, 1] without gamma linearization.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import ResolutionTier, TIER_NAMES

LANCZOS_LOBES = 3


@dataclass
class Raster:
    samples: np.ndarray  # (h, w, c) float64 in [0, 1]

    def __post_init__(self):
        a = np.asarray(self.samples, dtype=np.float64)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"raster must be (h, w, 1|3), got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("raster contains non-finite samples")
        self.samples = a

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]

    @property
    def geometry(self) -> tuple[int, int]:
        return (self.width, self.height)


def load_raster(path: str | Path) -> Raster:
    """Read a PNG or JPEG into a [0, 1] raster (grayscale kept single-channel)."""
    with Image.open(path) as img:
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if img.mode not in ("1", "I;16", "LA") else "L")
        arr = np.asarray(img, dtype=np.float64) / 255.0
    return Raster(arr)


def save_raster_png(raster: Raster, path: str | Path) -> None:
    arr = np.clip(np.rint(raster.samples * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        img = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        img = Image.fromarray(arr, mode="RGB")
    img.save(path, format="PNG")


def to_grayscale(raster: Raster) -> Raster:
    if raster.channels == 1:
        return raster
    # Rec. 601 luma weights
    gray = raster.samples @ np.array([0.299, 0.587, 0.114])
    return Raster(gray[:, :, None])


def crop_to_4_3(img: Raster) -> Raster:
    """Largest centered crop with exact 4:3 ratio, width a multiple of 4."""
    k = min(img.width // 4, img.height // 3)
    if k == 0:
        raise ValueError(f"image {img.width}x{img.height} is smaller than 4x3")
    w, h = 4 * k, 3 * k
    x0 = (img.width - w) // 2
    y0 = (img.height - h) // 2
    return Raster(img.samples[y0:y0 + h, x0:x0 + w, :].copy())


def _lanczos_kernel(x: np.ndarray, lobes: int = LANCZOS_LOBES) -> np.ndarray:
    out = np.sinc(x) * np.sinc(x / lobes)
    out[np.abs(x) >= lobes] = 0.0
    return out


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-sample taps for one axis.

    Output centers map to source coordinates x = (j + 0.5) * n_in/n_out - 0.5.
    For downscaling the kernel is stretched by the scale factor so it acts as
    an anti-aliasing low-pass. Tap indices are clamped to the valid range
    (border replication) and tap weights are normalized to sum to 1.
    Returns (indices, weights), both shaped (n_out, taps).
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    support = LANCZOS_LOBES * stretch
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    left = np.ceil(centers - support).astype(int)
    taps = int(np.floor(2 * support)) + 1
    idx = left[:, None] + np.arange(taps)[None, :]
    w = _lanczos_kernel((idx - centers[:, None]) / stretch)
    w /= w.sum(axis=1, keepdims=True)
    return np.clip(idx, 0, n_in - 1), w


def lanczos_resample(img: Raster, out_w: int, out_h: int) -> Raster:
    """Separable Lanczos-3 resampling to out_w x out_h, clipped to [0, 1]."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output geometry must be >= 1x1")
    data = img.samples
    if out_h != img.height:
        idx, w = _axis_weights(img.height, out_h)
        data = np.einsum("ot,otwc->owc", w, data[idx])
    if out_w != img.width:
        idx, w = _axis_weights(img.width, out_w)
        data = np.einsum("ot,hotc->hoc", w, data[:, idx])
    return Raster(np.clip(data, 0.0, 1.0))


@dataclass
class Pyramid:
    tiers: dict[str, Raster]

    def __getitem__(self, name: str) -> Raster:
        return self.tiers[name]


def build_pyramid(crop: Raster, tiers: dict[str, ResolutionTier]) -> Pyramid:
    """Resample each tier directly from the crop (never cascaded from a
    larger tier). The crop must cover the largest requested tier."""
    largest = max(tiers.values(), key=lambda t: t.width)
    if crop.width < largest.width or crop.height < largest.height:
        raise ValueError(
            f"crop {crop.width}x{crop.height} is smaller than tier "
            f"{largest.name} ({largest.width}x{largest.height})")
    out = {}
    for name in TIER_NAMES:
        if name not in tiers:
            continue
        tier = tiers[name]
        if crop.geometry == tier.geometry:
            out[name] = Raster(crop.samples.copy())
        else:
            out[name] = lanczos_resample(crop, tier.width, tier.height)
    return Pyramid(tiers=out)
