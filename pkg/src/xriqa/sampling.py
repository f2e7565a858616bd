"""Stratified, diversity-enforcing selection of study images from large pools.

Each draw walks the attributes in a fresh random order, picks a uniformly
random non-empty level at each attribute, filters the pool down, and finally
picks one survivor uniformly. Selection is level-uniform rather than
item-uniform, which is what enforces diversity. Draws are without
replacement. Randomness comes from numpy's PCG64 seeded through
SeedSequence(seed).spawn(...), one child stream per draw.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ImageRecord

ASPECT_RANGE = (1.315, 1.785)
UNKNOWN_LEVEL = "unknown"


def normalized_favorites(favorites: int, views: int) -> float:
    """Popularity prior ln(F+e)/ln(V+e); equals 1 when F == V."""
    if favorites < 0 or views < 0:
        raise ValueError("favorites and views must be >= 0")
    return math.log(favorites + math.e) / math.log(views + math.e)


def quantize_equal_bins(scores, k: int, scale: tuple[float, float] = (1.0, 100.0)) -> list[int]:
    """Bin scores into k equal-length bins over the declared scale.

    Bin index is floor(k * (s - lo) / (hi - lo)) clamped to [0, k-1]; bins
    cover the declared scale, not the empirical range of the data.
    """
    if k < 1:
        raise ValueError("bin count k must be >= 1")
    lo, hi = scale
    if hi <= lo:
        raise ValueError("scale must satisfy lo < hi")
    out = []
    for s in scores:
        b = math.floor(k * (s - lo) / (hi - lo))
        out.append(min(max(b, 0), k - 1))
    return out


def admissible(record: ImageRecord, min_w: int = 2048, min_h: int = 1536) -> bool:
    """Large enough for the top tier and within the studied aspect-ratio band."""
    if record.native_width < min_w or record.native_height < min_h:
        return False
    return ASPECT_RANGE[0] <= record.aspect_ratio <= ASPECT_RANGE[1]


@dataclass
class AttributeSpace:
    attributes: list[str]
    levels: dict[str, set[str]] = field(default_factory=dict)

    @classmethod
    def from_pool(cls, pool: list[ImageRecord]) -> "AttributeSpace":
        names = sorted({a for r in pool for a in r.attributes})
        levels: dict[str, set[str]] = {a: set() for a in names}
        for r in pool:
            for a in names:
                levels[a].add(r.attributes.get(a, UNKNOWN_LEVEL))
        return cls(attributes=names, levels=levels)

    @staticmethod
    def level_of(record: ImageRecord, attribute: str) -> str:
        return record.attributes.get(attribute, UNKNOWN_LEVEL)


def stratified_sample(pool: list[ImageRecord], space: AttributeSpace,
                      n: int, seed: int) -> list[str]:
    """Draw n distinct image ids, stratifying over the attribute space."""
    if n > len(pool):
        raise ValueError(f"cannot draw {n} images from a pool of {len(pool)}")
    remaining = list(pool)
    chosen: list[str] = []
    streams = np.random.SeedSequence(seed).spawn(n)
    for draw in range(n):
        if not remaining:
            raise ValueError(f"pool exhausted after {draw} draws")
        rng = np.random.default_rng(streams[draw])
        subset = remaining
        order = rng.permutation(len(space.attributes))
        for ai in order:
            attr = space.attributes[ai]
            present = sorted({space.level_of(r, attr) for r in subset})
            level = present[rng.integers(len(present))]
            subset = [r for r in subset if space.level_of(r, attr) == level]
        pick = subset[rng.integers(len(subset))]
        chosen.append(pick.id)
        remaining = [r for r in remaining if r.id != pick.id]
    return chosen
