"""Quadratic mapping of legacy single-resolution scores onto tier scales.

A seeded holdout is reserved before fitting; the reported gains are the
fractional error reduction of the fitted map over the identity map on that
holdout. Mapped scores are clamped to [1, 100].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .data import SCALE_MIN, SCALE_MAX


@dataclass
class QuadMap:
    tier: str
    c0: float
    c1: float
    c2: float
    fit_n: int
    holdout_mae_gain: float
    holdout_mse_gain: float

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, path: str | Path) -> "QuadMap":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _gain(err_mapped: float, err_identity: float) -> float:
    if err_identity == 0.0:
        return 0.0  # cannot improve on a perfect identity
    return 1.0 - err_mapped / err_identity


def fit_quadratic(pairs, tier: str = "M", holdout: int = 70, seed: int = 0) -> QuadMap:
    """Least-squares m(s) = c0 + c1*s + c2*s^2 from (legacy, target) pairs.

    `holdout` pairs are reserved by a seeded uniform split and used only to
    measure the MAE/MSE improvement of the map over the identity.
    """
    pairs = np.asarray(pairs, dtype=np.float64)
    if pairs.ndim != 2 or pairs.shape[1] != 2:
        raise ValueError("pairs must be an (n, 2) array of (legacy, target)")
    n = len(pairs)
    if n < holdout + 3:
        raise ValueError(f"need at least holdout + 3 = {holdout + 3} pairs, got {n}")
    if np.all(pairs[:, 0] == pairs[0, 0]):
        raise ValueError("all legacy scores identical; quadratic fit is rank-deficient")

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    test_idx, fit_idx = perm[:holdout], perm[holdout:]
    xf, yf = pairs[fit_idx, 0], pairs[fit_idx, 1]
    design = np.stack([np.ones_like(xf), xf, xf * xf], axis=1)
    coef, *_ = np.linalg.lstsq(design, yf, rcond=None)
    c0, c1, c2 = (float(c) for c in coef)
    qmap = QuadMap(tier=tier, c0=c0, c1=c1, c2=c2, fit_n=len(fit_idx),
                   holdout_mae_gain=0.0, holdout_mse_gain=0.0)

    if holdout > 0:
        xt, yt = pairs[test_idx, 0], pairs[test_idx, 1]
        mapped = apply_map(qmap, xt)
        qmap.holdout_mae_gain = _gain(float(np.mean(np.abs(mapped - yt))),
                                      float(np.mean(np.abs(xt - yt))))
        qmap.holdout_mse_gain = _gain(float(np.mean((mapped - yt) ** 2)),
                                      float(np.mean((xt - yt) ** 2)))
    return qmap


def apply_map(qmap: QuadMap, scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    mapped = qmap.c0 + qmap.c1 * s + qmap.c2 * s * s
    return np.clip(mapped, SCALE_MIN, SCALE_MAX)
