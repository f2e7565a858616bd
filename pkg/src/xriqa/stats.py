"""Reliability statistics and label-shift analysis.

Rank correlation uses tie-averaged ranks. The opinion-variance fit follows
the SOS hypothesis: var = a * (mos - vmin) * (vmax - mos), with the single
coefficient estimated by zero-intercept least squares and its confidence
interval by a seeded percentile bootstrap over images. ICC(1,1) is the
one-way random-effects single-score model, valid for unbalanced panels.
The signed-rank test enumerates the exact null for small n and falls back
to a tie- and continuity-corrected normal approximation above that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import MosTable, RatingEvent, TIER_ORDER

WILCOXON_EXACT_MAX_N = 25


def average_ranks(x) -> np.ndarray:
    """Ranks 1..n with ties sharing the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def plcc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("plcc needs two equal-length vectors of length >= 2")
    xd, yd = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xd * xd).sum()), np.sqrt((yd * yd).sum())
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined for a constant vector")
    return float((xd * yd).sum() / (sx * sy))


def srcc(x, y) -> float:
    """Spearman rank correlation: Pearson on tie-averaged ranks."""
    return plcc(average_ranks(x), average_ranks(y))


def rmse(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("rmse needs equal-length vectors")
    return float(np.sqrt(np.mean((x - y) ** 2)))


def mae(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("mae needs equal-length vectors")
    return float(np.mean(np.abs(x - y)))


@dataclass
class InterRaterSrcc:
    values: list[float]
    pairs: list[tuple[str, str]]

    @property
    def median(self) -> float | None:
        return float(np.median(self.values)) if self.values else None


def inter_rater_srcc(events: list[RatingEvent], tier: str,
                     min_common: int = 8) -> InterRaterSrcc:
    """Pairwise SRCCs between participants over co-rated images at one tier.

    Repetitions are averaged per participant before correlating. Pairs with
    fewer than min_common shared images, or with a constant score vector,
    are skipped.
    """
    scores: dict[str, dict[str, list[float]]] = {}
    for ev in events:
        if ev.tier != tier:
            continue
        scores.setdefault(ev.participant_id, {}).setdefault(ev.image_id, []).append(ev.value)
    per_rater = {
        pid: {img: sum(v) / len(v) for img, v in imgs.items()}
        for pid, imgs in scores.items()
    }
    raters = sorted(per_rater)
    values, pairs = [], []
    for i in range(len(raters)):
        for j in range(i + 1, len(raters)):
            a, b = per_rater[raters[i]], per_rater[raters[j]]
            common = sorted(set(a) & set(b))
            if len(common) < min_common:
                continue
            va = [a[img] for img in common]
            vb = [b[img] for img in common]
            try:
                values.append(srcc(va, vb))
            except ValueError:
                continue  # constant vector: undefined, skip the pair
            pairs.append((raters[i], raters[j]))
    return InterRaterSrcc(values=values, pairs=pairs)


@dataclass
class SosFit:
    a: float
    ci95: tuple[float, float]
    scale: tuple[float, float]
    n_images: int


def sos_fit(mos_table: MosTable, bootstrap_n: int = 1000, seed: int = 0,
            scale: tuple[float, float] = (1.0, 100.0)) -> SosFit:
    """Fit var = a * (mos - vmin) * (vmax - mos) over images with n >= 2."""
    vmin, vmax = scale
    rows = [r for r in mos_table.rows if r.n >= 2]
    if len(rows) < 3:
        raise ValueError("sos_fit needs at least 3 images with n >= 2 raters")
    x = np.array([(r.mos - vmin) * (vmax - r.mos) for r in rows])
    v = np.array([r.var for r in rows])
    sxx = float((x * x).sum())
    if sxx == 0.0:
        raise ValueError("all MOS at scale endpoints; SOS coefficient undefined")
    a = float((v * x).sum() / sxx)

    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(rows), size=(bootstrap_n, len(rows)))
    num = (v[idx] * x[idx]).sum(axis=1)
    den = (x[idx] ** 2).sum(axis=1)
    boots = num[den > 0.0] / den[den > 0.0]
    lo, hi = np.percentile(boots, [2.5, 97.5])
    # percentile CIs can exclude the point estimate on tiny samples
    return SosFit(a=a, ci95=(min(float(lo), a), max(float(hi), a)),
                  scale=scale, n_images=len(rows))


@dataclass
class IccResult:
    icc: float
    msb: float
    msw: float
    k0: float


def icc_1_1(ratings_by_image: list[list[float]]) -> IccResult:
    """ICC(1,1) for unbalanced panels: ratings_by_image[i] holds all ratings
    image i received, one per participant."""
    groups = [np.asarray(g, dtype=np.float64) for g in ratings_by_image if len(g) > 0]
    n_img = len(groups)
    if n_img < 2:
        raise ValueError("icc_1_1 needs at least 2 images")
    k = np.array([len(g) for g in groups], dtype=np.float64)
    if np.all(k == 1):
        raise ValueError("icc_1_1 needs some image with >= 2 ratings (msw undefined)")
    total = np.concatenate(groups)
    grand = total.mean()
    means = np.array([g.mean() for g in groups])
    ssw = sum(float(((g - g.mean()) ** 2).sum()) for g in groups)
    msw = ssw / float((k - 1).sum())
    msb = float((k * (means - grand) ** 2).sum()) / (n_img - 1)
    k0 = float((k.sum() - (k ** 2).sum() / k.sum()) / (n_img - 1))
    if msb == 0.0 and msw == 0.0:
        return IccResult(icc=0.0, msb=0.0, msw=0.0, k0=k0)
    icc = (msb - msw) / (msb + (k0 - 1.0) * msw)
    return IccResult(icc=float(icc), msb=msb, msw=msw, k0=k0)


@dataclass
class TestResult:
    statistic: float
    p_value: float
    method: str  # "exact" | "normal_approx"


def _norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def wilcoxon_signed_rank(x, y) -> TestResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped. |d| is ranked with tie averaging and
    W = min(W+, W-). The p-value is exact (full null enumeration via dynamic
    programming over rank sums) for n <= 25 nonzero pairs, otherwise a normal
    approximation with tie and continuity corrections.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 1:
        raise ValueError("wilcoxon needs two equal-length vectors of length >= 1")
    d = x - y
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        return TestResult(statistic=0.0, p_value=1.0, method="exact")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if n <= WILCOXON_EXACT_MAX_N:
        # distribution of 2*W+ over the 2^n sign assignments, by convolution
        scaled = np.rint(ranks * 2).astype(int)
        total = int(scaled.sum())
        counts = np.zeros(total + 1, dtype=np.float64)
        counts[0] = 1.0
        for r in scaled:
            nxt = counts.copy()
            nxt[r:] += counts[:total + 1 - r]
            counts = nxt
        w2 = int(round(2 * w))
        p = 2.0 * counts[:w2 + 1].sum() / counts.sum()
        return TestResult(statistic=w, p_value=min(p, 1.0), method="exact")

    mu = n * (n + 1) / 4.0
    tie_counts = np.unique(np.abs(d), return_counts=True)[1]
    var = (n * (n + 1) * (2 * n + 1) - float((tie_counts ** 3 - tie_counts).sum()) / 2.0) / 24.0
    z = (w - mu + 0.5) / math.sqrt(var)
    p = 2.0 * _norm_cdf(z)
    return TestResult(statistic=w, p_value=min(max(p, 0.0), 1.0), method="normal_approx")


MOS_HIST_EDGES = np.arange(1.0, 102.0, 2.0)  # 2-point-wide bins over [1, 101]


def label_shift_report(mos_table: MosTable) -> dict:
    """Per tier pair: SRCC, scatter points over common images, Wilcoxon p;
    per tier: MOS histogram with 2-point-wide bins. Machine-readable."""
    by_tier = mos_table.by_tier()
    tiers = sorted(by_tier, key=TIER_ORDER.get)
    if len(tiers) < 2:
        raise ValueError("label_shift_report needs at least 2 tiers")

    histograms = {}
    for t in tiers:
        values = [row.mos for row in by_tier[t].values()]
        counts, edges = np.histogram(values, bins=MOS_HIST_EDGES)
        histograms[t] = {"edges": edges.tolist(), "counts": counts.tolist()}

    pairs = []
    for i in range(len(tiers)):
        for j in range(i + 1, len(tiers)):
            ta, tb = tiers[i], tiers[j]
            common = sorted(set(by_tier[ta]) & set(by_tier[tb]))
            a = [by_tier[ta][img].mos for img in common]
            b = [by_tier[tb][img].mos for img in common]
            try:
                rho = srcc(a, b)
            except ValueError:
                rho = None
            test = wilcoxon_signed_rank(a, b)
            pairs.append({
                "tier_a": ta,
                "tier_b": tb,
                "n": len(common),
                "srcc": rho,
                "wilcoxon_p": test.p_value,
                "wilcoxon_method": test.method,
                "scatter": [
                    {"image_id": img, "mos_a": ai, "mos_b": bi}
                    for img, ai, bi in zip(common, a, b)
                ],
            })
    return {"tiers": tiers, "histograms": histograms, "pairs": pairs}
