"""Paired pre/post-transform statistical battery.

Per tensor pair we summarize normality (Shapiro-Wilk W), value range, and
the proportion of entries within [-eps, eps]; the per-pair deltas feed a
one-sided Wilcoxon signed-rank test (H1: median > 0) with Cohen's d_z as
the effect size.  The W statistic uses Royston's approximation of the
optimal coefficients and is valid for sample sizes 3..5000; larger inputs
are subsampled upstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import DegenerateInputError
from .tensor import Seed, Tensor, sample_elements, splitmix64

SHAPIRO_MAX_N = 5000
WILCOXON_EXACT_MAX_N = 25
DEFAULT_EPSILON = 0.05

# Appendix-style sensitivity grid: 0.01 plus 0.1 .. 1.0 in 0.1 steps.
EPS_SWEEP_GRID = (0.01,) + tuple(i / 10 for i in range(1, 11))

_ROYSTON_C1 = (-2.706056, 4.434685, -2.071190, -0.147981, 0.221157)
_ROYSTON_C2 = (-3.582633, 5.682633, -1.752461, -0.293762, 0.042981)


@dataclass(frozen=True)
class PairedSummary:
    """Scalar summaries for one pre/post tensor pair."""

    w_pre: float
    w_post: float
    range_pre: float
    range_post: float
    pband_pre: float
    pband_post: float
    epsilon: float


@dataclass(frozen=True)
class TestResult:
    """One-sided Wilcoxon outcome plus the paired effect size."""

    statistic: float
    p_value: float
    n_effective: int
    d_z: float


@dataclass(frozen=True)
class AnalysisResult:
    """The three paired tests: normality shift, range reduction, band gain."""

    delta_w: TestResult
    delta_r: TestResult
    delta_p: TestResult
    summaries: tuple[PairedSummary, ...]


def _poly(coeffs, x: float) -> float:
    """Evaluate sum(c_k * x^(deg-k)) with a zero constant term."""
    acc = 0.0
    for c in coeffs:
        acc = acc * x + c
    return acc * x


def shapiro_wilk(sample) -> float:
    """Shapiro-Wilk W statistic via Royston's coefficient approximation.

    Returns W in (0, 1]; W = 1 only for a perfectly straight normal Q-Q
    plot.  Valid for 3 <= n <= 5000.
    """
    x = np.sort(np.asarray(sample, dtype=np.float64).reshape(-1))
    n = x.size
    if n < 3:
        raise ValueError(f"Shapiro-Wilk needs n >= 3, got {n}")
    if n > SHAPIRO_MAX_N:
        raise ValueError(f"Shapiro-Wilk supports n <= {SHAPIRO_MAX_N}, got {n}")
    if x[-1] == x[0]:
        raise DegenerateInputError("constant sample has no normality statistic")

    half = n // 2
    inv_cdf = NormalDist().inv_cdf
    # Upper-half Blom scores; the lower half mirrors with negated sign.
    m_upper = np.array(
        [inv_cdf((n - i - 0.375) / (n + 0.25)) for i in range(half)], dtype=np.float64
    )
    ssm = 2.0 * float(np.sum(m_upper**2))

    a_upper = np.empty(half, dtype=np.float64)
    if n == 3:
        a_upper[0] = math.sqrt(0.5)
    else:
        u = 1.0 / math.sqrt(n)
        rs = 1.0 / math.sqrt(ssm)
        a_n = _poly(_ROYSTON_C1, u) + m_upper[0] * rs
        if n > 5:
            a_n1 = _poly(_ROYSTON_C2, u) + m_upper[1] * rs
            phi = (ssm - 2.0 * m_upper[0] ** 2 - 2.0 * m_upper[1] ** 2) / (
                1.0 - 2.0 * a_n**2 - 2.0 * a_n1**2
            )
            a_upper[0] = a_n
            a_upper[1] = a_n1
            a_upper[2:] = m_upper[2:] / math.sqrt(phi)
        else:
            phi = (ssm - 2.0 * m_upper[0] ** 2) / (1.0 - 2.0 * a_n**2)
            a_upper[0] = a_n
            a_upper[1:] = m_upper[1:] / math.sqrt(phi)

    # x is ascending; a_upper pairs with the largest observations.
    upper = x[: n - half - 1 : -1]  # top `half` values, descending
    lower = x[:half]
    num = float(np.dot(a_upper, upper) - np.dot(a_upper, lower))
    den = float(np.sum((x - x.mean()) ** 2))
    w = num * num / den
    return min(w, 1.0)


def eps_band_proportion(x: Tensor, eps: float) -> float:
    """Fraction of elements with |x| <= eps (inclusive)."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return float(np.mean(np.abs(x.array.astype(np.float64)) <= eps))


def tensor_range(x: Tensor) -> float:
    """max(x) - min(x)."""
    arr = x.array.astype(np.float64)
    return float(arr.max() - arr.min())


def _average_ranks(v: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group average."""
    order = np.argsort(v, kind="stable")
    sv = v[order]
    boundary = np.r_[True, sv[1:] != sv[:-1]]
    group = np.cumsum(boundary) - 1
    counts = np.bincount(group)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    group_rank = (2 * starts + counts + 1) / 2.0
    ranks = np.empty(v.size, dtype=np.float64)
    ranks[order] = group_rank[group]
    return ranks


def _exact_upper_tail(ranks2: np.ndarray, w2: int) -> float:
    """P(W+ >= w2/2) by counting sign assignments (doubled-rank DP).

    Doubled average ranks are integers, so the null distribution of the
    doubled statistic is a subset-sum count; exact for n <= 25.
    """
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        r = int(r)  # doubled ranks are >= 2
        counts[r:] = counts[r:] + counts[:-r]
    tail = int(counts[w2:].sum())
    return tail / (1 << ranks2.size)


def wilcoxon_one_sided(deltas) -> TestResult:
    """One-sided Wilcoxon signed-rank test of H1: median(delta) > 0.

    Exact zeros are dropped; |delta| ties get average ranks.  The exact
    null distribution is used up to n_effective = 25, then a normal
    approximation with tie-corrected variance and 0.5 continuity
    correction.  d_z = mean/std (ddof = 1) over the full delta array.
    """
    d = np.asarray(deltas, dtype=np.float64).reshape(-1)
    if d.size < 1:
        raise ValueError("need at least one delta")
    if np.all(d == 0.0):
        raise DegenerateInputError("all deltas are zero")
    sd = float(d.std(ddof=1)) if d.size > 1 else 0.0
    if sd == 0.0:
        raise DegenerateInputError("zero-variance deltas")
    d_z = float(d.mean()) / sd

    nz = d[d != 0.0]
    n = nz.size
    ranks = _average_ranks(np.abs(nz))
    w_plus = float(ranks[nz > 0].sum())

    if n <= WILCOXON_EXACT_MAX_N:
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)
        w2 = int(np.rint(2.0 * w_plus))
        p = _exact_upper_tail(ranks2, w2)
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, counts = np.unique(np.abs(nz), return_counts=True)
        var -= float(np.sum(counts**3 - counts)) / 48.0
        z = (w_plus - mean - 0.5) / math.sqrt(var)
        p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return TestResult(w_plus, min(max(p, 0.0), 1.0), int(n), d_z)


def _derive_seed(seed: Seed, pair_index: int, salt: int) -> Seed:
    _, out = splitmix64((seed.value + 2 * pair_index + salt) & 0xFFFFFFFFFFFFFFFF)
    return Seed(out)


def _padded_range(pre: Tensor, post: Tensor) -> float:
    """Range of the pre tensor right-padded with zeros to the post length."""
    arr = pre.array.astype(np.float64)
    lo = float(arr.min())
    hi = float(arr.max())
    if post.numel > pre.numel:
        lo = min(lo, 0.0)
        hi = max(hi, 0.0)
    return hi - lo


def summarize_pair(
    pre: Tensor,
    post: Tensor,
    eps: float = DEFAULT_EPSILON,
    sample_k: int = SHAPIRO_MAX_N,
    seed: Seed = Seed(0),
    pair_index: int = 0,
) -> PairedSummary:
    """Per-pair scalar summaries: W on a subsample, aligned ranges, band mass."""
    w_pre = shapiro_wilk(
        sample_elements(pre, min(sample_k, pre.numel), _derive_seed(seed, pair_index, 0))
    )
    w_post = shapiro_wilk(
        sample_elements(post, min(sample_k, post.numel), _derive_seed(seed, pair_index, 1))
    )
    return PairedSummary(
        w_pre=w_pre,
        w_post=w_post,
        range_pre=_padded_range(pre, post),
        range_post=tensor_range(post),
        pband_pre=eps_band_proportion(pre, eps),
        pband_post=eps_band_proportion(post, eps),
        epsilon=eps,
    )


def paired_hadamard_analysis(
    pairs,
    eps: float = DEFAULT_EPSILON,
    sample_k: int = SHAPIRO_MAX_N,
    seed: Seed = Seed(0),
) -> AnalysisResult:
    """Run the three paired tests over (pre, post) tensor pairs.

    Deltas are oriented so positive means the transform helped:
    delta_w = W_post - W_pre, delta_r = R_pre - R_post,
    delta_p = pband_post - pband_pre.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 pairs, got {len(pairs)}")
    summaries = tuple(
        summarize_pair(pre, post, eps=eps, sample_k=sample_k, seed=seed, pair_index=j)
        for j, (pre, post) in enumerate(pairs)
    )
    dw = np.array([s.w_post - s.w_pre for s in summaries])
    dr = np.array([s.range_pre - s.range_post for s in summaries])
    dp = np.array([s.pband_post - s.pband_pre for s in summaries])
    return AnalysisResult(
        delta_w=wilcoxon_one_sided(dw),
        delta_r=wilcoxon_one_sided(dr),
        delta_p=wilcoxon_one_sided(dp),
        summaries=summaries,
    )


def eps_sweep(
    pairs,
    eps_values=EPS_SWEEP_GRID,
    seed: Seed = Seed(0),
) -> list[tuple[float, TestResult]]:
    """Re-run the band-proportion test for each eps in the grid.

    Only delta_p depends on eps, so one result row is emitted per eps.
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValueError(f"need at least 2 pairs, got {len(pairs)}")
    abs_pairs = [
        (
            np.abs(pre.array.astype(np.float64)),
            np.abs(post.array.astype(np.float64)),
        )
        for pre, post in pairs
    ]
    results = []
    for eps in eps_values:
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        dp = np.array([float(np.mean(q <= eps) - np.mean(p <= eps)) for p, q in abs_pairs])
        results.append((float(eps), wilcoxon_one_sided(dp)))
    return results
