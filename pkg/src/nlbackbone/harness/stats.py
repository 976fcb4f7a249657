"""Monte Carlo summaries and goodness-of-fit tests."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

__all__ = ["mean_se", "proportion_se", "chi_square_fit", "within_se"]


def mean_se(samples) -> tuple:
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two samples")
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def proportion_se(successes: int, n: int) -> tuple:
    p = successes / n
    return p, math.sqrt(p * (1 - p) / n)


def chi_square_fit(observed, expected_probs, min_expected: float = 5.0) -> tuple:
    """Pearson chi-square of counts against probabilities.

    Cells with expected count below ``min_expected`` are pooled into one
    cell.  Returns ``(statistic, dof, p_value)``.
    """
    obs = np.asarray(observed, dtype=float)
    p = np.asarray(expected_probs, dtype=float)
    p = p / p.sum()
    exp = obs.sum() * p
    small = exp < min_expected
    if small.any():
        obs = np.append(obs[~small], obs[small].sum())
        exp = np.append(exp[~small], exp[small].sum())
        if exp[-1] == 0:
            obs, exp = obs[:-1], exp[:-1]
    if obs.size < 2:
        return 0.0, 0, 1.0
    stat, pval = stats.chisquare(obs, exp)
    return float(stat), int(obs.size - 1), float(pval)


def within_se(estimate: float, target: float, se: float, k: float = 3.0) -> bool:
    return abs(estimate - target) <= k * se
