"""Two-sample Student t statistic with pooled (equal) variances."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats


def pooled_t_statistic(a, b) -> float:
    """t for the difference of means ``mean(a) - mean(b)``.

    Returns NaN when either sample has fewer than two values. Identical
    means give 0 even when both variances vanish; different means with zero
    spread give +-inf.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        return math.nan
    diff = a.mean() - b.mean()
    if diff == 0:
        return 0.0
    if a.var() == 0 and b.var() == 0:
        return math.copysign(math.inf, diff)
    return float(stats.ttest_ind(a, b, equal_var=True).statistic)
