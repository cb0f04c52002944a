"""Run-quality metrics: steady state, settling time, NRMSE, paired t-test."""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

BAND = 0.2


def steady_state_value(signal) -> float:
    """Mean over the final 20% of samples."""
    x = np.asarray(signal, dtype=float)
    if x.size == 0:
        raise ValueError("empty signal")
    if x.size < 5:
        raise ValueError("steady state needs at least 5 samples")
    n = math.ceil(0.2 * x.size - 1e-12)
    return float(x[-n:].mean())


def settling_time(signal, times, band: float = BAND) -> float:
    """Earliest time after which every sample stays within +-band of the steady state.

    Returns ``inf`` when the final sample itself is out of band (never settles).
    """
    x = np.asarray(signal, dtype=float)
    t = np.asarray(times, dtype=float)
    ss = steady_state_value(x)
    if ss == 0:
        raise ValueError("relative band undefined for zero steady state")
    outside = np.abs(x - ss) > band * abs(ss)
    if not outside.any():
        return float(t[0])
    last = int(np.flatnonzero(outside)[-1])
    if last == x.size - 1:
        return math.inf
    return float(t[last + 1])


def nrmse(signal, times, x_d: float, t_s: float) -> float:
    """Mean of sqrt((x - x_d)^2 / x_d) over samples with t >= t_s."""
    if x_d <= 0:
        raise ValueError("x_d must be positive")
    x = np.asarray(signal, dtype=float)
    t = np.asarray(times, dtype=float)
    sel = t >= t_s
    if not sel.any():
        raise ValueError("no samples after the settling time")
    return float(np.mean(np.abs(x[sel] - x_d)) / math.sqrt(x_d))


def paired_ttest(a, b) -> float:
    """Two-tailed p-value of the paired t-test.

    Zero-variance differences give p = 1 when the mean difference is 0, else p = 0.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = d.mean()
    sd = d.std(ddof=1)
    scale = max(np.abs(a).max(), np.abs(b).max())
    if sd <= 1e-12 * scale or not np.isfinite(sd):
        return 1.0 if mean == 0 else 0.0
    tstat = mean / (sd / math.sqrt(n))
    return float(min(1.0, 2.0 * stats.t.sf(abs(tstat), n - 1)))
