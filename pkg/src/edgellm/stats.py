"""Small statistics helpers shared by the report tooling and the test suite."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# two-sided 95% Student-t quantiles for tiny samples; ~1.96 beyond the table
_T95 = {2: 12.706, 3: 4.303, 4: 3.182, 5: 2.776, 6: 2.571, 7: 2.447, 8: 2.365,
        9: 2.306, 10: 2.262, 15: 2.145, 20: 2.093, 30: 2.045}


def _norm_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


@dataclass
class MannKendall:
    s: int
    z: float
    p_increasing: float  # one-sided p-value against "trend is increasing"
    p_decreasing: float

    @property
    def increasing_at_5pct(self) -> bool:
        return self.p_increasing < 0.05

    @property
    def decreasing_at_5pct(self) -> bool:
        return self.p_decreasing < 0.05


def mann_kendall(series: Sequence[float]) -> MannKendall:
    """Nonparametric Mann-Kendall trend test with tie correction."""
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n < 3:
        return MannKendall(0, 0.0, 1.0, 1.0)
    sign = np.sign(x[None, :] - x[:, None])
    s = int(np.triu(sign, k=1).sum())

    _, counts = np.unique(x, return_counts=True)
    tie_term = int(np.sum(counts * (counts - 1) * (2 * counts + 5)))
    var_s = (n * (n - 1) * (2 * n + 5) - tie_term) / 18.0
    if var_s <= 0:
        return MannKendall(s, 0.0, 1.0, 1.0)
    if s > 0:
        z = (s - 1) / math.sqrt(var_s)
    elif s < 0:
        z = (s + 1) / math.sqrt(var_s)
    else:
        z = 0.0
    return MannKendall(s, z, 1.0 - _norm_cdf(z), _norm_cdf(z))


def mean_ci95(values: Sequence[float]) -> tuple[float, float]:
    """Sample mean and 95% confidence half-width (Student t)."""
    v = np.asarray(values, dtype=float)
    n = len(v)
    if n == 0:
        return float("nan"), float("nan")
    mean = float(v.mean())
    if n == 1:
        return mean, 0.0
    sd = float(v.std(ddof=1))
    t = _T95.get(n)
    if t is None:
        t = min((tv for nn, tv in _T95.items() if nn >= n), default=1.96)
    return mean, t * sd / math.sqrt(n)
