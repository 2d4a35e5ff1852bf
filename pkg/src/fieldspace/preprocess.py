"""Per-variable percentile scaling fitted on training data."""
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted


@dataclass(frozen=True)
class NormStats:
    variable: str
    p01: float
    p99: float

    def __post_init__(self):
        if not (np.isfinite(self.p01) and np.isfinite(self.p99)) or self.p99 <= self.p01:
            raise ValueError(f"degenerate percentiles for {self.variable!r}: "
                             f"p01={self.p01}, p99={self.p99}")

    def to_dict(self, prefix="norm"):
        return {f"{prefix}.{self.variable}.p01": self.p01,
                f"{prefix}.{self.variable}.p99": self.p99}

    @classmethod
    def from_dict(cls, d, variable, prefix="norm"):
        return cls(variable, float(d[f"{prefix}.{variable}.p01"]),
                   float(d[f"{prefix}.{variable}.p99"]))


def fit_percentiles(values, variable=""):
    """1st/99th percentiles with linear interpolation between closest ranks."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ValueError("training values must be non-empty and finite")
    if np.unique(v).size < 2:
        raise ValueError("need at least two distinct values")
    p01, p99 = np.percentile(v, [1.0, 99.0], method="linear")
    return NormStats(variable, float(p01), float(p99))


def scale(x, stats):
    """``(x - p01) / (p99 - p01)``; values are not clipped."""
    return (np.asarray(x, dtype=np.float64) - stats.p01) / (stats.p99 - stats.p01)


def unscale(y, stats):
    return np.asarray(y, dtype=np.float64) * (stats.p99 - stats.p01) + stats.p01


class PercentileScaler(TransformerMixin, BaseEstimator):
    """Percentile scaler for a single variable.

    All training samples are pooled into one pair of percentiles (no
    per-pixel statistics), so the transform is a single affine map.
    """

    def __init__(self, variable=""):
        self.variable = variable

    def fit(self, X, y=None):
        self.stats_ = fit_percentiles(X, self.variable)
        return self

    @classmethod
    def from_stats(cls, stats):
        obj = cls(stats.variable)
        obj.stats_ = stats
        return obj

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return scale(X, self.stats_)

    def inverse_transform(self, X):
        check_is_fitted(self, "stats_")
        return unscale(X, self.stats_)
