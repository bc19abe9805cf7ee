"""Prior distributions over simulator parameters.

Every prior exposes a finite bounding box (`lower`, `upper`) because the
density estimator operates in a logit-transformed box; unbounded families are
therefore truncated to an explicit domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats


@dataclass
class BoxUniform:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower/upper must be 1-D and same shape")
        if not np.all(np.isfinite(self.lower)) or not np.all(np.isfinite(self.upper)):
            raise ValueError("uniform prior bounds must be finite")
        if np.any(self.upper <= self.lower):
            raise ValueError("upper must exceed lower in every dimension")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def sample(self, n: int, rng) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def inside(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        return np.all((theta > self.lower) & (theta < self.upper), axis=1)

    def log_density(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        out = np.full(len(theta), -np.log(self.upper - self.lower).sum())
        out[~self.inside(theta)] = -np.inf
        return out


@dataclass
class _TruncatedIndependent:
    """Product of independent 1-D scipy distributions truncated to a box.

    Sampling is by inverse CDF restricted to [F(lo), F(hi)] per dimension, so
    draws never leave the box and no rejection loop is needed.
    """

    dists: list
    lower: np.ndarray
    upper: np.ndarray
    _cdf_lo: np.ndarray = field(init=False)
    _cdf_hi: np.ndarray = field(init=False)

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if len(self.dists) != len(self.lower):
            raise ValueError("one distribution per dimension required")
        self._cdf_lo = np.array([d.cdf(lo) for d, lo in zip(self.dists, self.lower)])
        self._cdf_hi = np.array([d.cdf(hi) for d, hi in zip(self.dists, self.upper)])
        if np.any(self._cdf_hi - self._cdf_lo <= 0):
            raise ValueError("truncation box carries no probability mass")

    @property
    def dim(self) -> int:
        return len(self.lower)

    def sample(self, n: int, rng) -> np.ndarray:
        u = rng.uniform(size=(n, self.dim))
        cols = []
        for j, d in enumerate(self.dists):
            q = self._cdf_lo[j] + u[:, j] * (self._cdf_hi[j] - self._cdf_lo[j])
            cols.append(d.ppf(q))
        theta = np.stack(cols, axis=1)
        return np.clip(theta, self.lower, self.upper)

    def inside(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=1)

    def log_density(self, theta) -> np.ndarray:
        theta = np.atleast_2d(theta)
        out = np.zeros(len(theta))
        for j, d in enumerate(self.dists):
            out += d.logpdf(theta[:, j]) - np.log(self._cdf_hi[j] - self._cdf_lo[j])
        out[~self.inside(theta)] = -np.inf
        return out


def truncated_lognormal(log_mean, log_std, lower, upper) -> _TruncatedIndependent:
    log_mean = np.atleast_1d(np.asarray(log_mean, dtype=np.float64))
    log_std = np.atleast_1d(np.asarray(log_std, dtype=np.float64))
    dists = [stats.lognorm(s=s, scale=np.exp(m)) for m, s in zip(log_mean, log_std)]
    return _TruncatedIndependent(dists, np.broadcast_to(lower, log_mean.shape).copy(),
                                 np.broadcast_to(upper, log_mean.shape).copy())


def truncated_normal(mean, std, lower, upper) -> _TruncatedIndependent:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    std = np.atleast_1d(np.asarray(std, dtype=np.float64))
    dists = [stats.norm(loc=m, scale=s) for m, s in zip(mean, std)]
    return _TruncatedIndependent(dists, np.broadcast_to(lower, mean.shape).copy(),
                                 np.broadcast_to(upper, mean.shape).copy())
