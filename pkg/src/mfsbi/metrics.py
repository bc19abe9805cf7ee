"""Posterior-quality metrics: classifier two-sample test, kernel MMD,
negative log probability of true parameters, normalized RMSE, and
simulation-based calibration ranks.

All metrics are deterministic given their seed. The classifier and the
kernel statistic operate on raw sample arrays; a duck-typed posterior
(sample / log_prob / amortized) is enough for the posterior-facing ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.spatial.distance import pdist

from . import engine as en
from .engine import Adam, Tape, Tensor, backward
from .simulators import simulate_batch
from .training import EarlyStopping

log = logging.getLogger(__name__)

C2ST_MAX_ROWS = 2048       # per-side training cap; larger inputs are subsampled
C2ST_FOLDS = 5
C2ST_HIDDEN = 100
C2ST_VAL_FRACTION = 0.15   # carved out of the train folds, never the test fold
C2ST_PATIENCE = 15
C2ST_MAX_EPOCHS = 400
C2ST_LR = 3e-3
MMD_BANDWIDTH_ROWS = 2048  # subsample cap for the median-distance heuristic
MMD_TILE = 1024
SBC_DEFAULT_L = 99
SBC_DEFAULT_BINS = 20


@dataclass
class MetricResult:
    metric: str
    value: float
    per_observation: list = field(default_factory=list)
    n_samples: int = 0
    seed: int | None = None
    uncertainty: float = float("nan")

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"{self.metric}: non-finite value {self.value}")

    def __float__(self) -> float:
        return float(self.value)


@dataclass
class SbcReport:
    ranks: np.ndarray        # [n_pairs, d] ints in {0..L}
    histogram: np.ndarray    # [d, n_bins], each row sums to n_pairs
    statistics: np.ndarray   # per-dimension chi-square
    p_values: np.ndarray
    statistic: float         # worst-dimension chi-square
    p_value: float           # Bonferroni-combined
    L: int
    n_bins: int

    @property
    def n_pairs(self) -> int:
        return len(self.ranks)


def _two_sample(a, b):
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if len(a) < 100 or len(b) < 100:
        raise ValueError("two-sample metrics need >= 100 rows per set")
    return a, b


def _subsample(arr, n, rng):
    if len(arr) <= n:
        return arr
    return arr[rng.choice(len(arr), size=n, replace=False)]


def _mlp_init(d: int, rng) -> dict:
    def layer(fan_in, fan_out):
        return Tensor(rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in),
                      requires_grad=True)

    return {"W1": layer(d, C2ST_HIDDEN), "b1": Tensor(np.zeros(C2ST_HIDDEN), True),
            "W2": layer(C2ST_HIDDEN, C2ST_HIDDEN), "b2": Tensor(np.zeros(C2ST_HIDDEN), True),
            "W3": layer(C2ST_HIDDEN, 1), "b3": Tensor(np.zeros(1), True)}


def _mlp_logits(params: dict, x: np.ndarray) -> Tensor:
    h = en.tanh(en.add(en.matmul(Tensor(x), params["W1"]), params["b1"]))
    h = en.tanh(en.add(en.matmul(h, params["W2"]), params["b2"]))
    return en.add(en.matmul(h, params["W3"]), params["b3"])


def _bce(logits: Tensor, y_col: np.ndarray) -> Tensor:
    # mean of softplus(z) - y*z, the stable logistic loss
    return en.mean(en.sub(en.softplus(logits), en.mul(Tensor(y_col), logits)))


def _fold_accuracy(x_tr, y_tr, x_va, y_va, x_te, y_te, rng) -> float:
    params = _mlp_init(x_tr.shape[1], rng)
    opt = Adam(params, lr=C2ST_LR)
    stopper = EarlyStopping(C2ST_PATIENCE)
    y_tr_col = y_tr[:, None].astype(np.float64)
    y_va_col = y_va[:, None].astype(np.float64)

    def snapshot():
        return {k: t.data.copy() for k, t in params.items()}

    for _ in range(C2ST_MAX_EPOCHS):
        opt.zero_grad()
        with Tape():
            loss = _bce(_mlp_logits(params, x_tr), y_tr_col)
            backward(loss)
        opt.step()
        val = float(_bce(_mlp_logits(params, x_va), y_va_col).item())
        stopper.update(val, snapshot)
        if stopper.should_stop:
            break
    for name, t in params.items():
        t.data[...] = stopper.best_params[name]
        t.grad = None
    z_te = _mlp_logits(params, x_te).data[:, 0]
    return float(((z_te > 0).astype(np.int64) == y_te).mean())


def c2st(samples_a, samples_b, seed=0, n_max: int = C2ST_MAX_ROWS) -> MetricResult:
    """Mean held-out accuracy of a 2x100 feedforward classifier under 5-fold
    cross-validation on pooled z-scored samples. 0.5 means indistinguishable."""
    a, b = _two_sample(samples_a, samples_b)
    rng = np.random.default_rng(seed)
    cap = min(len(a), len(b), n_max)  # balanced classes keep 0.5 the null level
    a = _subsample(a, cap, rng)
    b = _subsample(b, cap, rng)
    x = np.vstack([a, b])
    y = np.concatenate([np.zeros(len(a), dtype=np.int64),
                        np.ones(len(b), dtype=np.int64)])
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    x = (x - mu) / sd

    accs = []
    for tr, va, te in _partitions(y):
        accs.append(_fold_accuracy(x[tr], y[tr], x[va], y[va], x[te], y[te], rng))
    return MetricResult("c2st", float(np.mean(accs)), per_observation=accs,
                        n_samples=len(x), seed=seed,
                        uncertainty=float(np.std(accs, ddof=1)))


def _partitions(y: np.ndarray):
    """Deterministic class-stratified CV folds with a validation slice carved
    from the train rows of each class. Assignment depends only on within-class
    row positions, so swapping the two sample sets swaps labels but keeps the
    partitions; training is full-batch, so row order never matters."""
    stride = max(2, int(round(1.0 / C2ST_VAL_FRACTION)))
    folds = []
    for f in range(C2ST_FOLDS):
        tr, va, te = [], [], []
        for cls in (0, 1):
            idx = np.where(y == cls)[0]
            pos = np.arange(len(idx))
            te.append(idx[pos % C2ST_FOLDS == f])
            rest = idx[pos % C2ST_FOLDS != f]
            keep = np.ones(len(rest), dtype=bool)
            keep[::stride] = False
            va.append(rest[::stride])
            tr.append(rest[keep])
        folds.append((np.concatenate(tr), np.concatenate(va), np.concatenate(te)))
    return folds


def _median_bandwidth(pooled: np.ndarray, rng) -> float:
    sub = _subsample(pooled, MMD_BANDWIDTH_ROWS, rng)
    h = float(np.median(pdist(sub)))
    return h if h > 0 else 1.0


def _kernel_mean(a: np.ndarray, b: np.ndarray, gamma: float) -> float:
    """Mean Gaussian kernel over all pairs, accumulated in tiles so the full
    n x n matrix is never materialized."""
    total = 0.0
    sq_a = (a * a).sum(axis=1)
    sq_b = (b * b).sum(axis=1)
    for i in range(0, len(a), MMD_TILE):
        ai = a[i:i + MMD_TILE]
        for j in range(0, len(b), MMD_TILE):
            bj = b[j:j + MMD_TILE]
            d2 = sq_a[i:i + MMD_TILE, None] + sq_b[None, j:j + MMD_TILE] \
                - 2.0 * (ai @ bj.T)
            np.maximum(d2, 0.0, out=d2)
            total += float(np.exp(-gamma * d2).sum())
    return total / (len(a) * len(b))


def mmd(samples_a, samples_b, bandwidth_policy="median", seed=0) -> MetricResult:
    """Squared maximum mean discrepancy, biased V-statistic with a Gaussian
    kernel. Identical inputs give exactly 0."""
    a, b = _two_sample(samples_a, samples_b)
    if bandwidth_policy == "median":
        h = _median_bandwidth(np.vstack([a, b]), np.random.default_rng(seed))
    elif isinstance(bandwidth_policy, (int, float)) and bandwidth_policy > 0:
        h = float(bandwidth_policy)
    else:
        raise ValueError(f"unknown bandwidth policy {bandwidth_policy!r}")
    gamma = 1.0 / (2.0 * h * h)
    value = _kernel_mean(a, a, gamma) + _kernel_mean(b, b, gamma) \
        - 2.0 * _kernel_mean(a, b, gamma)
    return MetricResult("mmd", max(value, 0.0), n_samples=len(a) + len(b),
                        seed=seed)


def _normalize_pairs(pairs):
    if isinstance(pairs, tuple) and len(pairs) == 2 and np.ndim(pairs[0]) == 2:
        theta, x = pairs
    else:
        theta = np.stack([np.asarray(t, dtype=np.float64) for t, _ in pairs])
        x = np.stack([np.asarray(xi, dtype=np.float64) for _, xi in pairs])
    theta = np.asarray(theta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if len(theta) != len(x):
        raise ValueError("pairs: theta and x row counts differ")
    if len(theta) == 0:
        raise ValueError("pairs: empty")
    return theta, x


def nltp(posterior, pairs) -> MetricResult:
    """Mean of -log q(theta_o | x_o) over (theta_o, x_o) pairs, in original
    parameter coordinates. Pairs on the support boundary are excluded."""
    theta, x = _normalize_pairs(pairs)
    bounds = getattr(posterior, "bounds", None)
    if bounds is not None:
        lower, upper = bounds
        inside = np.all((theta > lower) & (theta < upper), axis=1)
        if not inside.all():
            log.warning("nltp: excluded %d of %d pairs on or outside the "
                        "support boundary", int((~inside).sum()), len(theta))
            theta, x = theta[inside], x[inside]
    if len(theta) == 0:
        raise ValueError("nltp: no pairs strictly inside the support")
    vals = np.array([-float(posterior.log_prob(theta[i:i + 1], x=x[i])[0])
                     for i in range(len(theta))])
    return MetricResult("nltp", float(vals.mean()), per_observation=vals.tolist(),
                        n_samples=len(vals),
                        uncertainty=float(vals.std(ddof=1) / np.sqrt(len(vals)))
                        if len(vals) > 1 else float("nan"))


def nrmse(posterior_samples, theta_o, prior_range) -> MetricResult:
    """Per-dimension RMSE of samples about theta_o on the half-range scale,
    averaged over dimensions. Uniform samples with theta_o at the box center
    give 2/sqrt(12) = 0.577 per dimension."""
    samples = np.atleast_2d(np.asarray(posterior_samples, dtype=np.float64))
    theta_o = np.asarray(theta_o, dtype=np.float64).ravel()
    rng_ = np.asarray(prior_range, dtype=np.float64).ravel()
    if samples.shape[1] != len(theta_o) or len(theta_o) != len(rng_):
        raise ValueError("nrmse: dimension mismatch")
    if np.any(rng_ <= 0):
        raise ValueError("nrmse: prior range must be positive in every dimension")
    rmse = np.sqrt(((samples - theta_o) ** 2).mean(axis=0))
    per_dim = rmse / (rng_ / 2.0)
    return MetricResult("nrmse", float(per_dim.mean()),
                        per_observation=per_dim.tolist(), n_samples=len(samples))


def ranks_for_pairs(posterior, theta, x, L: int, seed=0) -> np.ndarray:
    """Rank of each theta row per dimension among L posterior draws at its x.
    Ranks lie in {0..L}; a calibrated posterior makes them uniform."""
    if not getattr(posterior, "amortized", False):
        raise ValueError("calibration ranks need an amortized posterior")
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    ranks = np.empty(theta.shape, dtype=np.int64)
    for i in range(len(theta)):
        draws = posterior.sample(L, x=x[i], seed=[int(seed), 7, i])
        ranks[i] = (draws < theta[i]).sum(axis=0)
    return ranks


def sbc_report_from_ranks(ranks: np.ndarray, L: int,
                          n_bins: int = SBC_DEFAULT_BINS) -> SbcReport:
    n_pairs, d = ranks.shape
    n_bins = min(n_bins, L + 1)  # more bins than rank values leaves empties
    bin_of = (np.arange(L + 1) * n_bins) // (L + 1)
    p_bin = np.bincount(bin_of, minlength=n_bins) / (L + 1)
    hist = np.stack([np.bincount(bin_of[ranks[:, k]], minlength=n_bins)
                     for k in range(d)])
    expected = n_pairs * p_bin
    stats_d = ((hist - expected) ** 2 / expected).sum(axis=1)
    p_d = stats.chi2.sf(stats_d, df=n_bins - 1)
    return SbcReport(ranks=ranks, histogram=hist, statistics=stats_d,
                     p_values=p_d, statistic=float(stats_d.max()),
                     p_value=float(min(1.0, d * p_d.min())),
                     L=L, n_bins=n_bins)


def sbc_ranks(posterior, prior, simulator, n_pairs: int = 1000,
              L: int = SBC_DEFAULT_L, seed=0,
              n_bins: int = SBC_DEFAULT_BINS) -> SbcReport:
    """Simulation-based calibration: rank each prior draw among L posterior
    draws at its own simulation, then test rank uniformity per dimension by
    chi-square over n_bins (Bonferroni-combined p-value)."""
    if not getattr(posterior, "amortized", False):
        raise ValueError("simulation-based calibration needs an amortized "
                         "posterior; sequential posteriors are conditioned on "
                         "one observation")
    ds = simulate_batch(simulator, prior, n_pairs, seed=seed)
    ranks = ranks_for_pairs(posterior, ds.theta, ds.x, L, seed)
    return sbc_report_from_ranks(ranks, L, n_bins)
