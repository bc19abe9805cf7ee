"""Benchmark simulators at two fidelities, plus batch generation with an
invalid-sample replacement policy.

Every simulator is a pure function of (theta, rng): identical parameters and
seed give bitwise-identical output. Batch generation is chunked with
per-chunk derived seeds so results do not depend on how chunks are scheduled
across workers.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .data import FidelityDataset

OU_PARAM_NAMES = ("mu", "sigma", "gamma", "mu_offset")
OU_FIXED = {"gamma": 0.5, "mu_offset": 3.0}
OU_PRIOR_LOW = {"mu": 0.1, "sigma": 0.1, "gamma": 0.1, "mu_offset": 0.0}
OU_PRIOR_HIGH = {"mu": 3.0, "sigma": 0.6, "gamma": 1.0, "mu_offset": 4.0}
# 10 evenly spaced indices into the 101-point trace
OU_SUBSAMPLE_IDX = np.arange(10) * 11
OU_DT = 0.1
OU_N_STEPS = 100


class Simulator:
    task: str = ""
    fidelity: int = 1
    theta_dim: int = 0
    x_shape: tuple = ()

    def simulate(self, theta: np.ndarray, rng) -> np.ndarray:
        raise NotImplementedError

    def one(self, theta, seed) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return self.simulate(np.atleast_2d(np.asarray(theta, dtype=np.float64)), rng)[0]


def ou_trace_batch(mu, sigma, gamma, mu_offset, rng, dt=OU_DT, n_steps=OU_N_STEPS):
    """Euler-Maruyama traces, one row per parameter set, n_steps+1 columns."""
    mu, sigma, gamma, mu_offset = np.broadcast_arrays(mu, sigma, gamma, mu_offset)
    n = len(mu)
    out = np.empty((n, n_steps + 1))
    out[:, 0] = mu + mu_offset + rng.standard_normal(n)
    noise = rng.standard_normal((n_steps, n))
    sq = sigma * np.sqrt(dt)
    for t in range(n_steps):
        x = out[:, t]
        out[:, t + 1] = x + gamma * (mu - x) * dt + sq * noise[t]
    return out


def _expand_ou_theta(theta, free):
    cols = {}
    for j, name in enumerate(free):
        cols[name] = theta[:, j]
    for name in OU_PARAM_NAMES:
        if name not in cols:
            cols[name] = np.full(len(theta), OU_FIXED[name])
    return cols["mu"], cols["sigma"], cols["gamma"], cols["mu_offset"]


class OuHigh(Simulator):
    """OU process observed through 10 evenly spaced trace subsamples."""

    fidelity = 1
    x_shape = (10,)

    def __init__(self, free=("mu", "sigma"), dt=OU_DT, n_steps=OU_N_STEPS):
        if tuple(free) != OU_PARAM_NAMES[:len(free)]:
            raise ValueError(f"free params must be a prefix of {OU_PARAM_NAMES}")
        self.free = tuple(free)
        self.theta_dim = len(free)
        self.dt = dt
        self.n_steps = n_steps
        self.task = f"ou{len(free)}"

    def simulate(self, theta, rng):
        mu, sigma, gamma, mu_offset = _expand_ou_theta(theta, self.free)
        traces = ou_trace_batch(mu, sigma, gamma, mu_offset, rng,
                                dt=self.dt, n_steps=self.n_steps)
        return traces[:, OU_SUBSAMPLE_IDX]


class OuLow(Simulator):
    """10 i.i.d. Gaussian draws with mean mu and std sigma.

    theta may carry extra columns (dummy dimensions for the OU3/OU4 variants);
    only the first two are used.
    """

    fidelity = 0
    x_shape = (10,)

    def __init__(self, theta_dim=2):
        self.theta_dim = theta_dim
        self.task = f"ou{theta_dim}"

    def simulate(self, theta, rng):
        mu = theta[:, 0][:, None]
        sigma = theta[:, 1][:, None]
        return mu + sigma * rng.standard_normal((len(theta), 10))


def reverse_summary(x: np.ndarray) -> np.ndarray:
    """Coordinate-reversal involution on summary vectors."""
    return np.ascontiguousarray(x[..., ::-1])


class OuPerturbedLow(Simulator):
    """OU simulation with per-draw Gaussian noise on sigma and an optional
    coordinate reversal; delta = 0 without reversal reduces exactly to OuHigh."""

    fidelity = 0
    x_shape = (10,)

    def __init__(self, delta=0.0, invert=False, free=("mu", "sigma")):
        if delta < 0:
            raise ValueError("delta must be >= 0")
        self.delta = float(delta)
        self.invert = bool(invert)
        self.free = tuple(free)
        self.theta_dim = len(free)
        self.task = f"ou{len(free)}-perturbed"

    def simulate(self, theta, rng):
        mu, sigma, gamma, mu_offset = _expand_ou_theta(theta, self.free)
        if self.delta > 0:
            sigma = sigma + self.delta * rng.standard_normal(len(theta))
            sigma = np.maximum(sigma, 0.01)
        traces = ou_trace_batch(mu, sigma, gamma, mu_offset, rng)
        x = traces[:, OU_SUBSAMPLE_IDX]
        return reverse_summary(x) if self.invert else x


def slcp_moments(theta: np.ndarray):
    """Mean vector and covariance factors (s1, s2, rho) per row."""
    theta = np.atleast_2d(theta)
    m = theta[:, :2]
    s1 = theta[:, 2] ** 2
    s2 = theta[:, 3] ** 2
    rho = np.tanh(theta[:, 4])
    return m, s1, s2, rho


class SlcpHigh(Simulator):
    """Four draws from a 2-D Gaussian whose mean and covariance are simple
    transforms of a 5-D parameter, concatenated to an 8-vector."""

    fidelity = 1
    theta_dim = 5
    x_shape = (8,)
    task = "slcp"
    fix_mean = False

    def simulate(self, theta, rng):
        m, s1, s2, rho = slcp_moments(theta)
        if self.fix_mean:
            m = np.zeros_like(m)
        n = len(theta)
        z = rng.standard_normal((n, 4, 2))
        # lower Cholesky factor of [[s1^2, rho s1 s2], [rho s1 s2, s2^2]]
        L = np.zeros((n, 2, 2))
        L[:, 0, 0] = s1
        L[:, 1, 0] = rho * s2
        L[:, 1, 1] = s2 * np.sqrt(np.maximum(1.0 - rho ** 2, 0.0))
        x = m[:, None, :] + np.einsum("nij,nkj->nki", L, z)
        out = x.reshape(n, 8)
        bad = (s1 < 1e-12) | (s2 < 1e-12)
        out[bad] = np.nan  # degenerate covariance, replaced by the batch policy
        return out


class SlcpLow(SlcpHigh):
    """Same family with the mean pinned to zero; theta[0:2] are dummies."""

    fidelity = 0
    fix_mean = True


SIR_N = 1e6
SIR_T = 160.0
SIR_RK4_STEP = 0.1


def _rk4(f, y0, h, n_steps, big_n, keep_idx=None):
    """Fixed-step RK4; returns states at keep_idx (default: every step)."""
    if keep_idx is None:
        keep_idx = np.arange(n_steps + 1)
    keep = set(int(i) for i in keep_idx)
    y = y0.copy()
    states = {0: y.copy()} if 0 in keep else {}
    for step in range(1, n_steps + 1):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.any(y < -1e-9 * big_n):
            raise RuntimeError("SIR integration produced negative compartments; "
                               "reduce the step size")
        np.maximum(y, 0.0, out=y)
        if step in keep:
            states[step] = y.copy()
    return np.stack([states[int(i)] for i in keep_idx], axis=1)


class SirHigh(Simulator):
    """Deterministic 3-compartment epidemic ODE; summary is I/N at 10 evenly
    spaced times (a 50-point variant is available for the raw-trace framing)."""

    fidelity = 1
    theta_dim = 2
    task = "sir"

    def __init__(self, n_points=10):
        if n_points not in (10, 50):
            raise ValueError("n_points must be 10 or 50")
        self.n_points = n_points
        self.x_shape = (n_points,)

    def _integrate(self, beta, gamma, keep_idx=None):
        n = len(beta)
        y0 = np.zeros((n, 3))
        y0[:, 0] = SIR_N - 1.0
        y0[:, 1] = 1.0

        def rhs(y):
            s, i = y[:, 0], y[:, 1]
            inf = beta * s * i / SIR_N
            rec = gamma * i
            return np.stack([-inf, inf - rec, rec], axis=1)

        n_steps = int(round(SIR_T / SIR_RK4_STEP))
        return _rk4(rhs, y0, SIR_RK4_STEP, n_steps, SIR_N, keep_idx)

    def _summary_idx(self):
        per = int(round(SIR_T / SIR_RK4_STEP / self.n_points))
        return np.arange(1, self.n_points + 1) * per

    def simulate(self, theta, rng=None):
        beta, gamma = theta[:, 0], theta[:, 1]
        states = self._integrate(beta, gamma, self._summary_idx())
        return states[:, :, 1] / SIR_N

    def trajectories(self, theta):
        return self._integrate(theta[:, 0], theta[:, 1])


class SirLow(SirHigh):
    """Epidemic model without the recovered compartment: only S and I are
    integrated (recovery still removes mass from I)."""

    fidelity = 0

    def _integrate(self, beta, gamma, keep_idx=None):
        n = len(beta)
        y0 = np.zeros((n, 2))
        y0[:, 0] = SIR_N - 1.0
        y0[:, 1] = 1.0

        def rhs(y):
            s, i = y[:, 0], y[:, 1]
            inf = beta * s * i / SIR_N
            return np.stack([-inf, inf - gamma * i], axis=1)

        n_steps = int(round(SIR_T / SIR_RK4_STEP))
        return _rk4(rhs, y0, SIR_RK4_STEP, n_steps, SIR_N, keep_idx)


BLOB_COUNT = 255
BLOB_HF_SIZE = 256
BLOB_LF_SIZE = 32
BLOB_HF_SIGMA = 12.0
BLOB_LF_SIGMA = 2.0


def blob_probability(size: int, x_off, y_off, contrast, sigma) -> np.ndarray:
    """Per-pixel success probability 0.9 - 0.8 exp(-0.5 (r/sigma^2)^contrast),
    r the squared distance to the blob center; batched over parameter rows."""
    x_off = np.atleast_1d(x_off)[:, None, None]
    y_off = np.atleast_1d(y_off)[:, None, None]
    contrast = np.atleast_1d(contrast)[:, None, None]
    rows = np.arange(size, dtype=np.float64)[None, :, None]
    cols = np.arange(size, dtype=np.float64)[None, None, :]
    r = (cols - x_off) ** 2 + (rows - y_off) ** 2
    return 0.9 - 0.8 * np.exp(-0.5 * (r / sigma ** 2) ** contrast)


class BlobHigh(Simulator):
    """256x256 binomial-count image of a dark blob; theta = (x_off, y_off,
    contrast)."""

    fidelity = 1
    theta_dim = 3
    x_shape = (BLOB_HF_SIZE, BLOB_HF_SIZE)
    task = "blob"

    def simulate(self, theta, rng):
        p = blob_probability(BLOB_HF_SIZE, theta[:, 0], theta[:, 1], theta[:, 2],
                             BLOB_HF_SIGMA)
        return rng.binomial(BLOB_COUNT, p).astype(np.float64)


class BlobLow(Simulator):
    """32x32 render bilinearly upsampled to 256x256.

    theta is stored at high-fidelity scale; offsets are divided by 8 before
    rendering so both fidelities condition on the same coordinates.
    """

    fidelity = 0
    theta_dim = 3
    x_shape = (BLOB_HF_SIZE, BLOB_HF_SIZE)
    task = "blob"

    def simulate(self, theta, rng):
        scale = BLOB_HF_SIZE // BLOB_LF_SIZE
        p = blob_probability(BLOB_LF_SIZE, theta[:, 0] / scale, theta[:, 1] / scale,
                             theta[:, 2], BLOB_LF_SIGMA)
        small = rng.binomial(BLOB_COUNT, p).astype(np.float64)
        out = np.empty((len(theta), BLOB_HF_SIZE, BLOB_HF_SIZE))
        for i in range(len(theta)):
            out[i] = ndimage.zoom(small[i], scale, order=1, grid_mode=True,
                                  mode="nearest")
        return out


CHUNK_SIZE = 1000
_INVALID_WINDOW = 1000


def simulate_batch(simulator: Simulator, source, n: int, seed,
                   chunk_size: int = CHUNK_SIZE) -> FidelityDataset:
    """Draw theta from `source` (anything with .sample(n, rng)) and simulate
    exactly n valid rows; rows with non-finite output are replaced by fresh
    draws from the same source.

    Chunks use independently derived rng streams, so the output is identical
    however chunks are distributed over workers.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    thetas, xs = [], []
    replacements = 0
    for chunk_idx, start in enumerate(range(0, n, chunk_size)):
        m = min(chunk_size, n - start)
        rng = np.random.default_rng([_seed_int(seed), chunk_idx])
        theta = source.sample(m, rng)
        x = simulator.simulate(theta, rng)
        draws, invalid = m, 0
        while True:
            bad = ~np.isfinite(x.reshape(len(x), -1)).all(axis=1)
            n_bad = int(bad.sum())
            if n_bad == 0:
                break
            invalid += n_bad
            # 3-sigma margin so a fair-coin failure rate does not trip the guard
            if draws >= _INVALID_WINDOW and \
                    invalid > 0.5 * draws + 3.0 * np.sqrt(0.25 * draws):
                raise RuntimeError(
                    f"over 50% invalid simulations ({invalid}/{draws} draws); "
                    "task looks misconfigured")
            theta_new = source.sample(n_bad, rng)
            theta[bad] = theta_new
            x[bad] = simulator.simulate(theta_new, rng)
            draws += n_bad
            replacements += n_bad
        thetas.append(theta)
        xs.append(x)
    theta = np.vstack(thetas)
    x = np.concatenate(xs, axis=0)
    prov = {"task": simulator.task, "fidelity": simulator.fidelity,
            "simulator": type(simulator).__name__, "seed": _seed_int(seed),
            "n": n, "replacements": replacements, "calls": n + replacements}
    return FidelityDataset(simulator.fidelity, theta, x, prov)


def _seed_int(seed) -> int:
    return int(seed)
