"""Multifidelity rejection ABC baseline.

Each prior draw is first screened with the cheap low-fidelity simulator:
the low-fidelity distance to the observation gives a tentative accept
``a_L``. The expensive high-fidelity simulator then runs only with
probability ``eta1`` (after a tentative accept) or ``eta2`` (after a
tentative reject), and an inverse-probability correction keeps the
weighted particle set unbiased for plain rejection ABC at the
high-fidelity threshold:

    w = a_L + (a_H - a_L) / eta_chosen   if the HF run happened
    w = a_L                              otherwise

so weights may be negative. With eta = (1, 1) the correction cancels
particle by particle and the run reduces exactly to single-fidelity
rejection ABC.

Distances are Euclidean on z-scored summaries; the per-coordinate scale
comes from a pilot run of the low-fidelity simulator on prior draws.
Only the scale matters: the centering offset cancels inside x - x_o.

Randomness is split into one derived stream per role (pilot, theta,
LF noise, HF noise, continuation uniforms), each re-derived per batch.
`run_rejection_abc` consumes only the theta and HF streams with the
same batching, which is what makes the eta = (1, 1) reduction bitwise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_EPS = (1.0, 1.0)
DEFAULT_ETA = (0.9, 0.3)
DEFAULT_BATCH = 1000
N_PILOT = 10_000

# stream ids for per-batch derived rngs
_S_PILOT, _S_THETA, _S_LF, _S_HF, _S_U = 0, 1, 2, 3, 4


@dataclass
class MfAbcConfig:
    """Hyperparameters: acceptance thresholds per fidelity and
    continuation probabilities after a tentative accept/reject."""

    eps: tuple = DEFAULT_EPS
    eta: tuple = DEFAULT_ETA
    batch_size: int = DEFAULT_BATCH
    n_pilot: int = N_PILOT

    def __post_init__(self):
        self.eps = (float(self.eps[0]), float(self.eps[1]))
        self.eta = (float(self.eta[0]), float(self.eta[1]))
        if len(self.eps) != 2 or min(self.eps) <= 0:
            raise ValueError("eps must be two positive thresholds (eps_l, eps_h)")
        if len(self.eta) != 2 or not all(0 < e <= 1 for e in self.eta):
            raise ValueError("eta components must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_pilot < 2:
            raise ValueError("n_pilot must be >= 2")


@dataclass
class ParticleSet:
    """Weighted particles; hf_run marks the fidelity path per particle
    (False = LF screen only, True = LF + HF)."""

    theta: np.ndarray
    weights: np.ndarray
    hf_run: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.hf_run = np.asarray(self.hf_run, dtype=bool)
        if self.theta.ndim != 2:
            raise ValueError("theta must be 2-D (n, theta_dim)")
        n = len(self.theta)
        if self.weights.shape != (n,) or self.hf_run.shape != (n,):
            raise ValueError("weights and hf_run must be 1-D of length len(theta)")
        if not np.isfinite(self.weights).all():
            raise ValueError("weights must be finite")

    def __len__(self):
        return len(self.theta)


def _flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(len(x), -1)


def _pilot_scale(prior, lf_simulator, n_pilot: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _S_PILOT])
    theta = prior.sample(n_pilot, rng)
    x = _flat(lf_simulator.simulate(theta, rng))
    scale = x.std(axis=0)
    # constant summary coordinates carry no information; leave them unscaled
    return np.where(scale < 1e-12, 1.0, scale)


def _distances(x, x_o_flat, scale) -> np.ndarray:
    z = (_flat(x) - x_o_flat) / scale
    return np.sqrt(np.sum(z * z, axis=1))


def run_mf_abc(prior, lf_simulator, hf_simulator, x_o, n_particles: int,
               config: MfAbcConfig | None = None, seed: int = 0) -> ParticleSet:
    """Weighted multifidelity rejection ABC.

    Returns every prior draw with its weight and fidelity path; use
    `resample_particles` to turn the set into unweighted posterior
    samples. meta records the pilot scale and HF budget actually spent.
    """
    if config is None:
        config = MfAbcConfig()
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    seed = int(seed)
    eps_l, eps_h = config.eps
    eta1, eta2 = config.eta

    scale = _pilot_scale(prior, lf_simulator, config.n_pilot, seed)
    x_o_flat = np.asarray(x_o, dtype=np.float64).reshape(1, -1)
    if x_o_flat.shape[1] != scale.shape[0]:
        raise ValueError("x_o dimension does not match the simulator summaries")

    thetas, weights, ran = [], [], []
    n_hf = n_lf_accept = 0
    for batch_idx, start in enumerate(range(0, n_particles, config.batch_size)):
        m = min(config.batch_size, n_particles - start)
        rng_theta = np.random.default_rng([seed, _S_THETA, batch_idx])
        rng_lf = np.random.default_rng([seed, _S_LF, batch_idx])
        rng_hf = np.random.default_rng([seed, _S_HF, batch_idx])
        rng_u = np.random.default_rng([seed, _S_U, batch_idx])

        theta = prior.sample(m, rng_theta)
        x_l = lf_simulator.simulate(theta, rng_lf)
        a_l = _distances(x_l, x_o_flat, scale) <= eps_l
        eta_chosen = np.where(a_l, eta1, eta2)
        run = rng_u.uniform(size=m) < eta_chosen

        w = a_l.astype(np.float64)
        if run.any():
            x_h = hf_simulator.simulate(theta[run], rng_hf)
            a_h = (_distances(x_h, x_o_flat, scale) <= eps_h).astype(np.float64)
            w[run] += (a_h - w[run]) / eta_chosen[run]

        thetas.append(theta)
        weights.append(w)
        ran.append(run)
        n_hf += int(run.sum())
        n_lf_accept += int(a_l.sum())

    weights = np.concatenate(weights)
    if not np.any(weights != 0):
        raise RuntimeError(
            "all particle weights are zero; no draw passed either acceptance "
            "threshold, try larger eps")
    meta = {"algorithm": "mf-abc", "n_particles": n_particles, "n_hf": n_hf,
            "hf_fraction": n_hf / n_particles, "n_lf_accept": n_lf_accept,
            "eps": config.eps, "eta": config.eta, "seed": seed,
            "batch_size": config.batch_size, "scale": scale}
    log.info("mf-abc: %d particles, %d HF calls (%.1f%%), sum(w)=%.1f",
             n_particles, n_hf, 100.0 * n_hf / n_particles, weights.sum())
    return ParticleSet(np.vstack(thetas), weights, np.concatenate(ran), meta)


def run_rejection_abc(prior, hf_simulator, x_o, n_particles: int,
                      eps_h: float, seed: int = 0,
                      batch_size: int = DEFAULT_BATCH,
                      scale=None) -> ParticleSet:
    """Single-fidelity rejection ABC on the same theta and HF noise
    streams as `run_mf_abc`; weights are plain 0/1 acceptances.

    `scale` is the z-scoring vector (e.g. meta["scale"] of a
    multifidelity run); defaults to no scaling.
    """
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    if eps_h <= 0:
        raise ValueError("eps_h must be positive")
    seed = int(seed)
    x_o_flat = np.asarray(x_o, dtype=np.float64).reshape(1, -1)
    if scale is None:
        scale = np.ones(x_o_flat.shape[1])

    thetas, weights = [], []
    for batch_idx, start in enumerate(range(0, n_particles, batch_size)):
        m = min(batch_size, n_particles - start)
        rng_theta = np.random.default_rng([seed, _S_THETA, batch_idx])
        rng_hf = np.random.default_rng([seed, _S_HF, batch_idx])
        theta = prior.sample(m, rng_theta)
        x_h = hf_simulator.simulate(theta, rng_hf)
        thetas.append(theta)
        weights.append((_distances(x_h, x_o_flat, scale) <= eps_h)
                       .astype(np.float64))

    weights = np.concatenate(weights)
    meta = {"algorithm": "rejection-abc", "n_particles": n_particles,
            "n_hf": n_particles, "hf_fraction": 1.0, "eps_h": float(eps_h),
            "seed": seed, "batch_size": batch_size, "scale": np.asarray(scale)}
    return ParticleSet(np.vstack(thetas), weights,
                       np.ones(n_particles, dtype=bool), meta)


def resample_particles(particles: ParticleSet, n_out: int, seed=0) -> np.ndarray:
    """Multinomial resampling proportional to max(weight, 0).

    Negative weights are part of the unbiased estimator but cannot be
    resampled; their total is logged as a bias diagnostic.
    """
    if n_out < 1:
        raise ValueError("n_out must be >= 1")
    w = particles.weights
    if w.sum() <= 0:
        raise ValueError("total particle weight must be positive; try larger eps")
    neg = w[w < 0].sum()
    if neg < 0:
        log.warning("resample: dropping negative weight mass %.4g "
                    "(%.2f%% of positive mass)", neg,
                    100.0 * -neg / w[w > 0].sum())
    pos = np.maximum(w, 0.0)
    idx = np.random.default_rng(seed).choice(len(w), size=n_out, p=pos / pos.sum())
    return particles.theta[idx]
