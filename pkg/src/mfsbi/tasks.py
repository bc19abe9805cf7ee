"""Task registry: one place that wires each benchmark problem to its
prior, low/high-fidelity simulator pair, estimator architecture, and
reference-posterior recipe.

Parameter boxes are shared across fidelities (the low-fidelity
simulator reinterprets coordinates internally where needed), so a
pretrained estimator can be cloned into the high-fidelity one without
any box surgery.
"""

from __future__ import annotations

import hashlib
import logging

import numpy as np

from .flow import Architecture
from .priors import BoxUniform, truncated_lognormal
from .reference import (ou_exact_loglik, rejection_sample, sir_resample,
                        slcp_loglik)
from . import simulators as sims

log = logging.getLogger(__name__)

TASK_NAMES = ("ou2", "ou3", "ou4", "ou2-perturbed", "slcp", "sir", "blob")

# ABC-kernel scale used for the deterministic-ODE reference weights
SIR_KERNEL_BANDWIDTH = 0.02
DEFAULT_N_PROP = 10_000
MAX_N_PROP = 2_560_000


class Task:
    def __init__(self, name, prior, lf, hf, arch, reference_method=None,
                 loglik=None):
        self.name = name
        self.prior = prior
        self.lf = lf
        self.hf = hf
        self.arch = arch
        self.reference_method = reference_method  # "rejection" | "sir" | None
        self.loglik = loglik

    @property
    def theta_dim(self) -> int:
        return self.prior.dim


def _ou_prior(dim: int) -> BoxUniform:
    lower = [sims.OU_PRIOR_LOW[k] for k in sims.OU_PARAM_NAMES[:dim]]
    upper = [sims.OU_PRIOR_HIGH[k] for k in sims.OU_PARAM_NAMES[:dim]]
    return BoxUniform(np.array(lower), np.array(upper))


def _ou_loglik(dim: int):
    fixed = [sims.OU_FIXED[k] for k in sims.OU_PARAM_NAMES[dim:]]

    def loglik(theta, x_o):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        full = np.empty((len(theta), 4))
        full[:, :dim] = theta
        full[:, dim:] = fixed
        return ou_exact_loglik(full, x_o)

    return loglik


def _sir_kernel_loglik(simulator, bandwidth: float):
    """Gaussian-kernel pseudo-likelihood for a deterministic simulator."""

    def loglik(theta, x_o):
        x = simulator.simulate(np.atleast_2d(theta), None)
        d = x - np.asarray(x_o, dtype=np.float64).ravel()[None, :]
        return -0.5 * np.sum(d * d, axis=1) / bandwidth ** 2

    return loglik


def get_task(name: str, delta: float = 0.0, invert: bool = False,
             sir_points: int = 10,
             sir_bandwidth: float = SIR_KERNEL_BANDWIDTH) -> Task:
    """Build a registry entry; delta/invert apply to ou2-perturbed only."""
    if name in ("ou2", "ou3", "ou4"):
        dim = int(name[2])
        free = sims.OU_PARAM_NAMES[:dim]
        return Task(name, _ou_prior(dim), sims.OuLow(theta_dim=dim),
                    sims.OuHigh(free=free),
                    Architecture(theta_dim=dim, x_shape=(10,)),
                    reference_method="rejection", loglik=_ou_loglik(dim))
    if name == "ou2-perturbed":
        return Task(name, _ou_prior(2),
                    sims.OuPerturbedLow(delta=delta, invert=invert),
                    sims.OuHigh(free=("mu", "sigma")),
                    Architecture(theta_dim=2, x_shape=(10,)),
                    reference_method="rejection", loglik=_ou_loglik(2))
    if name == "slcp":
        prior = BoxUniform(np.full(5, -3.0), np.full(5, 3.0))
        return Task(name, prior, sims.SlcpLow(), sims.SlcpHigh(),
                    Architecture(theta_dim=5, x_shape=(8,)),
                    reference_method="sir", loglik=slcp_loglik)
    if name == "sir":
        prior = truncated_lognormal([np.log(0.4), np.log(0.125)], [0.5, 0.2],
                                    0.001, 3.0)
        hf = sims.SirHigh(n_points=sir_points)
        return Task(name, prior, sims.SirLow(n_points=sir_points), hf,
                    Architecture(theta_dim=2, x_shape=(sir_points,)),
                    reference_method="sir",
                    loglik=_sir_kernel_loglik(hf, sir_bandwidth))
    if name == "blob":
        prior = BoxUniform(np.array([0.0, 0.0, 0.2]),
                           np.array([256.0, 256.0, 2.0]))
        return Task(name, prior, sims.BlobLow(), sims.BlobHigh(),
                    Architecture(theta_dim=3, x_shape=(256, 256),
                                 embedding="conv"),
                    reference_method=None, loglik=None)
    raise ValueError(f"unknown task {name!r}; choose from {TASK_NAMES}")


def observations(task: Task, n_obs: int, seed):
    """(theta_o, x_o) pairs drawn from the prior through the HF simulator."""
    ds = sims.simulate_batch(task.hf, task.prior, n_obs, seed)
    return ds.theta, ds.x


def observation_id(x_o) -> str:
    """Stable content hash used to key reference-posterior caches."""
    x = np.ascontiguousarray(np.asarray(x_o, dtype=np.float64))
    return hashlib.sha256(x.tobytes()).hexdigest()[:16]


def reference_posterior(task: Task, x_o, n: int, seed,
                        n_prop: int = DEFAULT_N_PROP, method=None):
    """Reference samples for tasks with a tractable (or kernel) likelihood.

    method defaults to the task's registered one; tasks without any
    reference (blob) direct the caller to sample-free metrics.
    """
    method = method or task.reference_method
    if method is None or task.loglik is None:
        raise ValueError(
            f"task {task.name!r} has no tractable likelihood for reference "
            "posteriors; evaluate with nltp/nrmse instead")
    if method == "rejection":
        ref = rejection_sample(task.loglik, task.prior, x_o, n, seed)
    elif method == "sir":
        # sharply peaked likelihoods (some slcp observations) need far
        # more proposals than the default; escalate until the ESS guard
        # passes rather than failing outright
        n_prop = max(n_prop, n)
        while True:
            try:
                ref = sir_resample(task.loglik, task.prior, x_o, n_prop, n,
                                   seed)
                break
            except RuntimeError:
                if n_prop >= MAX_N_PROP:
                    raise
                n_prop = min(4 * n_prop, MAX_N_PROP)
                log.warning("degenerate importance weights; retrying with "
                            "%d proposals", n_prop)
    else:
        raise ValueError(f"unknown reference method {method!r}")
    ref.task = task.name
    return ref
