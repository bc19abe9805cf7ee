"""Ground-truth posterior samplers.

The OU observation likelihood is exact for the 10-point summary: the process
is Markov, so the summary's density is the initial Gaussian times the
transition density at the summary spacing. Rejection sampling uses an
empirical log-likelihood bound (max over prior draws plus a safety margin)
and restarts with a raised bound if any proposal exceeds it, which keeps the
output exact for any valid bound.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# spacing of the observed OU summary: 11 Euler steps of 0.1
OU_DT_EFFECTIVE = 1.1


def ou_transition_moments(mu, gamma, sigma, x_prev, dt):
    """Mean and variance of X_{t+dt} | X_t = x_prev (exact OU transition)."""
    g = (1.0 - np.exp(-2.0 * gamma * dt)) / gamma
    one_minus = 1.0 - gamma * g
    if np.any(one_minus < 0):
        raise ValueError("invalid transition: 1 - gamma*g < 0")
    decay = np.sqrt(one_minus)  # equals exp(-gamma dt)
    mean = mu - decay * (mu - x_prev)
    var = g * sigma ** 2 / 2.0
    return mean, var


def ou_exact_loglik(theta, x, dt_effective=OU_DT_EFFECTIVE) -> np.ndarray:
    """Log-likelihood of observed points x under the OU process.

    theta rows are (mu, sigma, gamma, mu_offset); returns one value per row.
    The initial point is N(mu + mu_offset, 1); consecutive points use the
    exact transition at dt_effective.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64).ravel()
    if len(x) < 1:
        raise ValueError("need at least one observed point")
    mu, sigma, gamma = theta[:, 0], theta[:, 1], theta[:, 2]
    mu_offset = theta[:, 3]
    if np.any(gamma <= 0) or np.any(sigma <= 0):
        raise ValueError("sigma and gamma must be positive")
    ll = -0.5 * np.log(2 * np.pi) - 0.5 * (x[0] - (mu + mu_offset)) ** 2
    if len(x) > 1:
        g = (1.0 - np.exp(-2.0 * gamma * dt_effective)) / gamma
        assert np.all(1.0 - gamma * g >= 0)
        decay = np.exp(-gamma * dt_effective)
        resid = (mu[:, None] - x[None, 1:]) - \
            decay[:, None] * (mu[:, None] - x[None, :-1])
        var2 = (g * sigma ** 2)[:, None]  # twice the transition variance
        ll = ll + np.sum(-0.5 * np.log(np.pi * var2) - resid ** 2 / var2, axis=1)
    return ll


def slcp_loglik(theta, x_o) -> np.ndarray:
    """Exact log-likelihood of the 8-vector observation: four independent
    bivariate Gaussian draws with mean (theta_1, theta_2) and covariance from
    (theta_3^2, theta_4^2, tanh(theta_5))."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    pts = np.asarray(x_o, dtype=np.float64).reshape(4, 2)
    m1, m2 = theta[:, 0], theta[:, 1]
    s1 = theta[:, 2] ** 2
    s2 = theta[:, 3] ** 2
    rho = np.tanh(theta[:, 4])
    v1, v2 = s1 ** 2, s2 ** 2
    cov = rho * s1 * s2
    det = v1 * v2 - cov ** 2
    ll = np.zeros(len(theta))
    for k in range(4):
        d1 = pts[k, 0] - m1
        d2 = pts[k, 1] - m2
        quad = (v2 * d1 ** 2 - 2 * cov * d1 * d2 + v1 * d2 ** 2) / det
        ll += -np.log(2 * np.pi) - 0.5 * np.log(det) - 0.5 * quad
    return ll


@dataclass
class ReferenceSampleSet:
    task: str
    method: str  # "rejection" | "sir"
    samples: np.ndarray
    x_o: np.ndarray
    n_proposals: int
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.x_o = np.asarray(self.x_o, dtype=np.float64)


def rejection_sample(loglik_fn, prior, x_o, n: int, seed,
                     bound_margin: float = 2.0, bound_draws: int = 100000,
                     block: int = 100000, bound=None) -> ReferenceSampleSet:
    """Exact posterior samples by rejection: accept theta ~ prior with
    probability exp(loglik - M), M an empirical bound. A bound violation
    raises M and restarts collection so accepted draws stay exact.

    Pass `bound` to reuse a known log-likelihood bound instead of estimating
    one; any valid bound leaves the output distribution unchanged.
    """
    rng = np.random.default_rng(seed)
    if bound is not None:
        m_bound = float(bound)
    else:
        m_bound = float(np.max(loglik_fn(prior.sample(bound_draws, rng), x_o))) \
            + bound_margin
    while True:
        accepted = []
        n_acc = 0
        draws = 0
        observed_max = -np.inf
        restart = False
        while n_acc < n:
            theta = prior.sample(block, rng)
            ll = loglik_fn(theta, x_o)
            observed_max = max(observed_max, float(ll.max()))
            if observed_max > m_bound:
                log.warning("rejection bound violated (%.3f > %.3f); restarting "
                            "with a raised bound", observed_max, m_bound)
                m_bound = observed_max + bound_margin
                restart = True
                break
            keep = rng.uniform(size=block) < np.exp(ll - m_bound)
            accepted.append(theta[keep])
            n_acc += int(keep.sum())
            draws += block
            if draws >= 1_000_000 and n_acc / draws < 1e-7:
                raise RuntimeError(
                    f"rejection acceptance rate {n_acc / draws:.2e} below 1e-7; "
                    "use importance resampling instead")
        if not restart:
            break
    samples = np.vstack(accepted)[:n]
    return ReferenceSampleSet(
        task="", method="rejection", samples=samples, x_o=np.asarray(x_o),
        n_proposals=draws,
        diagnostics={"acceptance": n_acc / draws, "bound": m_bound,
                     "observed_max": observed_max})


def sir_resample(loglik_fn, prior, x_o, n_prop: int, n_out: int,
                 seed) -> ReferenceSampleSet:
    """Sampling-importance-resampling: weight prior draws by likelihood and
    resample with replacement. ESS = (sum w)^2 / sum w^2."""
    if n_prop < n_out:
        raise ValueError("n_prop must be >= n_out")
    rng = np.random.default_rng(seed)
    theta = prior.sample(n_prop, rng)
    ll = loglik_fn(theta, x_o)
    w = np.exp(ll - ll.max())
    ess = w.sum() ** 2 / np.sum(w ** 2)
    if ess < 10:
        raise RuntimeError(f"degenerate importance weights (ESS={ess:.2f} < 10)")
    idx = rng.choice(n_prop, size=n_out, replace=True, p=w / w.sum())
    return ReferenceSampleSet(
        task="", method="sir", samples=theta[idx], x_o=np.asarray(x_o),
        n_proposals=n_prop, diagnostics={"ess": float(ess)})


def save_reference(ref: ReferenceSampleSet, path) -> None:
    header = {"task": ref.task, "method": ref.method,
              "n_proposals": ref.n_proposals, "diagnostics": ref.diagnostics,
              "x_o": ref.x_o.tolist(), "dim": ref.samples.shape[1]}
    with open(path, "w") as f:
        f.write("# " + json.dumps(header) + "\n")
        np.savetxt(f, ref.samples, delimiter=",", fmt="%.17g")


def load_reference(path) -> ReferenceSampleSet:
    with open(path) as f:
        first = f.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing header line")
        header = json.loads(first[1:])
        samples = np.loadtxt(f, delimiter=",", ndmin=2)
    return ReferenceSampleSet(task=header["task"], method=header["method"],
                              samples=samples, x_o=np.array(header["x_o"]),
                              n_proposals=header["n_proposals"],
                              diagnostics=header["diagnostics"])
