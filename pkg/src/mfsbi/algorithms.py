"""Inference procedures: NPE, multifidelity NPE via transfer learning, the
multi-level chain, truncated sequential variants, and the ensemble-variance
acquisition loop.

Multifidelity training is pretrain-clone-finetune: the estimator is trained
to early stopping on low-fidelity data, its weights are copied into a fresh
estimator, and that copy is trained to early stopping on high-fidelity data
with a fresh optimizer. No weights are frozen at any stage. Every training
stage standardizes x on its own training split (the cloned standardizer is
discarded before fine-tuning), so features keep unit scale in the regime the
stage actually sees.

Seed derivation: round r of a sequential run fine-tunes with seed
(config.seed + 7919 * (r - 1)) and simulates with round_seed(config.seed, r),
so a one-round run with an untruncated proposal reproduces the plain
multifidelity run exactly.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import FidelityDataset
from .flow import Architecture, build_estimator, clone_weights
from .simulators import simulate_batch
from .training import TrainConfig, train

log = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6
DEFAULT_ROUNDS = 5
DEFAULT_ENSEMBLE = 5
DEFAULT_B_FRACTION = 0.2
HPR_N_MC = 10000
_SEED_STRIDE = 7919  # prime stride between per-round training seeds


def round_seed(seed: int, r: int) -> int:
    """Seed for round r's simulation draws (r starts at 1)."""
    return int(seed) * 100003 + (r - 1)


@dataclass
class Posterior:
    estimator: object
    prior: object
    x_o: np.ndarray | None = None  # None marks an amortized posterior
    meta: dict = field(default_factory=dict)

    @property
    def amortized(self) -> bool:
        return self.x_o is None

    @property
    def bounds(self):
        return self.estimator.box.lower, self.estimator.box.upper

    def _resolve_x(self, x):
        if self.amortized:
            if x is None:
                raise ValueError("amortized posterior: pass the observation x")
            return x
        if x is None:
            return self.x_o
        if not np.array_equal(np.asarray(x, dtype=np.float64).ravel(),
                              self.x_o.ravel()):
            raise ValueError("posterior is conditioned on a fixed observation; "
                             "evaluation at a different x is not amortized")
        return self.x_o

    def sample(self, n: int, x=None, seed=0) -> np.ndarray:
        return self.estimator.sample(n, self._resolve_x(x), seed)

    def log_prob(self, theta, x=None) -> np.ndarray:
        return self.estimator.log_prob(theta, self._resolve_x(x))


class EnsemblePosterior:
    """Uniform mixture of architecturally identical estimators."""

    def __init__(self, estimators, prior, x_o=None, meta=None):
        if len(estimators) < 2:
            raise ValueError("ensemble needs at least 2 members")
        archs = [getattr(e, "arch", None) for e in estimators]
        if archs[0] is not None and any(a != archs[0] for a in archs[1:]):
            raise ValueError("ensemble members must share one architecture")
        self.estimators = list(estimators)
        self.prior = prior
        self.x_o = None if x_o is None else np.asarray(x_o, dtype=np.float64)
        self.meta = meta or {}

    @property
    def amortized(self) -> bool:
        return self.x_o is None

    @property
    def bounds(self):
        box = self.estimators[0].box
        return box.lower, box.upper

    def _resolve_x(self, x):
        return Posterior._resolve_x(self, x)

    def member_log_probs(self, theta, x=None) -> np.ndarray:
        xr = self._resolve_x(x)
        return np.stack([e.log_prob(theta, xr) for e in self.estimators])

    def log_prob(self, theta, x=None) -> np.ndarray:
        lp = self.member_log_probs(theta, x)
        return logsumexp(lp, axis=0) - np.log(len(self.estimators))

    def sample(self, n: int, x=None, seed=0) -> np.ndarray:
        xr = self._resolve_x(x)
        rng = np.random.default_rng(seed)
        which = rng.integers(len(self.estimators), size=n)
        out = np.empty((n, self.estimators[0].arch.theta_dim))
        for e, est in enumerate(self.estimators):
            idx = np.where(which == e)[0]
            if len(idx):
                out[idx] = est.sample(len(idx), xr, rng)
        return out


def _default_arch(theta_dim: int, x_shape: tuple) -> Architecture:
    embedding = "conv" if len(x_shape) == 2 else "identity"
    return Architecture(theta_dim=theta_dim, x_shape=tuple(x_shape),
                        embedding=embedding)


def _as_dataset(ds) -> FidelityDataset:
    if isinstance(ds, FidelityDataset):
        return ds
    theta, x = ds
    return FidelityDataset(0, theta, x)


def run_npe(prior, hf_dataset, config: TrainConfig,
            arch: Architecture | None = None) -> Posterior:
    """Amortized posterior trained on high-fidelity pairs alone."""
    hf = _as_dataset(hf_dataset)
    if len(hf) == 0:
        raise ValueError("run_npe: empty dataset")
    if arch is None:
        arch = _default_arch(hf.theta.shape[1], hf.x.shape[1:])
    est = build_estimator(arch, prior.lower, prior.upper, seed=config.seed)
    est, report = train(est, (hf.theta, hf.x), config)
    return Posterior(est, prior, meta={
        "algorithm": "npe", "n_train": len(hf), "seed": config.seed,
        "train_report": _report_summary(report)})


def run_mf_npe(prior, lf_dataset, hf_dataset, config: TrainConfig,
               arch: Architecture | None = None) -> Posterior:
    """Pretrain on low fidelity, clone, fine-tune on high fidelity."""
    lf = _as_dataset(lf_dataset)
    if len(lf) == 0:
        raise ValueError("run_mf_npe: empty low-fidelity dataset; "
                         "use run_npe when no low-fidelity data is available")
    post = run_mf_npe_chain(prior, [lf, _as_dataset(hf_dataset)], config, arch)
    post.meta["algorithm"] = "mf-npe"
    return post


def run_mf_npe_chain(prior, datasets, config: TrainConfig,
                     arch: Architecture | None = None) -> Posterior:
    """Sequential transfer across ascending fidelities; each level starts
    from the previous level's weights and trains with a fresh optimizer."""
    datasets = [_as_dataset(d) for d in datasets]
    if len(datasets) < 2:
        raise ValueError("chain needs at least 2 fidelity levels")
    dims = {d.theta.shape[1] for d in datasets}
    if len(dims) != 1:
        raise ValueError(f"theta dimensions differ across levels: {sorted(dims)}")
    for i, d in enumerate(datasets):
        if len(d) == 0:
            raise ValueError(f"fidelity level {i} is empty")
    fids = [d.fidelity for d in datasets]
    if any(b < a for a, b in zip(fids, fids[1:])):
        raise ValueError(f"datasets must be in ascending fidelity order, got {fids}")
    if arch is None:
        arch = _default_arch(datasets[0].theta.shape[1], datasets[0].x.shape[1:])
    est = build_estimator(arch, prior.lower, prior.upper, seed=config.seed)
    reports = []
    est, rep = train(est, (datasets[0].theta, datasets[0].x), config)
    reports.append(_report_summary(rep))
    for level in datasets[1:]:
        nxt = build_estimator(arch, prior.lower, prior.upper, seed=config.seed)
        clone_weights(est, nxt)
        nxt.x_standardizer = None  # each level standardizes on its own split
        est, rep = train(nxt, (level.theta, level.x), config)
        reports.append(_report_summary(rep))
    return Posterior(est, prior, meta={
        "algorithm": "mf-npe-chain", "levels": [len(d) for d in datasets],
        "seed": config.seed, "train_reports": reports})


def hpr_threshold(posterior, x_o, epsilon: float = DEFAULT_EPSILON,
                  n_mc: int = HPR_N_MC, seed=0) -> float:
    """Log-density level whose superlevel set holds about 1-epsilon of the
    posterior mass: the empirical epsilon-quantile of log q over n_mc draws."""
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must be in (0, 1)")
    samples = posterior.sample(n_mc, x=x_o, seed=seed)
    lq = posterior.log_prob(samples, x=x_o)
    return float(np.quantile(lq, epsilon))


@dataclass
class TruncatedProposal:
    """Prior restricted to the current posterior's highest-probability
    region: density proportional to prior(theta) * 1[log q >= threshold]."""

    prior: object
    posterior: object
    x_o: np.ndarray
    threshold: float
    epsilon: float = DEFAULT_EPSILON
    last_acceptance: float = field(default=np.nan, init=False)

    def sample(self, n: int, rng) -> np.ndarray:
        if self.threshold == -np.inf:
            self.last_acceptance = 1.0
            return self.prior.sample(n, rng)
        out = []
        got, draws = 0, 0
        block = max(n, 1000)
        while got < n:
            theta = self.prior.sample(block, rng)
            keep = self.posterior.log_prob(theta, x=self.x_o) >= self.threshold
            out.append(theta[keep])
            got += int(keep.sum())
            draws += block
            if draws >= 1_000_000 and got / draws < 1e-6:
                raise RuntimeError(
                    f"truncated-proposal acceptance {got / draws:.2e} below 1e-6; "
                    "the restriction is degenerate")
        self.last_acceptance = got / draws
        return np.vstack(out)[:n]


def sample_truncated(proposal: TruncatedProposal, n: int, seed) -> np.ndarray:
    """Exactly n draws from the truncated proposal; the realized acceptance
    rate is left on proposal.last_acceptance."""
    return proposal.sample(n, np.random.default_rng(seed))


def _report_summary(rep) -> dict:
    return {"stop_epoch": rep.stop_epoch, "stop_reason": rep.stop_reason,
            "best_val_loss": rep.best_val_loss(), "wall_time_s": rep.wall_time_s,
            "n_train": rep.n_train}


COVERAGE_L = 16         # draws per pair in the per-round coverage diagnostic
COVERAGE_MAX_PAIRS = 256  # the diagnostic is logged, not used for control flow


def _coverage_ranks(estimator, prior, theta, x, seed) -> np.ndarray:
    """Rank-based coverage of the round's (theta, x) pairs, computed on an
    amortized view of the current estimator."""
    from .metrics import ranks_for_pairs

    view = Posterior(estimator, prior)  # x_o unset: evaluable at each row's x
    k = min(len(theta), COVERAGE_MAX_PAIRS)
    return ranks_for_pairs(view, theta[:k], x[:k], L=COVERAGE_L, seed=seed)


def _round_config(config: TrainConfig, r: int) -> TrainConfig:
    return dataclasses.replace(config, seed=config.seed + _SEED_STRIDE * (r - 1))


def run_tsnpe(prior, hf_simulator, x_o, config: TrainConfig,
              R: int = DEFAULT_ROUNDS, epsilon: float = DEFAULT_EPSILON,
              M: int = 1000, arch: Architecture | None = None,
              round_data: str = "accumulate") -> Posterior:
    """Truncated sequential NPE on high-fidelity simulations only. Round 1
    draws from the prior; later rounds truncate to the current posterior's
    highest-probability region."""
    est = None
    return _sequential(prior, est, hf_simulator, x_o, config, R, epsilon, M,
                       arch, round_data, algorithm="tsnpe")


def run_mf_tsnpe(prior, lf_dataset, hf_simulator, x_o, config: TrainConfig,
                 R: int = DEFAULT_ROUNDS, epsilon: float = DEFAULT_EPSILON,
                 M: int = 1000, arch: Architecture | None = None,
                 round_data: str = "accumulate") -> Posterior:
    """Low-fidelity pretrain + clone, then R truncated rounds of high-fidelity
    simulation and fine-tuning. Pass epsilon <= 0 to disable truncation."""
    lf = _as_dataset(lf_dataset)
    if len(lf) == 0:
        raise ValueError("run_mf_tsnpe: empty low-fidelity dataset")
    if arch is None:
        arch = _default_arch(lf.theta.shape[1], lf.x.shape[1:])
    pre = build_estimator(arch, prior.lower, prior.upper, seed=config.seed)
    pre, rep = train(pre, (lf.theta, lf.x), config)
    est = build_estimator(arch, prior.lower, prior.upper, seed=config.seed)
    clone_weights(pre, est)
    post = _sequential(prior, est, hf_simulator, x_o, config, R, epsilon, M,
                       arch, round_data, algorithm="mf-tsnpe")
    post.meta["pretrain_report"] = _report_summary(rep)
    return post


def _sequential(prior, est, hf_simulator, x_o, config, R, epsilon, M, arch,
                round_data, algorithm) -> Posterior:
    if R < 1:
        raise ValueError("R must be >= 1")
    if round_data not in ("accumulate", "last"):
        raise ValueError("round_data must be 'accumulate' or 'last'")
    x_o = np.asarray(x_o, dtype=np.float64)
    accumulated = None
    rounds_meta = []
    hf_calls = 0
    for r in range(1, R + 1):
        if est is None:
            threshold = -np.inf  # no posterior yet: round 1 is the prior round
        elif epsilon <= 0:
            threshold = -np.inf
        else:
            threshold = hpr_threshold(Posterior(est, prior, x_o), x_o, epsilon,
                                      seed=round_seed(config.seed, r))
        proposal = TruncatedProposal(
            prior, Posterior(est, prior, x_o) if est is not None else None,
            x_o, threshold, max(epsilon, 0.0))
        batch = simulate_batch(hf_simulator, proposal, M,
                               seed=round_seed(config.seed, r))
        hf_calls += batch.provenance["calls"]
        accumulated = batch if accumulated is None or round_data == "last" \
            else accumulated.concat(batch)
        if est is None:
            if arch is None:
                arch = _default_arch(batch.theta.shape[1], batch.x.shape[1:])
            est = build_estimator(arch, prior.lower, prior.upper, seed=config.seed)
        est.x_standardizer = None  # restandardize on this round's split
        est, rep = train(est, (accumulated.theta, accumulated.x),
                         _round_config(config, r))
        ranks = _coverage_ranks(est, prior, batch.theta, batch.x,
                                seed=round_seed(config.seed, r))
        rounds_meta.append({
            "round": r, "threshold": threshold,
            "acceptance": proposal.last_acceptance,
            "hf_calls": batch.provenance["calls"],
            "replacements": batch.provenance["replacements"],
            "coverage_mean_rank": float(ranks.mean()) / COVERAGE_L,
            "train_report": _report_summary(rep)})
        log.info("%s round %d: acceptance %.3g, mean coverage rank %.3f",
                 algorithm, r, proposal.last_acceptance, rounds_meta[-1][
                     "coverage_mean_rank"])
    return Posterior(est, prior, x_o=x_o, meta={
        "algorithm": algorithm, "R": R, "epsilon": epsilon, "M": M,
        "seed": config.seed, "hf_calls": hf_calls, "rounds": rounds_meta})


def acquisition_scores(pool: np.ndarray, ensemble: EnsemblePosterior,
                       x_o=None) -> np.ndarray:
    """Unbiased sample variance across ensemble members of the posterior
    density (not log density) at each pool element."""
    pool = np.atleast_2d(pool)
    if len(pool) == 0:
        raise ValueError("empty pool")
    if len(ensemble.estimators) < 2:
        raise ValueError("acquisition needs an ensemble of >= 2 members")
    p = np.exp(ensemble.member_log_probs(pool, x_o))
    scores = p.var(axis=0, ddof=1)
    scores[np.all(p == p[:1], axis=0)] = 0.0  # no float residue when equal
    return scores


def run_a_mf_tsnpe(prior, lf_dataset, hf_simulator, x_o, config: TrainConfig,
                   R: int = DEFAULT_ROUNDS, epsilon: float = DEFAULT_EPSILON,
                   M: int = 1000, B_fraction: float = DEFAULT_B_FRACTION,
                   E: int = DEFAULT_ENSEMBLE, arch: Architecture | None = None,
                   pool_size: int | None = None) -> EnsemblePosterior:
    """MF-TSNPE with an ensemble and variance-targeting acquisition: each
    round draws M-B proposal samples plus the B top-variance pool elements,
    B = round(B_fraction * M); every member fine-tunes on the identical
    accumulated high-fidelity data."""
    if E < 2:
        raise ValueError("E must be >= 2")
    if not 0 <= B_fraction < 1:
        raise ValueError("B_fraction must be in [0, 1)")
    lf = _as_dataset(lf_dataset)
    if len(lf) == 0:
        raise ValueError("run_a_mf_tsnpe: empty low-fidelity dataset")
    if arch is None:
        arch = _default_arch(lf.theta.shape[1], lf.x.shape[1:])
    x_o = np.asarray(x_o, dtype=np.float64)

    members = []
    pre_reports = []
    for e in range(E):
        # distinct initialization seeds per member are the diversity source
        cfg_e = dataclasses.replace(config, seed=config.seed + 1000 * e)
        pre = build_estimator(arch, prior.lower, prior.upper, seed=cfg_e.seed)
        pre, rep = train(pre, (lf.theta, lf.x), cfg_e)
        member = build_estimator(arch, prior.lower, prior.upper, seed=cfg_e.seed)
        clone_weights(pre, member)
        members.append(member)
        pre_reports.append(_report_summary(rep))

    if pool_size is None:
        pool_size = 10 * M * R
    # [seed, 998]: own stream, stays valid at seed 0 (round_seed(0, 0) is -1)
    pool = prior.sample(pool_size, np.random.default_rng([config.seed, 998]))

    B = int(round(B_fraction * M))
    accumulated = None
    rounds_meta = []
    hf_calls = 0
    for r in range(1, R + 1):
        ensemble = EnsemblePosterior(members, prior, x_o)
        threshold = -np.inf if epsilon <= 0 else hpr_threshold(
            ensemble, x_o, epsilon, seed=round_seed(config.seed, r))
        proposal = TruncatedProposal(prior, ensemble, x_o, threshold,
                                     max(epsilon, 0.0))
        n_prop = M - B
        batch = simulate_batch(hf_simulator, proposal, n_prop,
                               seed=round_seed(config.seed, r))
        hf_calls += batch.provenance["calls"]
        n_active = 0
        if B > 0:
            if len(pool) < B:
                log.warning("acquisition pool exhausted (%d left, need %d); "
                            "falling back to proposal-only sampling", len(pool), B)
                extra = simulate_batch(hf_simulator, proposal, B,
                                       seed=round_seed(config.seed, r) + 10 ** 9)
                hf_calls += extra.provenance["calls"]
                batch = batch.concat(extra)
            else:
                scores = acquisition_scores(pool, ensemble, x_o)
                order = np.argsort(-scores)
                active = _simulate_active(hf_simulator, pool, order, B,
                                          round_seed(config.seed, r))
                n_active = B
                hf_calls += active["calls"]
                pool = np.delete(pool, order[:active["consumed"]], axis=0)
                batch = batch.concat(FidelityDataset(
                    batch.fidelity, active["theta"], active["x"],
                    dict(batch.provenance)))
        accumulated = batch if accumulated is None else accumulated.concat(batch)
        member_reports = []
        for e, member in enumerate(members):
            cfg = dataclasses.replace(config, seed=config.seed + 1000 * e
                                      + _SEED_STRIDE * (r - 1))
            member.x_standardizer = None
            _, rep = train(member, (accumulated.theta, accumulated.x), cfg)
            member_reports.append(_report_summary(rep))
        rounds_meta.append({
            "round": r, "threshold": threshold, "n_proposal": n_prop,
            "n_active": n_active, "acceptance": proposal.last_acceptance,
            "hf_calls": hf_calls, "pool_left": len(pool),
            "member_reports": member_reports})
    return EnsemblePosterior(members, prior, x_o, meta={
        "algorithm": "a-mf-tsnpe", "R": R, "epsilon": epsilon, "M": M,
        "B_fraction": B_fraction, "E": E, "seed": config.seed,
        "hf_calls": hf_calls, "pretrain_reports": pre_reports,
        "rounds": rounds_meta})


def _simulate_active(hf_simulator, pool, order, B, seed) -> dict:
    """Simulate the B best-scored pool elements; invalid outputs are replaced
    by the next-ranked elements so exactly B valid rows come back."""
    rng = np.random.default_rng([int(seed), 999])
    taken = 0
    thetas, xs = [], []
    calls = 0
    need = B
    while need > 0:
        if taken >= len(order):
            raise RuntimeError("acquisition pool exhausted while replacing "
                               "invalid simulations")
        idx = order[taken:taken + need]
        theta = pool[idx]
        x = hf_simulator.simulate(theta, rng)
        calls += len(theta)
        ok = np.isfinite(x.reshape(len(x), -1)).all(axis=1)
        thetas.append(theta[ok])
        xs.append(x[ok])
        taken += len(idx)
        need -= int(ok.sum())
    return {"theta": np.vstack(thetas), "x": np.concatenate(xs, axis=0),
            "calls": calls, "consumed": taken}
