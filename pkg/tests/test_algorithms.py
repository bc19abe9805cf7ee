"""Inference-procedure oracles: closed-form HPR thresholds, truncation rules,
transfer and degenerate-round equivalences (bitwise), ensemble identities,
and acquisition scoring against grid oracles."""

import logging
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats
from scipy.special import logsumexp

from mfsbi.algorithms import (EnsemblePosterior, Posterior, TruncatedProposal,
                              acquisition_scores, hpr_threshold, round_seed,
                              run_a_mf_tsnpe, run_mf_npe, run_mf_npe_chain,
                              run_mf_tsnpe, run_npe, run_tsnpe,
                              sample_truncated)
from mfsbi.data import FidelityDataset
from mfsbi.flow import Architecture, build_estimator, clone_weights
from mfsbi.metrics import c2st
from mfsbi.priors import BoxUniform
from mfsbi.simulators import simulate_batch
from mfsbi.training import TrainConfig, train

LOG_2PI = np.log(2 * np.pi)


class _StdNormalPosterior:
    """Analytic standard normal in d dims, amortized."""

    amortized = True

    def __init__(self, d=1):
        self.d = d

    def sample(self, n, x=None, seed=0):
        return np.random.default_rng(seed).standard_normal((n, self.d))

    def log_prob(self, theta, x=None):
        theta = np.atleast_2d(theta)
        return -0.5 * self.d * LOG_2PI - 0.5 * (theta ** 2).sum(axis=1)


class _NormalStub:
    """1-D normal density with a fixed mean, duck-typed as an estimator."""

    def __init__(self, mu, arch):
        self.mu = mu
        self.arch = arch

    def log_prob(self, theta, x):
        theta = np.atleast_2d(theta)
        return -0.5 * LOG_2PI - 0.5 * (theta[:, 0] - self.mu) ** 2

    def sample(self, n, x, seed):
        rng = np.random.default_rng(seed)
        return self.mu + rng.standard_normal((n, 1))


class _GaussSim:
    """x = theta + sigma * noise; the posterior at interior x_o is close to
    N(x_o, sigma^2) under a wide uniform prior."""

    def __init__(self, sigma, fidelity, dim=2):
        self.sigma = sigma
        self.fidelity = fidelity
        self.theta_dim = dim
        self.x_shape = (dim,)
        self.task = f"toy-gauss-{fidelity}"

    def simulate(self, theta, rng):
        return theta + self.sigma * rng.standard_normal(theta.shape)


def _prior2():
    return BoxUniform([-3.0, -3.0], [3.0, 3.0])


def _arch2():
    return Architecture(theta_dim=2, x_shape=(2,), n_layers=3, hidden=(32, 32))


def _cfg(seed=0, epochs=15, patience=6, batch=100):
    return TrainConfig(batch_size=batch, learning_rate=5e-4, patience=patience,
                       max_epochs=epochs, seed=seed)


X_O = np.array([0.5, -0.4])


def test_round_seed_distinct_and_deterministic():
    assert round_seed(3, 1) == round_seed(3, 1)
    seeds = {round_seed(s, r) for s in range(5) for r in range(1, 8)}
    assert len(seeds) == 35


# hpr_threshold

def test_hpr_threshold_chi2_oracle():
    post = _StdNormalPosterior(d=1)
    thr = hpr_threshold(post, x_o=None, epsilon=0.1, n_mc=100000, seed=0)
    exact = -0.5 * LOG_2PI - 0.5 * stats.chi2.ppf(0.9, df=1)
    assert abs(thr - exact) < 0.02


def test_hpr_threshold_min_limit_and_validation():
    post = _StdNormalPosterior(d=2)
    thr = hpr_threshold(post, None, epsilon=1e-12, n_mc=2000, seed=1)
    lq = post.log_prob(post.sample(2000, seed=1))
    assert abs(thr - lq.min()) < 1e-6
    with pytest.raises(ValueError, match="n_mc"):
        hpr_threshold(post, None, n_mc=999)
    for eps in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError, match="epsilon"):
            hpr_threshold(post, None, epsilon=eps)


# truncated proposal

def test_truncated_samples_satisfy_rule():
    prior = _prior2()
    post = _StdNormalPosterior(d=2)
    thr = hpr_threshold(post, None, epsilon=0.3, n_mc=20000, seed=0)
    prop = TruncatedProposal(prior, post, X_O, thr)
    out = prop.sample(500, np.random.default_rng(2))
    assert out.shape == (500, 2)
    assert np.all(post.log_prob(out) >= thr)
    assert 0.0 < prop.last_acceptance <= 1.0


def test_truncated_neg_inf_is_the_prior_bitwise():
    prior = _prior2()
    prop = TruncatedProposal(prior, _StdNormalPosterior(2), X_O, -np.inf)
    got = sample_truncated(prop, 200, seed=5)
    want = prior.sample(200, np.random.default_rng(5))
    assert np.array_equal(got, want)
    assert prop.last_acceptance == 1.0


def test_truncated_degenerate_acceptance_error():
    prop = TruncatedProposal(_prior2(), _StdNormalPosterior(2), X_O, 1e9)
    with pytest.raises(RuntimeError, match="acceptance"):
        prop.sample(10, np.random.default_rng(0))


# posterior conditioning rules

def _stub_posterior(x_o=None):
    est = SimpleNamespace(
        arch=SimpleNamespace(theta_dim=2),
        box=SimpleNamespace(lower=np.array([-3.0, -3.0]),
                            upper=np.array([3.0, 3.0])),
        log_prob=lambda theta, x: np.zeros(len(np.atleast_2d(theta))),
        sample=lambda n, x, seed: np.zeros((n, 2)))
    return Posterior(est, _prior2(), x_o=x_o)


def test_amortized_posterior_requires_x():
    post = _stub_posterior()
    assert post.amortized
    with pytest.raises(ValueError, match="pass the observation"):
        post.sample(3)
    assert post.sample(3, x=X_O).shape == (3, 2)


def test_sequential_posterior_refuses_other_x():
    post = _stub_posterior(x_o=X_O)
    assert not post.amortized
    post.log_prob(np.zeros((2, 2)))            # defaults to x_o
    post.log_prob(np.zeros((2, 2)), x=X_O)     # same observation is fine
    with pytest.raises(ValueError, match="not amortized"):
        post.log_prob(np.zeros((2, 2)), x=X_O + 1.0)


# ensembles and acquisition

def test_ensemble_log_prob_is_log_mean_density():
    arch = SimpleNamespace(theta_dim=1)
    members = [_NormalStub(0.0, arch), _NormalStub(2.0, arch)]
    ens = EnsemblePosterior(members, BoxUniform([-5.0], [5.0]), x_o=np.zeros(1))
    theta = np.linspace(-3, 5, 41)[:, None]
    lp = ens.log_prob(theta)
    manual = logsumexp(np.stack([m.log_prob(theta, None) for m in members]),
                       axis=0) - np.log(2)
    assert np.max(np.abs(lp - manual)) < 1e-10


def test_ensemble_mixture_sampling_balanced():
    arch = SimpleNamespace(theta_dim=1)
    members = [_NormalStub(-40.0, arch), _NormalStub(40.0, arch)]
    ens = EnsemblePosterior(members, BoxUniform([-50.0], [50.0]),
                            x_o=np.zeros(1))
    out = ens.sample(2000, seed=3)
    frac = (out[:, 0] > 0).mean()
    assert abs(frac - 0.5) < 3 * 0.5 / np.sqrt(2000)
    assert np.array_equal(out, ens.sample(2000, seed=3))


def test_ensemble_validation():
    arch = SimpleNamespace(theta_dim=1)
    with pytest.raises(ValueError, match="at least 2"):
        EnsemblePosterior([_NormalStub(0.0, arch)], _prior2())
    other = SimpleNamespace(theta_dim=1, hidden=(64,))
    with pytest.raises(ValueError, match="architecture"):
        EnsemblePosterior([_NormalStub(0.0, arch), _NormalStub(1.0, other)],
                          _prior2())


def test_acquisition_identical_members_zero_exact():
    arch = SimpleNamespace(theta_dim=1)
    m = _NormalStub(0.7, arch)
    ens = EnsemblePosterior([m, m, m], BoxUniform([-5.0], [5.0]),
                            x_o=np.zeros(1))
    scores = acquisition_scores(np.linspace(-2, 2, 101)[:, None], ens)
    assert np.all(scores == 0.0)


def test_acquisition_two_normal_grid_oracle():
    arch = SimpleNamespace(theta_dim=1)
    ens = EnsemblePosterior([_NormalStub(0.0, arch), _NormalStub(2.0, arch)],
                            BoxUniform([-5.0], [5.0]), x_o=np.zeros(1))
    grid = np.linspace(-4.0, 6.0, 2001)[:, None]
    scores = acquisition_scores(grid, ens)
    p0 = stats.norm.pdf(grid[:, 0], 0.0, 1.0)
    p2 = stats.norm.pdf(grid[:, 0], 2.0, 1.0)
    oracle = (p0 - p2) ** 2 / 2.0  # ddof=1 variance of two values
    assert np.allclose(scores, oracle, atol=1e-12)
    assert np.argmax(scores) == np.argmax(oracle)
    perm = np.random.default_rng(0).permutation(len(grid))
    assert np.array_equal(acquisition_scores(grid[perm], ens), scores[perm])


def test_acquisition_validation():
    arch = SimpleNamespace(theta_dim=1)
    ens = EnsemblePosterior([_NormalStub(0.0, arch), _NormalStub(1.0, arch)],
                            BoxUniform([-5.0], [5.0]), x_o=np.zeros(1))
    with pytest.raises(ValueError, match="empty"):
        acquisition_scores(np.zeros((0, 1)), ens)


# npe / mf-npe

def test_run_npe_gaussian_amortized():
    prior = _prior2()
    sim = _GaussSim(0.3, fidelity=1)
    data = simulate_batch(sim, prior, 2500, seed=0)
    post = run_npe(prior, data, _cfg(seed=0, epochs=120, patience=12,
                                     batch=200), arch=_arch2())
    assert post.amortized and post.meta["algorithm"] == "npe"
    for x_o in (X_O, np.array([-1.0, 1.2])):
        s = post.sample(3000, x=x_o, seed=1)
        assert np.max(np.abs(s.mean(axis=0) - x_o)) < 0.15
        assert np.all(s.std(axis=0) > 0.15) and np.all(s.std(axis=0) < 0.5)


def test_run_npe_empty_error():
    with pytest.raises(ValueError, match="empty"):
        run_npe(_prior2(), (np.zeros((0, 2)), np.zeros((0, 2))), _cfg())


def test_mf_npe_matches_manual_transfer_and_chain():
    prior = _prior2()
    lf = simulate_batch(_GaussSim(0.6, 0), prior, 500, seed=1)
    hf = simulate_batch(_GaussSim(0.3, 1), prior, 150, seed=2)
    cfg = _cfg(seed=7, epochs=10, patience=4)

    post = run_mf_npe(prior, lf, hf, cfg, arch=_arch2())
    assert post.meta["algorithm"] == "mf-npe"

    pre = build_estimator(_arch2(), prior.lower, prior.upper, seed=7)
    pre, _ = train(pre, (lf.theta, lf.x), cfg)
    manual = build_estimator(_arch2(), prior.lower, prior.upper, seed=7)
    clone_weights(pre, manual)
    manual, _ = train(manual, (hf.theta, hf.x), cfg)

    grid = prior.sample(64, np.random.default_rng(3))
    assert np.array_equal(post.log_prob(grid, x=X_O),
                          manual.log_prob(grid, X_O))

    chain = run_mf_npe_chain(prior, [lf, hf], cfg, arch=_arch2())
    assert np.array_equal(chain.sample(40, x=X_O, seed=5),
                          post.sample(40, x=X_O, seed=5))


def test_transfer_identity_before_finetune():
    prior = _prior2()
    lf = simulate_batch(_GaussSim(0.6, 0), prior, 400, seed=4)
    pre = build_estimator(_arch2(), prior.lower, prior.upper, seed=1)
    pre, _ = train(pre, (lf.theta, lf.x), _cfg(seed=1, epochs=6, patience=3))
    target = build_estimator(_arch2(), prior.lower, prior.upper, seed=999)
    clone_weights(pre, target)
    grid = prior.sample(128, np.random.default_rng(0))
    assert np.array_equal(pre.log_prob(grid, X_O), target.log_prob(grid, X_O))


def test_mf_npe_and_chain_validation():
    prior = _prior2()
    cfg = _cfg()
    empty = (np.zeros((0, 2)), np.zeros((0, 2)))
    some = simulate_batch(_GaussSim(0.3, 1), prior, 30, seed=0)
    with pytest.raises(ValueError, match="run_npe"):
        run_mf_npe(prior, empty, some, cfg)
    with pytest.raises(ValueError, match="2 fidelity levels"):
        run_mf_npe_chain(prior, [some], cfg)
    with pytest.raises(ValueError, match="empty"):
        run_mf_npe_chain(prior, [some, empty], cfg)
    with pytest.raises(ValueError, match="dimensions differ"):
        run_mf_npe_chain(prior, [some, (np.zeros((5, 3)), np.zeros((5, 2)))],
                         cfg)
    lo = FidelityDataset(0, some.theta, some.x)
    hi = FidelityDataset(1, some.theta, some.x)
    with pytest.raises(ValueError, match="ascending"):
        run_mf_npe_chain(prior, [hi, lo], cfg)


def test_chain_three_levels_deterministic():
    prior = _prior2()
    levels = [simulate_batch(_GaussSim(s, f), prior, n, seed=10 + f)
              for f, (s, n) in enumerate([(0.8, 300), (0.5, 120), (0.3, 60)])]
    cfg = _cfg(seed=2, epochs=8, patience=4)
    a = run_mf_npe_chain(prior, levels, cfg, arch=_arch2())
    b = run_mf_npe_chain(prior, levels, cfg, arch=_arch2())
    assert np.array_equal(a.sample(50, x=X_O, seed=0),
                          b.sample(50, x=X_O, seed=0))
    assert len(a.meta["train_reports"]) == 3
    assert a.meta["levels"] == [300, 120, 60]


def test_self_transfer_control_matches_doubled_npe():
    # pretraining on the very same set is one extra training session; the
    # exact clone makes it identical to NPE trained twice on that set
    prior = _prior2()
    data = simulate_batch(_GaussSim(0.3, 1), prior, 800, seed=3)
    cfg = _cfg(seed=1, epochs=60, patience=10)
    double = run_mf_npe(prior, data, data, cfg, arch=_arch2())
    plain = run_npe(prior, data, cfg, arch=_arch2())
    train(plain.estimator, (data.theta, data.x), cfg)  # second session
    a = plain.sample(1500, x=X_O, seed=2)
    b = double.sample(1500, x=X_O, seed=2)
    assert np.array_equal(a, b)
    assert c2st(a, b, seed=0).value < 0.55


# sequential variants

def test_tsnpe_acceptance_trend_and_budget():
    prior = _prior2()
    post = run_tsnpe(prior, _GaussSim(0.3, 1), X_O,
                     _cfg(seed=3, epochs=40, patience=8), R=3, epsilon=1e-3,
                     M=250, arch=_arch2())
    acc = [r["acceptance"] for r in post.meta["rounds"]]
    assert acc[0] == 1.0
    assert acc[1] < 0.9
    assert acc[2] <= acc[1] + 0.05
    assert post.meta["hf_calls"] == 750
    n_train = [r["train_report"]["n_train"] for r in post.meta["rounds"]]
    assert n_train == [225, 450, 675]  # accumulated minus the 10% val split
    assert not post.amortized
    with pytest.raises(ValueError, match="not amortized"):
        post.log_prob(np.zeros((1, 2)), x=X_O + 2.0)


def test_mf_tsnpe_one_round_untruncated_equals_mf_npe():
    prior = _prior2()
    lf = simulate_batch(_GaussSim(0.6, 0), prior, 500, seed=11)
    hf_sim = _GaussSim(0.3, 1)
    cfg = _cfg(seed=4, epochs=12, patience=5)

    seq = run_mf_tsnpe(prior, lf, hf_sim, X_O, cfg, R=1, epsilon=0.0, M=120,
                       arch=_arch2())
    hf = simulate_batch(hf_sim, prior, 120, seed=round_seed(4, 1))
    flat = run_mf_npe(prior, lf, hf, cfg, arch=_arch2())

    assert np.array_equal(seq.sample(60, seed=9), flat.sample(60, x=X_O, seed=9))
    r1 = seq.meta["rounds"][0]
    assert r1["threshold"] == -np.inf and r1["acceptance"] == 1.0
    assert seq.meta["hf_calls"] == 120


def test_mf_tsnpe_accumulate_vs_last():
    prior = _prior2()
    lf = simulate_batch(_GaussSim(0.6, 0), prior, 300, seed=0)
    kw = dict(R=2, epsilon=1e-3, M=80, arch=_arch2())
    acc = run_mf_tsnpe(prior, lf, _GaussSim(0.3, 1), X_O,
                       _cfg(seed=1, epochs=6, patience=3), **kw)
    last = run_mf_tsnpe(prior, lf, _GaussSim(0.3, 1), X_O,
                        _cfg(seed=1, epochs=6, patience=3),
                        round_data="last", **kw)
    assert acc.meta["rounds"][1]["train_report"]["n_train"] == 144
    assert last.meta["rounds"][1]["train_report"]["n_train"] == 72
    with pytest.raises(ValueError, match="round_data"):
        run_mf_tsnpe(prior, lf, _GaussSim(0.3, 1), X_O, _cfg(),
                     round_data="all", **kw)


def test_mf_tsnpe_validation():
    with pytest.raises(ValueError, match="empty"):
        run_mf_tsnpe(_prior2(), (np.zeros((0, 2)), np.zeros((0, 2))),
                     _GaussSim(0.3, 1), X_O, _cfg())
    lf = simulate_batch(_GaussSim(0.6, 0), _prior2(), 50, seed=0)
    with pytest.raises(ValueError, match="R must"):
        run_mf_tsnpe(_prior2(), lf, _GaussSim(0.3, 1), X_O, _cfg(), R=0)


# adaptive ensemble variant

def test_a_mf_tsnpe_composition_and_budget():
    prior = _prior2()
    lf = simulate_batch(_GaussSim(0.6, 0), prior, 400, seed=5)
    ens = run_a_mf_tsnpe(prior, lf, _GaussSim(0.3, 1), X_O,
                         _cfg(seed=2, epochs=8, patience=4), R=2,
                         epsilon=1e-6, M=50, B_fraction=0.2, E=2,
                         arch=_arch2())
    assert isinstance(ens, EnsemblePosterior) and len(ens.estimators) == 2
    rounds = ens.meta["rounds"]
    assert [r["n_proposal"] for r in rounds] == [40, 40]
    assert [r["n_active"] for r in rounds] == [10, 10]
    assert ens.meta["hf_calls"] == 100
    assert [r["pool_left"] for r in rounds] == [990, 980]
    s = ens.sample(100, seed=0)
    assert s.shape == (100, 2) and np.all(prior.inside(s))


def test_a_mf_tsnpe_pure_proposal_when_b_zero():
    prior = _prior2()
    lf = simulate_batch(_GaussSim(0.6, 0), prior, 300, seed=6)
    ens = run_a_mf_tsnpe(prior, lf, _GaussSim(0.3, 1), X_O,
                         _cfg(seed=3, epochs=5, patience=3), R=2,
                         epsilon=1e-6, M=30, B_fraction=0.0, E=2,
                         arch=_arch2())
    assert all(r["n_active"] == 0 for r in ens.meta["rounds"])
    assert ens.meta["hf_calls"] == 60


def test_a_mf_tsnpe_pool_exhaustion_falls_back(caplog):
    prior = _prior2()
    lf = simulate_batch(_GaussSim(0.6, 0), prior, 300, seed=7)
    with caplog.at_level(logging.WARNING, logger="mfsbi.algorithms"):
        ens = run_a_mf_tsnpe(prior, lf, _GaussSim(0.3, 1), X_O,
                             _cfg(seed=4, epochs=5, patience=3), R=2,
                             epsilon=1e-6, M=50, B_fraction=0.2, E=2,
                             arch=_arch2(), pool_size=12)
    assert "pool exhausted" in caplog.text
    rounds = ens.meta["rounds"]
    assert rounds[0]["n_active"] == 10 and rounds[1]["n_active"] == 0
    assert ens.meta["hf_calls"] == 100


def test_a_mf_tsnpe_validation():
    lf = (np.zeros((5, 2)), np.zeros((5, 2)))
    with pytest.raises(ValueError, match="E must"):
        run_a_mf_tsnpe(_prior2(), lf, _GaussSim(0.3, 1), X_O, _cfg(), E=1)
    with pytest.raises(ValueError, match="B_fraction"):
        run_a_mf_tsnpe(_prior2(), lf, _GaussSim(0.3, 1), X_O, _cfg(),
                       B_fraction=1.0)
    with pytest.raises(ValueError, match="empty"):
        run_a_mf_tsnpe(_prior2(), (np.zeros((0, 2)), np.zeros((0, 2))),
                       _GaussSim(0.3, 1), X_O, _cfg())


def test_a_mf_tsnpe_accepts_seed_zero():
    # pool stream must stay valid at the smallest legal seed
    prior = _prior2()
    lf = simulate_batch(_GaussSim(0.6, 0), prior, 300, seed=8)
    ens = run_a_mf_tsnpe(prior, lf, _GaussSim(0.3, 1), X_O,
                         _cfg(seed=0, epochs=5, patience=3), R=1,
                         epsilon=1e-6, M=10, B_fraction=0.2, E=2,
                         arch=_arch2())
    assert ens.meta["hf_calls"] == 10
