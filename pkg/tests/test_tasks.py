"""Task registry wiring: priors, simulator pairs, architecture shapes,
and reference-posterior recipes."""

import logging

import numpy as np
import pytest

from mfsbi import tasks
from mfsbi.reference import ou_exact_loglik


def test_registry_entries_are_consistent():
    for name in tasks.TASK_NAMES:
        t = tasks.get_task(name)
        assert t.name == name
        assert t.prior.dim == t.arch.theta_dim
        assert t.lf.fidelity == 0 and t.hf.fidelity == 1
        assert tuple(t.hf.x_shape) == t.arch.x_shape
        rng = np.random.default_rng(0)
        theta = t.prior.sample(3, rng)
        assert theta.shape == (3, t.theta_dim)
        assert t.prior.inside(theta).all()
    assert tasks.get_task("blob").arch.embedding == "conv"
    assert tasks.get_task("ou3").theta_dim == 3
    with pytest.raises(ValueError, match="unknown task"):
        tasks.get_task("ou5")


def test_perturbed_options_are_plumbed():
    t = tasks.get_task("ou2-perturbed", delta=0.5, invert=True)
    assert t.lf.delta == 0.5 and t.lf.invert is True
    assert t.prior.lower.tolist() == tasks.get_task("ou2").prior.lower.tolist()


def test_ou_loglik_fills_fixed_parameters():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(10)
    t2 = tasks.get_task("ou2")
    theta2 = t2.prior.sample(5, rng)
    full = np.column_stack([theta2, np.full(5, 0.5), np.full(5, 3.0)])
    assert np.allclose(t2.loglik(theta2, x), ou_exact_loglik(full, x))
    t4 = tasks.get_task("ou4")
    theta4 = t4.prior.sample(5, rng)
    assert np.allclose(t4.loglik(theta4, x), ou_exact_loglik(theta4, x))


def test_observation_id_stable_and_distinct():
    t = tasks.get_task("ou2")
    _, x = tasks.observations(t, 3, seed=7)
    ids = [tasks.observation_id(xi) for xi in x]
    assert len(set(ids)) == 3
    assert all(len(i) == 16 for i in ids)
    assert tasks.observation_id(x[0]) == ids[0]
    _, x2 = tasks.observations(t, 3, seed=7)
    assert [tasks.observation_id(xi) for xi in x2] == ids


def test_ou2_rejection_reference_concentrates():
    t = tasks.get_task("ou2")
    theta_o, x_o = tasks.observations(t, 1, seed=11)
    ref = tasks.reference_posterior(t, x_o[0], 400, seed=2)
    assert ref.samples.shape == (400, 2)
    assert t.prior.inside(ref.samples).all()
    assert ref.method == "rejection" and ref.task == "ou2"
    prior_sd = (t.prior.upper - t.prior.lower) / np.sqrt(12.0)
    assert np.all(ref.samples.std(axis=0) < prior_sd)


def test_slcp_reference_escalates_proposals(caplog):
    t = tasks.get_task("slcp")
    _, x_o = tasks.observations(t, 1, seed=3)
    with caplog.at_level(logging.WARNING, logger="mfsbi.tasks"):
        ref = tasks.reference_posterior(t, x_o[0], 100, seed=0)
    assert ref.samples.shape == (100, 5)
    assert ref.diagnostics["ess"] >= 10
    assert any("retrying" in r.message for r in caplog.records)


def test_sir_kernel_reference_targets_the_generating_theta():
    t = tasks.get_task("sir")
    theta_o, x_o = tasks.observations(t, 1, seed=5)
    ref = tasks.reference_posterior(t, x_o[0], 200, seed=1)
    assert ref.method == "sir"
    assert ref.diagnostics["ess"] >= 10
    err = np.abs(ref.samples.mean(axis=0) - theta_o[0])
    assert np.all(err < 0.1 * np.abs(theta_o[0]) + 0.02)


def test_blob_has_no_reference():
    t = tasks.get_task("blob")
    with pytest.raises(ValueError, match="nltp/nrmse"):
        tasks.reference_posterior(t, np.zeros((256, 256)), 10, seed=0)
