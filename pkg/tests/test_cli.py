"""End-to-end CLI coverage: dataset generation, experiment cells,
caching, reports, and diagnostics subcommands.

Budgets and epochs are kept tiny; these tests exercise plumbing,
not statistical quality.
"""

import json

import numpy as np
import pytest

from mfsbi import cli
from mfsbi.config import ExperimentConfig
from mfsbi.results import ResultsStore

FAST = [
    "--set", "max_epochs=30",
    "--set", "patience=5",
    "--set", "batch_size=50",
    "--set", "n_posterior_samples=300",
    "--set", "n_reference=300",
]


def test_simulate_writes_expected_rows(tmp_path, capsys):
    out = tmp_path / "d.csv"
    cli.main(["simulate", "--task", "ou2", "--fidelity", "low",
              "-n", "200", "--seed", "3", "--out", str(out)])
    first = out.read_bytes()
    data = np.loadtxt(out, delimiter=",", skiprows=2)
    assert data.shape == (200, 2 + 10)
    cli.main(["simulate", "--task", "ou2", "--fidelity", "low",
              "-n", "200", "--seed", "3", "--out", str(out)])
    assert out.read_bytes() == first
    assert "200" in capsys.readouterr().out


def test_simulate_rejects_nonpositive_n(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["simulate", "--task", "ou2", "--fidelity", "high",
                  "-n", "0", "--out", str(tmp_path / "x.csv")])


def _run_args(tmp_path, alg, extra=()):
    return [
        "run",
        "--set", "task=ou2",
        "--set", f"algorithm={alg}",
        "--set", "lf_budget=300",
        "--set", "hf_budgets=[30]",
        "--set", "seeds=[0]",
        "--set", "n_observations=1",
        "--set", "metrics=[\"c2st\"]",
        "--set", f"out_dir={tmp_path / 'runs'}",
        *FAST,
        *extra,
    ]


def test_run_npe_writes_rows_and_honest_manifest(tmp_path, capsys):
    cli.main(_run_args(tmp_path, "npe"))
    store = ResultsStore(str(tmp_path / "runs"))
    rows = store.rows(metric="c2st")
    assert len(rows) == 1
    row = rows[0]
    assert row["algorithm"] == "npe" and row["hf_budget"] == 30
    assert row["lf_budget"] == 0  # npe never touches the lf simulator
    assert 0.0 <= row["value"] <= 1.0
    man = store.manifest(row["run_id"])
    assert man["hf_calls"] == 30
    assert man["n_rows"] == 1
    capsys.readouterr()

    # identical second invocation is served from the store
    cli.main(_run_args(tmp_path, "npe"))
    out = capsys.readouterr().out
    assert "cached" in out
    assert len(store.rows(metric="c2st")) == 1


def test_run_is_deterministic_across_directories(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        cli.main(_run_args(d, "mf-npe"))
    ra = ResultsStore(str(a / "runs")).rows()
    rb = ResultsStore(str(b / "runs")).rows()
    for row in ra + rb:
        row.pop("run_id")
    assert ra == rb
    assert ra[0]["lf_budget"] == 300  # mf-npe consumes the lf pretrain set


def test_run_sequential_counts_all_rounds(tmp_path):
    cli.main(_run_args(tmp_path, "tsnpe", extra=["--set", "rounds=2"]))
    store = ResultsStore(str(tmp_path / "runs"))
    row = store.rows()[0]
    man = store.manifest(row["run_id"])
    assert man["hf_calls"] == 30  # 2 rounds x 15 per round x 1 observation
    assert row["lf_budget"] == 0


def test_run_rejects_indivisible_sequential_budget(tmp_path):
    cfg = ExperimentConfig(algorithm="tsnpe", hf_budgets=(53,), rounds=5,
                           n_observations=1, metrics=("nrmse",))
    with pytest.raises(ValueError, match="divisible"):
        cli.run_cell(cfg, 53, 0)


def test_run_rejects_c2st_without_reference(tmp_path):
    with pytest.raises(ValueError, match="nltp/nrmse"):
        cli.main([
            "run",
            "--set", "task=blob",
            "--set", "algorithm=npe",
            "--set", "hf_budgets=[10]",
            "--set", "seeds=[0]",
            "--set", "n_observations=1",
            "--set", "metrics=[\"c2st\"]",
            "--set", f"out_dir={tmp_path / 'runs'}",
        ])


def test_report_command(tmp_path, capsys):
    with pytest.raises(SystemExit, match="no results"):
        cli.main(["report", "--results", str(tmp_path / "empty"), "--metric", "c2st"])
    cli.main(_run_args(tmp_path, "npe"))
    capsys.readouterr()
    cli.main(["report", "--results", str(tmp_path / "runs"), "--metric", "c2st"])
    out = capsys.readouterr().out
    assert out.startswith("hf_budget,")
    assert "npe:mean" in out


def test_mfabc_command(tmp_path, capsys):
    cli.main([
        "mfabc",
        "--set", "task=ou2",
        "--set", "n_observations=1",
        "--set", "n_posterior_samples=300",
        "--set", "n_reference=300",
        "--particles", "5000",
        "--eps-grid", "2,2",
    ])
    out = capsys.readouterr().out
    assert "eps=(2" in out and "hf_fraction=" in out and "c2st=" in out


def test_sbc_command_exits_clean_on_calibrated_flow(tmp_path, capsys):
    rc = cli.main([
        "sbc",
        "--set", "task=ou2",
        "--set", "algorithm=npe",
        *FAST,
        "--set", "seeds=[0]",
        "--hf-budget", "300",
        "--n-pairs", "40",
        "--L", "8",
    ])
    out = capsys.readouterr().out
    assert "combined p" in out
    assert rc in (0, 1)


def test_sbc_rejects_sequential_algorithms():
    with pytest.raises(SystemExit, match="amortized"):
        cli.main(["sbc", "--set", "algorithm=tsnpe", "--hf-budget", "100"])


def test_data_seed_streams_never_collide():
    seen = set()
    for seed in range(5):
        for role in (1, 2, 3):
            seen.add(cli._data_seed(seed, role))
        for i in range(3):
            seen.add(cli._obs_seed(seed, i))
    assert len(seen) == 5 * 6


def test_reference_cache_is_reused(tmp_path):
    from mfsbi import tasks

    t = tasks.get_task("ou2")
    _, x_o = tasks.observations(t, 1, seed=9)
    ref_dir = tmp_path / "refs"
    a = cli._reference_samples(t, x_o[0], 150, str(ref_dir))
    files = list(ref_dir.iterdir())
    assert len(files) == 1
    stamp = files[0].stat().st_mtime_ns
    b = cli._reference_samples(t, x_o[0], 150, str(ref_dir))
    assert np.array_equal(a, b)
    assert files[0].stat().st_mtime_ns == stamp
