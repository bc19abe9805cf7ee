"""Experiment config: text format, overrides, validation, hashing."""

import dataclasses

import pytest

from mfsbi.config import ExperimentConfig, load_config, parse_config_text


def test_defaults_are_valid():
    cfg = ExperimentConfig()
    assert cfg.task == "ou2" and cfg.algorithm == "mf-npe"
    assert cfg.hf_budgets == (50, 100, 1000)
    assert cfg.seeds == tuple(range(10))


def test_text_round_trip():
    cfg = ExperimentConfig(task="slcp", algorithm="tsnpe", hf_budgets=(200,))
    again = parse_config_text(cfg.to_text())
    assert again == cfg


def test_parse_values_and_overrides():
    text = """
    # comment line
    task = sir
    hf_budgets = [100, 200]
    learning_rate = 1e-3
    out_dir = runs/sweep
    """
    cfg = parse_config_text(text, overrides=["seeds=[0,1]", "algorithm=npe"])
    assert cfg.task == "sir"
    assert cfg.hf_budgets == (100, 200)
    assert cfg.learning_rate == pytest.approx(1e-3)
    assert cfg.out_dir == "runs/sweep"
    assert cfg.seeds == (0, 1) and cfg.algorithm == "npe"


def test_unknown_key_lists_valid_names():
    with pytest.raises(ValueError, match="unknown key 'budget'"):
        parse_config_text("budget = 5")
    with pytest.raises(ValueError, match="hf_budgets"):
        parse_config_text("budget = 5")


def test_malformed_line_rejected():
    with pytest.raises(ValueError, match="expected 'key = value'"):
        parse_config_text("task sir")


@pytest.mark.parametrize(
    "field,value",
    [
        ("task", "ou9"),
        ("algorithm", "snpe"),
        ("metrics", ("c2st", "elpd")),
        ("lf_budget", 0),
        ("hf_budgets", ()),
        ("n_observations", 0),
    ],
)
def test_validation_rejects_bad_fields(field, value):
    with pytest.raises(ValueError):
        ExperimentConfig(**{field: value})


def test_hash_tracks_content_and_extras():
    a = ExperimentConfig()
    b = ExperimentConfig(lf_budget=20_000)
    assert a.hash() != b.hash()
    assert a.hash() == ExperimentConfig().hash()
    assert a.hash(hf_budget=50) != a.hash(hf_budget=100)
    assert len(a.hash()) == 16


def test_load_config_from_file(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text("task = ou3\nseeds = [4]\n")
    cfg = load_config(str(p), overrides=["rounds=2"])
    assert cfg.task == "ou3" and cfg.seeds == (4,) and cfg.rounds == 2


def test_config_is_frozen_against_typos():
    cfg = ExperimentConfig()
    names = {f.name for f in dataclasses.fields(cfg)}
    assert {"task", "algorithm", "lf_budget", "hf_budgets", "metrics"} <= names
