"""Experiment configuration: a flat key-value schema, a plain-text file
format, and command-line `--set key=value` overrides.

File format: one `key = value` assignment per line, values in JSON
(`[50, 100]` for lists, `true`/`false` for booleans, bare words are
read as strings). Lines starting with `#` and blank lines are ignored.
Every run is fully determined by (config, seed).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

ALGORITHMS = ("npe", "mf-npe", "mf-npe-chain", "tsnpe", "mf-tsnpe",
              "a-mf-tsnpe", "mf-abc")
METRICS = ("c2st", "mmd", "nltp", "nrmse")
TASKS = ("ou2", "ou3", "ou4", "ou2-perturbed", "slcp", "sir", "blob")

# the standard budget grid experiments sweep unless configured otherwise
DEFAULT_HF_GRID = (50, 100, 1000, 10_000, 100_000)


@dataclass
class ExperimentConfig:
    task: str = "ou2"
    algorithm: str = "mf-npe"
    lf_budget: int = 10_000
    hf_budgets: tuple = (50, 100, 1000)
    seeds: tuple = (0, 1, 2, 3, 4, 5, 6, 7, 8, 9)
    n_observations: int = 10
    observation_seed: int = 1234
    metrics: tuple = ("c2st",)
    out_dir: str = "runs"
    # sequential variants
    rounds: int = 5
    epsilon: float = 1e-6
    round_data: str = "accumulate"
    # acquisition variant
    b_fraction: float = 0.2
    ensemble: int = 5
    # perturbed low-fidelity task
    delta: float = 0.0
    invert: bool = False
    # mf-abc
    eta: tuple = (0.9, 0.3)
    eps_abc: tuple = (1.0, 1.0)
    # training
    batch_size: int = 200
    learning_rate: float = 5e-4
    val_fraction: float = 0.1
    patience: int = 20
    max_epochs: int = 2000
    # evaluation
    n_posterior_samples: int = 10_000
    n_reference: int = 10_000

    def __post_init__(self):
        for name in ("hf_budgets", "seeds", "metrics", "eta", "eps_abc"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(
                f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        bad = [m for m in self.metrics if m not in METRICS]
        if bad:
            raise ValueError(f"unknown metrics {bad}; choose from {METRICS}")
        if self.lf_budget < 1 or any(b < 1 for b in self.hf_budgets):
            raise ValueError("budgets must be positive")
        if not self.hf_budgets or not self.seeds:
            raise ValueError("hf_budgets and seeds must be non-empty")
        if self.n_observations < 1:
            raise ValueError("n_observations must be >= 1")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = list(value)
            lines.append(f"{f.name} = {json.dumps(value)}")
        return "\n".join(lines) + "\n"

    def hash(self, **extra) -> str:
        """Content hash identifying a run; extra keys (hf_budget, seed)
        narrow it to a single grid cell."""
        text = self.to_text() + json.dumps(extra, sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare word: a string


def parse_config_text(text: str, overrides=()) -> ExperimentConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(
                f"line {lineno}: unknown key {key!r}; valid keys: "
                f"{sorted(_FIELDS)}")
        values[key] = _parse_value(raw)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override must be key=value, got {item!r}")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"unknown override key {key!r}")
        values[key] = _parse_value(raw)
    return ExperimentConfig(**values)


def load_config(path, overrides=()) -> ExperimentConfig:
    with open(path) as f:
        return parse_config_text(f.read(), overrides)
