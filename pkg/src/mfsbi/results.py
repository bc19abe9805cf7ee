"""Append-only experiment results and report generation.

Metric rows live in a JSON-lines file (one dict per line, crash-safe to
append); every row carries a run_id pointing at a manifest written
before the run started, so each number is traceable to the exact config
and seed that produced it. Reports pivot the rows into a CSV of mean
and 95% confidence half-width per (hf_budget, algorithm) cell.
"""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats

log = logging.getLogger(__name__)

ROW_KEYS = ("task", "algorithm", "lf_budget", "hf_budget", "seed",
            "observation_id", "metric", "value")


@dataclass
class ResultsStore:
    root: str

    def __post_init__(self):
        self.root = str(self.root)
        os.makedirs(os.path.join(self.root, "manifests"), exist_ok=True)

    @property
    def results_path(self) -> str:
        return os.path.join(self.root, "results.jsonl")

    def _manifest_path(self, run_id: str) -> str:
        return os.path.join(self.root, "manifests", f"{run_id}.json")

    # -- manifests ---------------------------------------------------------

    def write_manifest(self, run_id: str, manifest: dict) -> str:
        """Create (or verify) the manifest for a run. A manifest that
        already exists with different content means two distinct configs
        hash to the same id or the directory is being reused; refuse."""
        text = json.dumps(manifest, sort_keys=True, indent=1)
        path = self._manifest_path(run_id)
        if os.path.exists(path):
            with open(path) as f:
                if f.read() != text:
                    raise RuntimeError(
                        f"manifest {run_id} already exists with different "
                        "content; use a fresh output directory")
            return path
        with open(path, "w") as f:
            f.write(text)
        return path

    def manifest(self, run_id: str) -> dict:
        with open(self._manifest_path(run_id)) as f:
            return json.load(f)

    def has_manifest(self, run_id: str) -> bool:
        return os.path.exists(self._manifest_path(run_id))

    # -- rows --------------------------------------------------------------

    def append(self, row: dict) -> None:
        missing = [k for k in ROW_KEYS if k not in row]
        if missing:
            raise ValueError(f"result row missing keys {missing}")
        if not np.isfinite(row["value"]):
            raise ValueError("result value must be finite")
        with open(self.results_path, "a") as f:
            f.write(json.dumps(row, sort_keys=True) + "\n")

    def rows(self, **filters) -> list:
        if not os.path.exists(self.results_path):
            return []
        out = []
        with open(self.results_path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                if all(row.get(k) == v for k, v in filters.items()):
                    out.append(row)
        return out

    def completed(self, run_id: str) -> bool:
        """A run is complete when its manifest recorded row count matches
        the rows present (used to skip finished runs on re-invocation)."""
        if not self.has_manifest(run_id):
            return False
        m = self.manifest(run_id)
        want = m.get("n_rows")
        return want is not None and len(self.rows(run_id=run_id)) >= want


def _ci95(values: np.ndarray) -> float:
    n = len(values)
    if n < 2:
        return 0.0
    return float(stats.t.ppf(0.975, n - 1) * values.std(ddof=1) / np.sqrt(n))


def report(rows, metric: str, per_observation: bool = False) -> str:
    """Pivot rows of one metric into CSV: hf_budget rows, one
    (mean, ci95, n) column triple per algorithm. Set per_observation for
    the long row-per-measurement format instead."""
    rows = [r for r in rows if r.get("metric") == metric]
    if not rows:
        raise ValueError(f"no rows for metric {metric!r}")
    if per_observation:
        buf = io.StringIO()
        buf.write(",".join(ROW_KEYS) + "\n")
        for r in rows:
            buf.write(",".join(str(r[k]) for k in ROW_KEYS) + "\n")
        return buf.getvalue()

    algorithms = sorted({r["algorithm"] for r in rows})
    budgets = sorted({r["hf_budget"] for r in rows})
    cells = {}
    for alg in algorithms:
        means = []
        for b in budgets:
            vals = np.array([r["value"] for r in rows
                             if r["algorithm"] == alg and r["hf_budget"] == b])
            if len(vals):
                cells[alg, b] = (vals.mean(), _ci95(vals), len(vals))
                means.append(vals.mean())
        if len(means) > 1 and np.any(np.diff(means) > 0):
            log.warning("report: mean %s for %s is not monotone decreasing "
                        "in hf_budget", metric, alg)

    buf = io.StringIO()
    header = ["hf_budget"]
    for alg in algorithms:
        header += [f"{alg}:mean", f"{alg}:ci95", f"{alg}:n"]
    buf.write(",".join(header) + "\n")
    for b in budgets:
        line = [str(b)]
        for alg in algorithms:
            if (alg, b) in cells:
                m, ci, n = cells[alg, b]
                line += [f"{m:.17g}", f"{ci:.17g}", str(n)]
            else:
                line += ["", "", "0"]
        buf.write(",".join(line) + "\n")
    return buf.getvalue()


def parse_report(text: str) -> dict:
    """Inverse of `report` (pivot format): {(algorithm, hf_budget):
    (mean, ci95, n)}."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    header = lines[0].split(",")
    if header[0] != "hf_budget":
        raise ValueError("not a pivot report")
    algorithms = [c[:-5] for c in header[1:] if c.endswith(":mean")]
    out = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        b = int(parts[0])
        for i, alg in enumerate(algorithms):
            m, ci, n = parts[1 + 3 * i: 4 + 3 * i]
            if n != "0":
                out[alg, b] = (float(m), float(ci), int(n))
    return out
