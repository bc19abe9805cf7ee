"""Dataset container and on-disk formats.

Summary-statistic datasets are CSV with a single JSON header line prefixed by
'#'; image datasets are .npz with the same header stored as a JSON string.
Both carry: task id, fidelity, theta dims, x dims, seed, schema version.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1


@dataclass
class FidelityDataset:
    fidelity: int  # 0 = lowest
    theta: np.ndarray
    x: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.theta.ndim != 2:
            raise ValueError(f"theta must be 2-D, got shape {self.theta.shape}")
        if len(self.theta) != len(self.x):
            raise ValueError(
                f"theta ({len(self.theta)}) and x ({len(self.x)}) row counts differ")

    def __len__(self) -> int:
        return len(self.theta)

    def validate_support(self, prior) -> None:
        bad = ~prior.inside(self.theta)
        if np.any(bad):
            raise ValueError(f"{int(bad.sum())} theta rows outside prior support")

    def concat(self, other: "FidelityDataset") -> "FidelityDataset":
        if other.fidelity != self.fidelity:
            raise ValueError("cannot concat datasets of different fidelity")
        return FidelityDataset(self.fidelity,
                               np.vstack([self.theta, other.theta]),
                               np.concatenate([self.x, other.x], axis=0),
                               dict(self.provenance))


def _header(ds: FidelityDataset) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "task": ds.provenance.get("task", ""),
        "fidelity": ds.fidelity,
        "theta_dim": ds.theta.shape[1],
        "x_shape": list(ds.x.shape[1:]),
        "provenance": ds.provenance,
    }


def save_dataset(ds: FidelityDataset, path) -> None:
    path = str(path)
    if ds.x.ndim > 2:
        np.savez_compressed(path, header=json.dumps(_header(ds)),
                            theta=ds.theta, x=ds.x)
        return
    x2 = ds.x.reshape(len(ds.x), -1)
    with open(path, "w") as f:
        f.write("# " + json.dumps(_header(ds)) + "\n")
        cols = [f"theta_{i}" for i in range(ds.theta.shape[1])]
        cols += [f"x_{i}" for i in range(x2.shape[1])]
        f.write(",".join(cols) + "\n")
        rows = np.hstack([ds.theta, x2])
        np.savetxt(f, rows, delimiter=",", fmt="%.17g")


def load_dataset(path) -> FidelityDataset:
    path = str(path)
    if path.endswith(".npz"):
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            _check_version(header)
            return FidelityDataset(header["fidelity"], z["theta"], z["x"],
                                   header.get("provenance", {}))
    with open(path) as f:
        first = f.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing header line")
        header = json.loads(first[1:])
        _check_version(header)
        f.readline()  # column names
        rows = np.loadtxt(f, delimiter=",", ndmin=2)
    d = header["theta_dim"]
    x_shape = tuple(header["x_shape"])
    if rows.size == 0:
        theta = np.zeros((0, d))
        x = np.zeros((0,) + x_shape)
    else:
        theta = rows[:, :d]
        x = rows[:, d:].reshape((len(rows),) + x_shape)
    return FidelityDataset(header["fidelity"], theta, x,
                           header.get("provenance", {}))


def _check_version(header: dict) -> None:
    v = header.get("schema_version")
    if v != SCHEMA_VERSION:
        raise ValueError(f"unsupported dataset schema version {v}")
