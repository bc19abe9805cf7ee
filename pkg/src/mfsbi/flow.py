"""Conditional density estimation with coupling-based rational-quadratic
spline flows.

The estimator models q(theta | x) where theta lives in an open box.  theta is
mapped to an unbounded space by a logit transform, x is z-scored (and
optionally embedded by a small network), and a stack of spline coupling
layers with fixed permutations in between transforms the boxspace variable to
a standard normal base.

Direction convention: ``forward`` maps base draws toward data (used by
``sample``); ``log_prob`` runs the stack in reverse via the analytic spline
inverse, so the training gradient flows through the quadratic-root solve.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from . import engine as en
from .engine import DomainError, Tensor
from .nn import MLP, Conv2dLayer, Linear
from .spline import make_params, rq_forward, rq_inverse

FORMAT_VERSION = 1

_LOG_2PI = float(np.log(2.0 * np.pi))


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# preprocessing


class LogitBox:
    """Bijection from an open box (lower, upper) to R^d via the logit."""

    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=np.float64).reshape(-1)
        self.upper = np.asarray(upper, dtype=np.float64).reshape(-1)
        if self.lower.shape != self.upper.shape or (self.lower >= self.upper).any():
            raise ValueError(f"LogitBox: invalid bounds {lower} / {upper}")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def validate(self, theta: np.ndarray) -> None:
        bad = (theta <= self.lower) | (theta >= self.upper)
        if bad.any():
            d = int(np.argwhere(bad.any(axis=0)).reshape(-1)[0])
            raise DomainError(
                f"theta outside open box in dimension {d}: bounds "
                f"({self.lower[d]}, {self.upper[d]})")

    def forward(self, theta: np.ndarray):
        """theta -> (z, per-row log|dz/dtheta|)."""
        p = (theta - self.lower) / (self.upper - self.lower)
        z = logit(p)
        ld = (np.log(self.upper - self.lower)
              - np.log(theta - self.lower) - np.log(self.upper - theta)).sum(axis=-1)
        return z, ld

    def logdet_forward(self, theta: np.ndarray) -> np.ndarray:
        return self.forward(theta)[1]

    def inverse(self, z: np.ndarray) -> np.ndarray:
        # clip keeps extreme base draws strictly inside the open box
        p = np.clip(expit(z), 1e-15, 1.0 - 1e-15)
        return self.lower + (self.upper - self.lower) * p

    def copy(self) -> "LogitBox":
        return LogitBox(self.lower.copy(), self.upper.copy())


@dataclass
class Standardizer:
    """Per-dimension z-scoring with an epsilon floor on the std."""

    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-6

    @classmethod
    def fit(cls, x: np.ndarray, eps: float = 1e-6) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return cls(mean=x.mean(axis=0), std=np.maximum(x.std(axis=0), eps), eps=eps)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64).reshape(len(x), -1) - self.mean) / self.std

    def copy(self) -> "Standardizer":
        return Standardizer(self.mean.copy(), self.std.copy(), self.eps)


# ---------------------------------------------------------------------------
# embeddings


class IdentityEmbedding:
    """Consume summary statistics directly."""

    def __init__(self, dim: int):
        self.feature_dim = dim

    def forward_t(self, x: Tensor) -> Tensor:
        return x

    def params(self, prefix: str) -> dict:
        return {}


class ConvEmbedding:
    """Three strided 3x3 convolutions (8 -> 16 -> 32 channels, stride 2) with
    tanh in between, flattened into a linear layer producing the feature vector."""

    def __init__(self, height: int, width: int, out_dim: int, rng: np.random.Generator):
        self.height, self.width = height, width
        self.convs = [Conv2dLayer(1, 8, rng), Conv2dLayer(8, 16, rng), Conv2dLayer(16, 32, rng)]
        h, w = height, width
        for _ in self.convs:
            h = (h - 1) // 2 + 1
            w = (w - 1) // 2 + 1
        self.final = Linear(32 * h * w, out_dim, rng)
        self.feature_dim = out_dim

    def forward_t(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        h = en.reshape(x, (n, 1, self.height, self.width))
        for conv in self.convs:
            h = en.tanh(conv(h))
        h = en.reshape(h, (n, -1))
        return self.final(h)

    def params(self, prefix: str) -> dict:
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}.conv{i}"))
        out.update(self.final.params(f"{prefix}.final"))
        return out


# ---------------------------------------------------------------------------
# transforms


class Permutation:
    """Fixed column permutation; contributes exactly 0 to the log-det."""

    def __init__(self, perm: np.ndarray):
        self.perm = np.asarray(perm, dtype=np.intp)
        self.inv = np.argsort(self.perm)

    def forward_t(self, h: Tensor, feat: Tensor):
        return en.take_columns(h, self.perm), None

    def inverse_t(self, h: Tensor, feat: Tensor):
        return en.take_columns(h, self.inv), None

    def params(self, prefix: str) -> dict:
        return {}


class CouplingLayer:
    """Rational-quadratic spline coupling transform.

    Dimensions in id_cols pass through unchanged and, concatenated with the
    observation features, feed the conditioner that parameterizes the splines
    applied to tr_cols.  The conditioner's final layer is zero-initialized so
    a fresh layer is the identity.
    """

    def __init__(self, id_cols, tr_cols, feature_dim: int, bins: int, hidden: tuple,
                 tail_bound: float, min_bin_width: float, min_bin_height: float,
                 min_derivative: float, rng: np.random.Generator):
        self.id_cols = np.asarray(id_cols, dtype=np.intp)
        self.tr_cols = np.asarray(tr_cols, dtype=np.intp)
        if len(self.tr_cols) == 0:
            raise ValueError("CouplingLayer: no transformed dimensions")
        self.bins = bins
        self.tail_bound = tail_bound
        self.min_bin_width = min_bin_width
        self.min_bin_height = min_bin_height
        self.min_derivative = min_derivative
        n_in = len(self.id_cols) + feature_dim
        n_out = len(self.tr_cols) * (3 * bins - 1)
        self.conditioner = MLP(n_in, hidden, n_out, rng, zero_final=True)

    def _cond_input(self, h: Tensor, feat: Tensor) -> Tensor:
        if len(self.id_cols) == 0:
            return feat
        return en.concat([en.take_columns(h, self.id_cols), feat], axis=1)

    def _spline_params(self, cond_in: Tensor):
        raw = self.conditioner(cond_in)
        raw3 = en.reshape(raw, (cond_in.shape[0], len(self.tr_cols), 3 * self.bins - 1))
        return make_params(raw3, self.bins, self.tail_bound,
                           self.min_bin_width, self.min_bin_height, self.min_derivative)

    def forward_t(self, h: Tensor, feat: Tensor):
        p = self._spline_params(self._cond_input(h, feat))
        y_tr, ld = rq_forward(en.take_columns(h, self.tr_cols), p)
        return en.put_columns(h, self.tr_cols, y_tr), en.sum_(ld, axis=1)

    def inverse_t(self, h: Tensor, feat: Tensor):
        p = self._spline_params(self._cond_input(h, feat))
        u_tr, ld = rq_inverse(en.take_columns(h, self.tr_cols), p)
        return en.put_columns(h, self.tr_cols, u_tr), en.sum_(ld, axis=1)

    def params(self, prefix: str) -> dict:
        return self.conditioner.params(f"{prefix}.conditioner")


def spline_forward(layer: CouplingLayer, u: np.ndarray, cond: np.ndarray):
    """Numpy-facing spline evaluation for a layer given a prebuilt conditioner
    input; returns (y, per-row log_det)."""
    p = layer._spline_params(Tensor(np.atleast_2d(cond)))
    y, ld = rq_forward(Tensor(np.atleast_2d(u)), p)
    return y.data, ld.data.sum(axis=1)


def spline_inverse(layer: CouplingLayer, y: np.ndarray, cond: np.ndarray):
    p = layer._spline_params(Tensor(np.atleast_2d(cond)))
    u, ld = rq_inverse(Tensor(np.atleast_2d(y)), p)
    return u.data, ld.data.sum(axis=1)


# ---------------------------------------------------------------------------
# architecture + estimator


@dataclass(frozen=True)
class Architecture:
    """Everything needed to rebuild an estimator with identical shapes."""

    theta_dim: int
    x_shape: tuple          # (dx,) for summaries, (H, W) for images
    embedding: str = "identity"   # "identity" | "conv"
    embed_dim: int = 32
    n_layers: int = 5
    bins: int = 8
    hidden: tuple = (50, 50)
    tail_bound: float = 5.0
    min_bin_width: float = 1e-3
    min_bin_height: float = 1e-3
    min_derivative: float = 1e-3
    perm_seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, "x_shape", tuple(int(s) for s in self.x_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.embedding == "identity" and len(self.x_shape) != 1:
            raise ValueError("identity embedding requires 1-D summary observations")
        if self.embedding == "conv" and len(self.x_shape) != 2:
            raise ValueError("conv embedding requires (H, W) observations")

    @property
    def feature_dim(self) -> int:
        return self.x_shape[0] if self.embedding == "identity" else self.embed_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["x_shape"] = list(self.x_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        d["x_shape"] = tuple(d["x_shape"])
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class ConditionalDensityEstimator:
    """Spline-coupling flow over theta conditioned on (embedded) x."""

    def __init__(self, arch: Architecture, box: LogitBox, transforms: list, embedding):
        if box.dim != arch.theta_dim:
            raise ValueError(f"box dim {box.dim} != theta dim {arch.theta_dim}")
        self.arch = arch
        self.box = box
        self.transforms = transforms
        self.embedding = embedding
        self.x_standardizer: Standardizer | None = None

    # -- parameters ---------------------------------------------------------

    def params(self) -> dict:
        out = self.embedding.params("embedding")
        for i, tr in enumerate(self.transforms):
            out.update(tr.params(f"transforms.{i}"))
        return out

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params().values())

    # -- internal tensor paths (shared by training and inference) ------------

    def features_t(self, x_std: Tensor) -> Tensor:
        return self.embedding.forward_t(x_std)

    def boxspace_log_prob_t(self, z: Tensor, feat: Tensor) -> Tensor:
        """log q in boxspace coordinates: base log-density at the inverse-mapped
        point plus all inverse log-dets.  Differentiable through parameters."""
        h = z
        total = None
        for tr in reversed(self.transforms):
            h, ld = tr.inverse_t(h, feat)
            if ld is not None:
                total = ld if total is None else en.add(total, ld)
        base = en.add(en.mul(en.sum_(en.mul(h, h), axis=1), -0.5),
                      -0.5 * self.arch.theta_dim * _LOG_2PI)
        return base if total is None else en.add(base, total)

    def forward_boxspace(self, u: np.ndarray, feat: np.ndarray):
        """Base -> boxspace direction (sampling); returns (z, per-row log_det)."""
        h = Tensor(u)
        feat_t = Tensor(feat)
        total = np.zeros(len(u))
        for tr in self.transforms:
            h, ld = tr.forward_t(h, feat_t)
            if ld is not None:
                total = total + ld.data
        return h.data, total

    # -- preprocessing ------------------------------------------------------

    def _prepare_x(self, x: np.ndarray, n_rows: int) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == len(self.arch.x_shape):
            x = x[None]
        if x.shape[1:] != self.arch.x_shape:
            raise ValueError(f"x shape {x.shape[1:]} does not match {self.arch.x_shape}")
        if not np.isfinite(x).all():
            raise ValueError("x contains non-finite values")
        flat = x.reshape(len(x), -1)
        if self.x_standardizer is not None:
            flat = self.x_standardizer(flat)
        if len(flat) == 1 and n_rows > 1:
            flat = np.repeat(flat, n_rows, axis=0)
        if len(flat) != n_rows:
            raise ValueError(f"x batch {len(flat)} does not match theta batch {n_rows}")
        return flat

    # -- public API ---------------------------------------------------------

    def log_prob(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        """log q(theta | x) per row, in original theta coordinates."""
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        if not np.isfinite(theta).all():
            raise ValueError("theta contains non-finite values")
        self.box.validate(theta)
        z, ld_box = self.box.forward(theta)
        x_flat = self._prepare_x(x, len(theta))
        feat = self.features_t(Tensor(x_flat))
        lq = self.boxspace_log_prob_t(Tensor(z), feat)
        return lq.data + ld_box

    def sample(self, n: int, x: np.ndarray, seed) -> np.ndarray:
        """n i.i.d. draws from q(. | x); always strictly inside the box."""
        if n < 1:
            raise ValueError("sample: n must be >= 1")
        rng = np.random.default_rng(seed)
        u = rng.standard_normal((n, self.arch.theta_dim))
        x_flat = self._prepare_x(x, 1)
        feat = self.features_t(Tensor(x_flat)).data
        feat = np.repeat(feat, n, axis=0)
        z, _ = self.forward_boxspace(u, feat)
        return self.box.inverse(z)


def build_estimator(arch: Architecture, lower, upper, seed: int = 0) -> ConditionalDensityEstimator:
    """Construct a fresh estimator: identity-initialized splines, weights seeded
    by ``seed``, permutations fixed by ``arch.perm_seed``."""
    rng = np.random.default_rng(seed)
    perm_rng = np.random.default_rng(arch.perm_seed)
    box = LogitBox(lower, upper)
    d = arch.theta_dim

    if arch.embedding == "identity":
        embedding = IdentityEmbedding(arch.x_shape[0])
    elif arch.embedding == "conv":
        embedding = ConvEmbedding(arch.x_shape[0], arch.x_shape[1], arch.embed_dim, rng)
    else:
        raise ValueError(f"unknown embedding '{arch.embedding}'")

    cols = np.arange(d)
    transforms: list = []
    for i in range(arch.n_layers):
        if i > 0 and d > 1:
            transforms.append(Permutation(perm_rng.permutation(d)))
        if d == 1:
            id_cols, tr_cols = cols[:0], cols
        elif i % 2 == 0:
            id_cols, tr_cols = cols[: d // 2], cols[d // 2:]
        else:
            id_cols, tr_cols = cols[d // 2:], cols[: d // 2]
        transforms.append(CouplingLayer(
            id_cols, tr_cols, arch.feature_dim, arch.bins, arch.hidden,
            arch.tail_bound, arch.min_bin_width, arch.min_bin_height,
            arch.min_derivative, rng))
    return ConditionalDensityEstimator(arch, box, transforms, embedding)


def clone_weights(source: ConditionalDensityEstimator,
                  target: ConditionalDensityEstimator) -> None:
    """Copy every parameter, the box and the standardizer from source into
    target; the copies are independent so training one never mutates the other."""
    if source.arch != target.arch:
        diffs = [f.name for f in dataclasses.fields(Architecture)
                 if getattr(source.arch, f.name) != getattr(target.arch, f.name)]
        raise ArchitectureMismatchError(f"architectures differ in: {', '.join(diffs)}")
    sp, tp = source.params(), target.params()
    for name, tensor in tp.items():
        tensor.data[...] = sp[name].data
        tensor.grad = None
    target.box = source.box.copy()
    target.x_standardizer = None if source.x_standardizer is None else source.x_standardizer.copy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(estimator: ConditionalDensityEstimator, path) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "arch": estimator.arch.to_dict(),
        "arch_hash": estimator.arch.hash(),
        "box_lower": estimator.box.lower.tolist(),
        "box_upper": estimator.box.upper.tolist(),
        "has_standardizer": estimator.x_standardizer is not None,
        "std_eps": estimator.x_standardizer.eps if estimator.x_standardizer else None,
    }
    arrays = {f"param:{k}": t.data for k, t in estimator.params().items()}
    if estimator.x_standardizer is not None:
        arrays["std:mean"] = estimator.x_standardizer.mean
        arrays["std:std"] = estimator.x_standardizer.std
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> ConditionalDensityEstimator:
    try:
        data = np.load(path)
        keys = set(data.files)
    except Exception as exc:
        raise CheckpointCorruptError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in keys:
        raise CheckpointCorruptError(f"checkpoint {path} has no metadata record")
    meta = json.loads(str(data["__meta__"]))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format {meta.get('format_version')} != supported {FORMAT_VERSION}")
    arch = Architecture.from_dict(meta["arch"])
    if arch.hash() != meta["arch_hash"]:
        raise ArchitectureMismatchError("stored architecture hash does not match its fields")
    est = build_estimator(arch, meta["box_lower"], meta["box_upper"], seed=0)
    params = est.params()
    for name, tensor in params.items():
        key = f"param:{name}"
        if key not in keys:
            raise CheckpointCorruptError(f"checkpoint missing parameter '{name}'")
        stored = data[key]
        if stored.shape != tensor.data.shape:
            raise ArchitectureMismatchError(
                f"parameter '{name}' shape {stored.shape} != expected {tensor.data.shape}")
        tensor.data[...] = stored
    if meta["has_standardizer"]:
        if "std:mean" not in keys or "std:std" not in keys:
            raise CheckpointCorruptError("checkpoint missing standardizer arrays")
        est.x_standardizer = Standardizer(data["std:mean"], data["std:std"], meta["std_eps"])
    return est
