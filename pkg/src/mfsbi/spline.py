"""Monotone rational-quadratic splines with identity tails.

Each transformed dimension gets K bins on [-tail_bound, tail_bound],
parameterized by K unnormalized widths, K unnormalized heights and K-1
unnormalized interior knot derivatives (boundary derivatives are fixed at 1
so the spline meets the identity tails smoothly).  Outside the interval both
directions are the identity with zero log-det.

Derivatives are min_derivative + softplus(raw + shift) with shift chosen so
raw = 0 gives derivative exactly 1; together with uniform bins from zeroed
conditioner outputs this makes a zero-initialized layer the identity map.

The forward direction evaluates the rational quadratic directly; the inverse
solves the per-bin quadratic with the numerically stable root
xi = 2c / (-b - sqrt(b^2 - 4ac)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as en
from .engine import DomainError, Tensor


def derivative_shift(min_derivative: float) -> float:
    """Raw-offset making softplus(0 + shift) + min_derivative == 1."""
    return float(np.log(np.expm1(1.0 - min_derivative)))


@dataclass
class SplineParams:
    """Knot tensors, shapes [batch, dims, K(+1)]."""

    cumwidths: Tensor   # [B, d, K+1] knot x positions, first = -bound, last = +bound
    widths: Tensor      # [B, d, K] bin widths in x units
    cumheights: Tensor  # [B, d, K+1]
    heights: Tensor     # [B, d, K]
    derivs: Tensor      # [B, d, K+1] knot derivatives, boundaries exactly 1
    bins: int
    tail_bound: float


def make_params(raw: Tensor, bins: int, tail_bound: float,
                min_bin_width: float = 1e-3, min_bin_height: float = 1e-3,
                min_derivative: float = 1e-3) -> SplineParams:
    """Turn raw conditioner output [B, d, 3K-1] into normalized knot tensors."""
    k = bins
    if raw.shape[-1] != 3 * k - 1:
        raise en.ShapeError(f"make_params: expected last dim {3 * k - 1}, got {raw.shape}")
    raw_w = en.slice_(raw, 0, k)
    raw_h = en.slice_(raw, k, 2 * k)
    raw_d = en.slice_(raw, 2 * k, 3 * k - 1)

    span = 2.0 * tail_bound
    zeros = Tensor(np.zeros(raw.shape[:-1] + (1,)))
    ones = Tensor(np.ones(raw.shape[:-1] + (1,)))

    w_norm = en.add(en.mul(en.softmax(raw_w), 1.0 - k * min_bin_width), min_bin_width)
    widths = en.mul(w_norm, span)
    cumwidths = en.sub(en.mul(en.concat([zeros, en.cumsum(w_norm)], axis=-1), span), tail_bound)

    h_norm = en.add(en.mul(en.softmax(raw_h), 1.0 - k * min_bin_height), min_bin_height)
    heights = en.mul(h_norm, span)
    cumheights = en.sub(en.mul(en.concat([zeros, en.cumsum(h_norm)], axis=-1), span), tail_bound)

    d_interior = en.add(en.softplus(en.add(raw_d, derivative_shift(min_derivative))), min_derivative)
    derivs = en.concat([ones, d_interior, ones], axis=-1)
    return SplineParams(cumwidths, widths, cumheights, heights, derivs, k, tail_bound)


def _bin_index(values: np.ndarray, knots: np.ndarray, bins: int) -> np.ndarray:
    """Index of the bin containing each value; clipped so boundary points land
    in the first/last bin.  Shape [B, d, 1]."""
    idx = (values[..., None] >= knots).sum(axis=-1) - 1
    return np.clip(idx, 0, bins - 1)[..., None]


def _gather_knots(p: SplineParams, idx: np.ndarray, from_y: bool):
    shape = idx.shape[:-1]

    def pick(t: Tensor, offset: int = 0) -> Tensor:
        return en.reshape(en.gather(t, idx + offset), shape)

    xk = pick(p.cumwidths)
    wk = pick(p.widths)
    yk = pick(p.cumheights)
    hk = pick(p.heights)
    dk = pick(p.derivs)
    dk1 = pick(p.derivs, 1)
    return xk, wk, yk, hk, dk, dk1


def _forward_logdet(sk: Tensor, dk: Tensor, dk1: Tensor, xi: Tensor,
                    xi1m: Tensor, denom: Tensor) -> Tensor:
    """log dy/du = log s^2 (d_{k+1} xi^2 + 2 s xi(1-xi) + d_k (1-xi)^2) - 2 log denom."""
    one_m = en.sub(1.0, xi)
    num = en.add(en.add(en.mul(dk1, en.mul(xi, xi)), en.mul(en.mul(sk, 2.0), xi1m)),
                 en.mul(dk, en.mul(one_m, one_m)))
    return en.sub(en.add(en.mul(en.log(sk), 2.0), en.log(num)), en.mul(en.log(denom), 2.0))


def rq_forward(u: Tensor, p: SplineParams):
    """Spline applied inside [-bound, bound], identity outside.

    Returns (y, log_det) with shapes equal to u; log_det is per element.
    """
    inside = np.abs(u.data) <= p.tail_bound
    u_safe = en.where(inside, u, 0.0)
    idx = _bin_index(u_safe.data, p.cumwidths.data, p.bins)
    xk, wk, yk, hk, dk, dk1 = _gather_knots(p, idx, from_y=False)

    sk = en.div(hk, wk)
    xi = en.div(en.sub(u_safe, xk), wk)
    xi1m = en.mul(xi, en.sub(1.0, xi))
    r = en.sub(en.add(dk1, dk), en.mul(sk, 2.0))
    denom = en.add(sk, en.mul(r, xi1m))
    y_spline = en.add(yk, en.div(en.mul(hk, en.add(en.mul(sk, en.mul(xi, xi)), en.mul(dk, xi1m))),
                                 denom))
    ld_spline = _forward_logdet(sk, dk, dk1, xi, xi1m, denom)
    y = en.where(inside, y_spline, u)
    ld = en.where(inside, ld_spline, 0.0)
    return y, ld


def rq_inverse(y: Tensor, p: SplineParams):
    """Exact inverse via the stable quadratic root; log_det is the inverse's own
    (i.e. the negated forward log-det at the recovered point)."""
    inside = np.abs(y.data) <= p.tail_bound
    y_safe = en.where(inside, y, 0.0)
    idx = _bin_index(y_safe.data, p.cumheights.data, p.bins)
    xk, wk, yk, hk, dk, dk1 = _gather_knots(p, idx, from_y=True)

    sk = en.div(hk, wk)
    dy = en.sub(y_safe, yk)
    r = en.sub(en.add(dk1, dk), en.mul(sk, 2.0))
    a = en.add(en.mul(hk, en.sub(sk, dk)), en.mul(dy, r))
    b = en.sub(en.mul(hk, dk), en.mul(dy, r))
    c = en.neg(en.mul(sk, dy))
    disc = en.sub(en.mul(b, b), en.mul(en.mul(a, c), 4.0))
    if (disc.data < -1e-10).any():
        raise DomainError("rq_inverse: negative discriminant")
    disc = en.where(disc.data < 0.0, 0.0, disc)
    xi = en.div(en.mul(c, 2.0), en.neg(en.add(b, en.sqrt(disc))))
    u_spline = en.add(xk, en.mul(xi, wk))

    xi1m = en.mul(xi, en.sub(1.0, xi))
    denom = en.add(sk, en.mul(r, xi1m))
    ld_spline = en.neg(_forward_logdet(sk, dk, dk1, xi, xi1m, denom))
    u = en.where(inside, u_spline, y)
    ld = en.where(inside, ld_spline, 0.0)
    return u, ld
