"""Interpolants between paired samples and the cross-population repulsion loss.

A learnable interpolant is ``I(x, y, t) = (1-t) x + t y + t (1-t) g(x, y, t)``
with ``g`` a small MLP; the ``t (1-t)`` factor pins the endpoints exactly for
any parameters. Its time derivative is built from a central finite difference
of ``g`` in t, embedded in the graph so the result stays differentiable with
respect to the network parameters (no second-order autodiff needed).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn


def _t_col(t, batch: int) -> np.ndarray:
    """Normalize t to a (B, 1) float64 column, validating range."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(batch, float(t))
    if t.shape != (batch,):
        raise ad.ShapeError("interpolant-t", [t.shape, (batch,)])
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError(f"t outside [0,1]: range [{t.min()}, {t.max()}]")
    return t.reshape(-1, 1)


def linear_interp(x: np.ndarray, y: np.ndarray, t) -> np.ndarray:
    """(1-t) x + t y."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ad.ShapeError("linear-interp", [x.shape, y.shape])
    tc = _t_col(t, x.shape[0]) if x.ndim == 2 else None
    if x.ndim == 1:
        t = float(np.asarray(t))
        if not 0.0 <= t <= 1.0:
            raise ValueError(f"t outside [0,1]: {t}")
        return (1.0 - t) * x + t * y
    return (1.0 - tc) * x + tc * y


def linear_interp_dt(x: np.ndarray, y: np.ndarray, t=None) -> np.ndarray:
    """Time derivative of the linear interpolant: y - x for any t."""
    return np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64)


@dataclass
class LearnableInterpolant:
    """Residual network plus dimension; see module docstring for the map."""
    gamma: nn.MlpParams
    dim: int
    use_time_input: bool = True

    def leaves(self):
        return self.gamma.leaves()


def make_interpolant(dim: int, hidden=(64, 64), seed: int = 0,
                     use_time_input: bool = True) -> LearnableInterpolant:
    in_dim = 2 * dim + (1 if use_time_input else 0)
    gamma = nn.mlp_init([in_dim, *hidden, dim], seed=seed)
    return LearnableInterpolant(gamma=gamma, dim=dim, use_time_input=use_time_input)


def _gamma_graph(interp: LearnableInterpolant, x: np.ndarray, y: np.ndarray,
                 tc: np.ndarray) -> ad.Node:
    cols = [ad.leaf(x), ad.leaf(y)]
    if interp.use_time_input:
        cols.append(ad.leaf(tc))
    return nn.mlp_forward(interp.gamma, ad.concat(cols, axis=1))


def _gamma_np(interp: LearnableInterpolant, x: np.ndarray, y: np.ndarray,
              tc: np.ndarray) -> np.ndarray:
    if interp.use_time_input:
        inp = np.concatenate([x, y, tc], axis=1)
    else:
        inp = np.concatenate([x, y], axis=1)
    return nn.mlp_apply(interp.gamma, inp)


def _check_xy(op: str, interp: LearnableInterpolant, x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if y.ndim == 1:
        y = y.reshape(1, -1)
    if x.shape != y.shape or x.shape[1] != interp.dim:
        raise ad.ShapeError(op, [x.shape, y.shape, (interp.dim,)])
    return x, y


def interp_eval(interp: LearnableInterpolant, x, y, t) -> ad.Node:
    """Graph node for I(x, y, t); differentiable w.r.t. the gamma net."""
    x, y = _check_xy("interp-eval", interp, x, y)
    tc = _t_col(t, x.shape[0])
    g = _gamma_graph(interp, x, y, tc)
    base = ad.leaf((1.0 - tc) * x + tc * y)
    return ad.add(base, ad.mul(ad.leaf(tc * (1.0 - tc)), g))


def interp_eval_np(interp: LearnableInterpolant, x, y, t) -> np.ndarray:
    x, y = _check_xy("interp-eval", interp, x, y)
    tc = _t_col(t, x.shape[0])
    g = _gamma_np(interp, x, y, tc)
    return (1.0 - tc) * x + tc * y + tc * (1.0 - tc) * g


def _dt_windows(tc: np.ndarray, h: float):
    """Central-difference endpoints clipped into [0,1] (one-sided at edges)."""
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    tp = np.minimum(tc + h, 1.0)
    tm = np.maximum(tc - h, 0.0)
    return tp, tm, tp - tm


def interp_dt(interp: LearnableInterpolant, x, y, t, h: float = 1e-3) -> ad.Node:
    """Graph node for the time derivative of I(x, y, t).

    y - x + (1-2t) g + t(1-t) * [g(t+h) - g(t-h)] / (2h), with the
    difference quotient built from two extra gamma evaluations.
    """
    x, y = _check_xy("interp-dt", interp, x, y)
    tc = _t_col(t, x.shape[0])
    g = _gamma_graph(interp, x, y, tc)
    out = ad.add(ad.leaf(y - x), ad.mul(ad.leaf(1.0 - 2.0 * tc), g))
    if interp.use_time_input:
        tp, tm, denom = _dt_windows(tc, h)
        gp = _gamma_graph(interp, x, y, tp)
        gm = _gamma_graph(interp, x, y, tm)
        dg = ad.mul(ad.leaf(1.0 / denom), ad.sub(gp, gm))
        out = ad.add(out, ad.mul(ad.leaf(tc * (1.0 - tc)), dg))
    elif h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    return out


def interp_dt_np(interp: LearnableInterpolant, x, y, t, h: float = 1e-3) -> np.ndarray:
    x, y = _check_xy("interp-dt", interp, x, y)
    tc = _t_col(t, x.shape[0])
    g = _gamma_np(interp, x, y, tc)
    out = (y - x) + (1.0 - 2.0 * tc) * g
    if interp.use_time_input:
        tp, tm, denom = _dt_windows(tc, h)
        dg = (1.0 / denom) * (_gamma_np(interp, x, y, tp) - _gamma_np(interp, x, y, tm))
        out = out + tc * (1.0 - tc) * dg
    elif h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    return out


@dataclass
class KernelParams:
    """Bandwidths of the repulsion kernel; eta floors the kernel in (0,1)."""
    sigma1: float
    sigma2: float
    eta: float = 1e-4

    def __post_init__(self):
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError(f"bandwidths must be positive: {self.sigma1}, {self.sigma2}")
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0,1), got {self.eta}")


def kernel_gamma(a, sigma: float, eta: float):
    """max(exp(-a^2 / (2 sigma^2)), eta) for a >= 0."""
    a = np.asarray(a, dtype=np.float64)
    return np.maximum(np.exp(-(a * a) / (2.0 * sigma * sigma)), eta)


def _kernel_gamma_sq_graph(sqdist: ad.Node, sigma: float, eta: float) -> ad.Node:
    # same kernel, applied to an already-squared distance node
    return ad.maxc(ad.exp(ad.smul(sqdist, -1.0 / (2.0 * sigma * sigma))), eta)


def repulsion_loss(interp: LearnableInterpolant, batches, kernel: KernelParams,
                   paths=None) -> ad.Node:
    """Mean pairwise space-time closeness of cross-population interpolant values.

    `batches` is one (x, y, t) triple per population, equal batch sizes, each
    sample carrying its own t. Pair terms are
    ``kernel_t(|t_i - t_j|) * kernel_s(||z_i - z_j||)`` matched elementwise
    over the batch; the result is the mean over pairs and batch entries.

    `paths`, when given, receives the per-population interpolant nodes so
    callers can attach extra penalties to the same graph.
    """
    if len(batches) < 2:
        raise ValueError(f"repulsion needs at least 2 populations, got {len(batches)}")
    sizes = {np.asarray(b[0]).shape[0] for b in batches}
    if len(sizes) != 1:
        raise ad.ShapeError("repulsion-loss", [np.asarray(b[0]).shape for b in batches])

    zs, ts = [], []
    for x, y, t in batches:
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t = np.full(x.shape[0], float(t))
        zs.append(interp_eval(interp, x, y, t))
        ts.append(t)
    if paths is not None:
        paths.extend(zs)

    terms = []
    q = len(batches)
    for i in range(q - 1):
        for j in range(i + 1, q):
            tk = kernel_gamma(np.abs(ts[i] - ts[j]), kernel.sigma2, kernel.eta)
            diff = ad.sub(zs[i], zs[j])
            sq = ad.reduce_sum(ad.square(diff), axis=1)
            ks = _kernel_gamma_sq_graph(sq, kernel.sigma1, kernel.eta)
            terms.append(ad.reduce_mean(ad.mul(ad.leaf(tk), ks)))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.smul(total, 1.0 / len(terms))
