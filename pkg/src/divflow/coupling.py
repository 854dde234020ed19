"""Joint (x, y) sampling: per-population independent couplings and
minibatch optimal-transport couplings.

Dataset files use the CSV schema ``cond,domain,dim_0,...,dim_{d-1}`` with
``domain`` one of ``source``/``target`` (see `divflow.data` for IO).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .autodiff import ShapeError


@dataclass
class ConditionalDataset:
    """Per-population source/target sample sets; populations share dim d."""
    xs: list          # Q arrays, (n_q, d)
    ys: list          # Q arrays, (m_q, d)
    weights: np.ndarray = None

    def __post_init__(self):
        self.xs = [np.asarray(x, dtype=np.float64) for x in self.xs]
        self.ys = [np.asarray(y, dtype=np.float64) for y in self.ys]
        if len(self.xs) != len(self.ys) or not self.xs:
            raise ValueError("need matching, non-empty source/target lists")
        dims = {a.shape[1] for a in self.xs} | {a.shape[1] for a in self.ys}
        if len(dims) != 1:
            raise ShapeError("dataset", [a.shape for a in self.xs + self.ys])
        if any(a.shape[0] < 1 for a in self.xs + self.ys):
            raise ValueError("every population needs at least one sample per domain")
        if self.weights is None:
            self.weights = np.full(len(self.xs), 1.0 / len(self.xs))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"population weights must sum to 1, got {self.weights}")

    @property
    def q(self) -> int:
        return len(self.xs)

    @property
    def dim(self) -> int:
        return self.xs[0].shape[1]


@dataclass
class PairBatch:
    x: np.ndarray
    y: np.ndarray
    cond: np.ndarray
    seed: int = field(default=None)

    def __post_init__(self):
        if self.x.shape != self.y.shape:
            raise ShapeError("pair-batch", [self.x.shape, self.y.shape])
        if self.cond.shape[0] != self.x.shape[0]:
            raise ShapeError("pair-batch", [self.cond.shape, self.x.shape])


def independent_coupling(ds: ConditionalDataset, q: int, batch_size: int,
                         rng: np.random.Generator, seed: int = None) -> PairBatch:
    """x and y drawn independently, with replacement, from population q."""
    if not 0 <= q < ds.q:
        raise ValueError(f"population index {q} out of range [0, {ds.q})")
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    xi = rng.integers(ds.xs[q].shape[0], size=batch_size)
    yi = rng.integers(ds.ys[q].shape[0], size=batch_size)
    return PairBatch(ds.xs[q][xi], ds.ys[q][yi],
                     np.full(batch_size, q, dtype=np.int64), seed=seed)


def marginal_coupling(ds: ConditionalDataset, batch_size: int,
                      rng: np.random.Generator, seed: int = None) -> PairBatch:
    """Independent coupling of the population-mixture marginals."""
    qx = rng.choice(ds.q, size=batch_size, p=ds.weights)
    qy = rng.choice(ds.q, size=batch_size, p=ds.weights)
    x = np.stack([ds.xs[q][rng.integers(ds.xs[q].shape[0])] for q in qx])
    y = np.stack([ds.ys[q][rng.integers(ds.ys[q].shape[0])] for q in qy])
    return PairBatch(x, y, qx.astype(np.int64), seed=seed)


def _duals(cost: np.ndarray, perm: np.ndarray):
    """Feasible duals (u, v) with u_i + v_j <= c_ij, tight on the matching.

    Bellman-Ford on the difference constraints v_j - v_{p(i)} <= c_ij - c_{i,p(i)},
    vectorized one relaxation sweep at a time.
    """
    n = cost.shape[0]
    v = np.zeros(n)
    matched = cost[np.arange(n), perm]
    for _ in range(n):
        cand = np.min((v[perm] - matched)[:, None] + cost, axis=0)
        nv = np.minimum(v, cand)
        if np.array_equal(nv, v):
            break
        v = nv
    u = matched - v[perm]
    return u, v


def _lex_matching(adj, n: int):
    """Lexicographically smallest perfect matching over row adjacency lists,
    or None if the graph has no perfect matching."""

    def feasible(start_row, banned_cols):
        match_col = {}

        def try_row(r, visited):
            for col in adj[r]:
                if col in banned_cols or col in visited:
                    continue
                visited.add(col)
                if col not in match_col or try_row(match_col[col], visited):
                    match_col[col] = r
                    return True
            return False

        for r in range(start_row, n):
            if not try_row(r, set()):
                return False
        return True

    fixed = {}
    used = set()
    for i in range(n):
        placed = False
        for j in adj[i]:
            if j in used:
                continue
            if feasible(i + 1, used | {j}):
                fixed[i] = j
                used.add(j)
                placed = True
                break
        if not placed:
            return None
    return np.array([fixed[i] for i in range(n)], dtype=np.int64)


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost assignment of a square cost matrix.

    Returns the column permutation; among cost-minimizing permutations the
    lexicographically smallest one is selected (ties are resolved through the
    tight-edge graph of a feasible dual solution).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ShapeError("hungarian", [cost.shape])
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian: cost matrix must be finite")
    n = cost.shape[0]
    if n == 1:
        return np.zeros(1, dtype=np.int64)
    _, perm = linear_sum_assignment(cost)
    perm = perm.astype(np.int64)

    u, v = _duals(cost, perm)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    tight = np.abs(cost - u[:, None] - v[None, :]) <= tol
    if tight.sum() == n:
        return perm
    adj = [np.flatnonzero(tight[i]).tolist() for i in range(n)]
    lex = _lex_matching(adj, n)
    if lex is None:
        return perm
    return lex


def ot_coupling(x: np.ndarray, y: np.ndarray, cond: np.ndarray = None,
                seed: int = None) -> PairBatch:
    """Re-pair a minibatch by minimum squared-Euclidean assignment."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError("ot-coupling", [x.shape, y.shape])
    perm = hungarian(cdist(x, y, "sqeuclidean"))
    if cond is None:
        cond = np.zeros(x.shape[0], dtype=np.int64)
    return PairBatch(x, y[perm], np.asarray(cond, dtype=np.int64), seed=seed)
