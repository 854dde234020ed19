"""Point-cloud surfaces: nearest-neighbor queries, the data-dependent
diagonal metric, the surface-adherence regularizer for interpolant
training, and the surface-adherence evaluation metric.

Point-cloud files are plain text, one ``x y z`` triple per line
(whitespace- or comma-separated); lines starting with ``#`` are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .coupling import ConditionalDataset
from .interpolant import interp_dt, interp_eval


@dataclass
class LandParams:
    sigma: float = 0.125
    eps: float = 1e-2

    def __post_init__(self):
        if self.sigma <= 0 or self.eps <= 0:
            raise ValueError(f"sigma and eps must be positive: {self.sigma}, {self.eps}")


class PointCloud:
    """N x 3 surface measurements with a uniform-grid index over (x, y)."""

    def __init__(self, points: np.ndarray):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"point cloud must be (N, 3) with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ad.NonFiniteError("point cloud")
        self.points = pts
        self._build_index()

    def _build_index(self):
        xy = self.points[:, :2]
        self._lo = xy.min(axis=0)
        span = xy.max(axis=0) - self._lo
        n = self.points.shape[0]
        # aim for O(1) points per cell
        self._cell = max(float(span.max()) / max(np.sqrt(n), 1.0), 1e-12)
        ij = np.floor((xy - self._lo) / self._cell).astype(np.int64)
        self._bounds = (int(ij[:, 0].min()), int(ij[:, 0].max()),
                        int(ij[:, 1].min()), int(ij[:, 1].max()))
        self._cells = {}
        for idx in range(n):
            self._cells.setdefault((ij[idx, 0], ij[idx, 1]), []).append(idx)

    def nearest_xy(self, point) -> int:
        """Index of the point minimizing horizontal (x, y) distance.

        Ties break toward the lowest index. The query's third coordinate,
        if present, is ignored.
        """
        p = np.asarray(point, dtype=np.float64).ravel()[:2]
        ci = int(np.floor((p[0] - self._lo[0]) / self._cell))
        cj = int(np.floor((p[1] - self._lo[1]) / self._cell))
        imin, imax, jmin, jmax = self._bounds
        # farthest occupied cell in Chebyshev distance bounds the search
        ring_cap = max(abs(ci - imin), abs(ci - imax),
                       abs(cj - jmin), abs(cj - jmax))
        best_d2 = np.inf
        best_idx = -1
        xy = self.points[:, :2]
        for ring in range(ring_cap + 1):
            # cells in ring r sit at least (r-1) cell widths from the query
            if best_idx >= 0 and (ring - 1) * self._cell > np.sqrt(best_d2):
                break
            for ii in range(max(ci - ring, imin), min(ci + ring, imax) + 1):
                for jj in range(max(cj - ring, jmin), min(cj + ring, jmax) + 1):
                    if ring > 0 and abs(ii - ci) != ring and abs(jj - cj) != ring:
                        continue
                    for idx in self._cells.get((ii, jj), ()):
                        d2 = (xy[idx, 0] - p[0]) ** 2 + (xy[idx, 1] - p[1]) ** 2
                        if d2 < best_d2 or (d2 == best_d2 and idx < best_idx):
                            best_d2 = d2
                            best_idx = idx
        return best_idx

    def nearest_xy_brute(self, point) -> int:
        p = np.asarray(point, dtype=np.float64).ravel()[:2]
        d2 = np.sum((self.points[:, :2] - p) ** 2, axis=1)
        return int(np.argmin(d2))

    def surface_height(self, point) -> float:
        return float(self.points[self.nearest_xy(point), 2])


def nearest_neighbor_xy(point, cloud: PointCloud) -> np.ndarray:
    """The cloud point horizontally nearest to `point`."""
    return cloud.points[cloud.nearest_xy(point)].copy()


def land_metric(z, cloud: PointCloud, params: LandParams) -> np.ndarray:
    """Diagonal data-dependent metric at z: entry d is the reciprocal of the
    kernel-weighted squared residual of coordinate d plus eps. Large away
    from the cloud, so off-surface motion is expensive."""
    z = np.asarray(z, dtype=np.float64).ravel()
    m = cloud.points
    w = np.exp(-np.sum((z - m) ** 2, axis=1) / (2.0 * params.sigma ** 2))
    resid = w @ (z - m) ** 2
    return 1.0 / (resid + params.eps)


def _land_quadratic(z: ad.Node, dz: ad.Node, cloud: PointCloud,
                    params: LandParams) -> ad.Node:
    """Batch mean of dz^T G(z) dz as a graph node (B x 3 inputs)."""
    m = cloud.points
    mt = ad.leaf(m.T)
    msq = ad.leaf(np.sum(m * m, axis=1))
    sz = ad.reduce_sum(ad.square(z), axis=1, keepdims=True)
    cross = ad.matmul(z, mt)
    d2 = ad.add(ad.sub(sz, ad.smul(cross, 2.0)), msq)
    w = ad.exp(ad.smul(d2, -1.0 / (2.0 * params.sigma ** 2)))
    s0 = ad.reduce_sum(w, axis=1, keepdims=True)
    s1 = ad.matmul(w, ad.leaf(m))
    s2 = ad.matmul(w, ad.leaf(m * m))
    den = ad.add(ad.add(ad.sub(ad.mul(ad.square(z), s0),
                               ad.smul(ad.mul(z, s1), 2.0)), s2),
                 ad.leaf(np.asarray(params.eps)))
    g = ad.reciprocal(den)
    return ad.reduce_mean(ad.reduce_sum(ad.mul(ad.square(dz), g), axis=1))


def mfm_loss(interp, batches, cloud: PointCloud, params: LandParams,
             h: float = 1e-3) -> ad.Node:
    """Mean quadratic form of interpolant slopes under the cloud metric,
    averaged over populations; differentiable w.r.t. the interpolant."""
    if interp.dim != 3:
        raise ValueError(f"surface regularization needs 3-D states, got dim {interp.dim}")
    terms = []
    for x, y, t in batches:
        z = interp_eval(interp, x, y, t)
        dz = interp_dt(interp, x, y, t, h)
        terms.append(_land_quadratic(z, dz, cloud, params))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.smul(total, 1.0 / len(terms))


def mfm_term(cloud: PointCloud, params: LandParams = None):
    """Adapter for the trainers' `surface_term` hook."""
    params = params or LandParams()

    def term(interp, batches, cfg):
        return mfm_loss(interp, batches, cloud, params, cfg.fd_step)

    return term


def surface_adherence(states: np.ndarray, cloud: PointCloud) -> float:
    """Mean over trajectories of summed per-step |height - surface height|.

    `states` is (steps+1, n, 3) from the integrator (a single (steps+1, 3)
    trajectory is accepted). The initial state is excluded: steps 1..T count.
    """
    states = np.asarray(states, dtype=np.float64)
    if states.ndim == 2:
        states = states[:, None, :]
    if states.ndim != 3 or states.shape[2] != 3 or states.shape[0] < 2:
        raise ValueError(f"need (steps+1, n, 3) states with >= 1 step, got {states.shape}")
    total = 0.0
    for step in range(1, states.shape[0]):
        for n in range(states.shape[1]):
            z = states[step, n]
            total += abs(z[2] - cloud.surface_height(z))
    return total / states.shape[1]


def make_bump_cloud(extent: float = 2.0, n_grid: int = 64, amplitude: float = 1.0,
                    width: float = 0.55) -> PointCloud:
    """Deterministic Gaussian-bump heightfield sampled on a regular grid."""
    ax = np.linspace(-extent, extent, n_grid)
    gx, gy = np.meshgrid(ax, ax, indexing="ij")
    gz = amplitude * np.exp(-(gx ** 2 + gy ** 2) / (2.0 * width ** 2))
    return PointCloud(np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()]))


def swarm_scenario(cloud: PointCloud, src_centers, dst_centers,
                   variances=(0.02, 0.03), k: int = 4000,
                   seed: int = 0) -> ConditionalDataset:
    """Gaussian start/goal populations on a surface.

    Horizontal coordinates are sampled around the given centers (source
    variance first, destination second); heights snap to the horizontally
    nearest cloud point.
    """
    src_centers = [np.asarray(c, dtype=np.float64).ravel()[:2] for c in src_centers]
    dst_centers = [np.asarray(c, dtype=np.float64).ravel()[:2] for c in dst_centers]
    if len(src_centers) != len(dst_centers) or not src_centers:
        raise ValueError("need matching, non-empty source/destination center lists")
    rng = np.random.default_rng(seed)
    var_x, var_y = variances

    def sample(center, var):
        hor = rng.normal(0.0, np.sqrt(var), size=(k, 2)) + center
        heights = np.array([cloud.surface_height(p) for p in hor])
        return np.column_stack([hor, heights])

    xs = [sample(c, var_x) for c in src_centers]
    ys = [sample(c, var_y) for c in dst_centers]
    return ConditionalDataset(xs=xs, ys=ys)


def save_point_cloud(path, cloud: PointCloud):
    with open(path, "w") as fh:
        fh.write("# x y z\n")
        for p in cloud.points:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")


def load_point_cloud(path) -> PointCloud:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) < 3:
                raise ValueError(f"{path}:{lineno}: expected 'x y z', got {line!r}")
            try:
                rows.append([float(v) for v in parts[:3]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
    if not rows:
        raise ValueError(f"{path}: no points found")
    return PointCloud(np.asarray(rows))
