"""Synthetic dataset generation and CSV IO.

Presets (`blobs2d`, `blobs3d`, `swarm`) rebuild the experimental setups used
throughout: antipodal Gaussian populations translated by ``y = -x``, and a
two-swarm navigation problem on a synthetic bump surface.

CSV schema: header ``cond,domain,dim_0,...,dim_{d-1}``, domain in
{source, target}. A paired evaluation file uses the same schema with rows
paired by order within each condition (row k of source matches row k of
target).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .coupling import ConditionalDataset
from . import surface as surf


@dataclass
class BlobSpec:
    dim: int
    means: list                      # one mean vector per population
    variance: float = 1.0
    n_per_condition: int = 2000
    seed: int = 0

    def __post_init__(self):
        self.means = [np.asarray(m, dtype=np.float64).ravel() for m in self.means]
        if any(m.shape != (self.dim,) for m in self.means):
            raise ValueError(f"means must all have dim {self.dim}")
        if self.variance <= 0:
            raise ValueError(f"variance must be positive, got {self.variance}")


def gen_blobs(spec: BlobSpec) -> list:
    """Per-population i.i.d. Gaussian source samples; deterministic under seed."""
    rng = np.random.default_rng(spec.seed)
    std = np.sqrt(spec.variance)
    return [rng.normal(0.0, std, size=(spec.n_per_condition, spec.dim)) + m
            for m in spec.means]


def apply_gstar(x: np.ndarray) -> np.ndarray:
    """The ground-truth translation used by the synthetic setups: y = -x."""
    return -np.asarray(x, dtype=np.float64)


@dataclass
class PairedSplit:
    """Index-paired (x, g*(x)) samples per condition, for translation error."""
    xs: list
    ys: list

    def __post_init__(self):
        if len(self.xs) != len(self.ys):
            raise ValueError("paired split needs equal condition counts")
        for x, y in zip(self.xs, self.ys):
            if x.shape != y.shape:
                raise ValueError("paired rows must align per condition")


def blob_dataset(spec: BlobSpec, n_eval: int = 500):
    """Unpaired training dataset plus a paired evaluation split.

    Targets come from independently drawn source-distributed samples pushed
    through y = -x, so X_q and Y_q are unpaired; the eval split keeps the
    (x, -x) pairing for translation error.
    """
    xs = gen_blobs(spec)
    spec_y = BlobSpec(spec.dim, spec.means, spec.variance,
                      spec.n_per_condition, seed=spec.seed + 1)
    ys = [apply_gstar(x) for x in gen_blobs(spec_y)]
    spec_e = BlobSpec(spec.dim, spec.means, spec.variance, n_eval,
                      seed=spec.seed + 2)
    ex = gen_blobs(spec_e)
    split = PairedSplit(xs=ex, ys=[apply_gstar(x) for x in ex])
    return ConditionalDataset(xs=xs, ys=ys), split


# Preset blob centers. The paper-style geometry is antipodal populations at
# (1,1)/(1,-1) scaled up so the populations are well separated relative to
# their unit variance (separation 10 sigma); at 2-sigma separation the
# populations overlap so heavily that no translation method can be told
# apart pointwise.
BLOBS2D_MEANS = [(5.0, 5.0), (5.0, -5.0)]
BLOBS3D_MEANS = [(5.0, 5.0, 0.0), (5.0, -5.0, 0.0)]

SWARM_SRC = [(-1.4, -0.45), (-1.4, 0.45)]
SWARM_DST = [(1.4, 0.45), (1.4, -0.45)]

PRESETS = ("blobs2d", "blobs3d", "swarm")


def preset_spec(name: str, seed: int = 0, n: int = 2000) -> BlobSpec:
    if name == "blobs2d":
        return BlobSpec(2, BLOBS2D_MEANS, 1.0, n, seed)
    if name == "blobs3d":
        return BlobSpec(3, BLOBS3D_MEANS, 1.0, n, seed)
    raise ValueError(f"unknown blob preset {name!r}")


def make_preset(name: str, seed: int = 0, n: int = 2000, n_eval: int = 500):
    """Returns (dataset, paired_split_or_None, cloud_or_None)."""
    if name in ("blobs2d", "blobs3d"):
        ds, split = blob_dataset(preset_spec(name, seed, n))
        return ds, split, None
    if name == "swarm":
        cloud = surf.make_bump_cloud()
        ds = surf.swarm_scenario(cloud, SWARM_SRC, SWARM_DST, k=n, seed=seed)
        return ds, None, cloud
    raise ValueError(f"unknown preset {name!r}; pick one of {PRESETS}")


def sdc_check(source_sets, resolution: int = 4, tolerance: float = 0.02) -> dict:
    """Heuristic diversity report over a finite family of box pairs.

    Boxes are the cells of a `resolution`-per-axis grid over the pooled
    source bounding box. For every unordered cell pair (A, B) the report
    counts whether some population's empirical masses on A and B differ by
    more than `tolerance`. Advisory only: the underlying condition
    quantifies over all open set pairs, which is not testable.
    """
    source_sets = [np.asarray(s, dtype=np.float64) for s in source_sets]
    if len(source_sets) < 2:
        raise ValueError("diversity check needs at least 2 populations")
    pooled = np.concatenate(source_sets)
    lo, hi = pooled.min(axis=0), pooled.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    d = pooled.shape[1]

    def cell_of(pts):
        ij = np.floor((pts - lo) / span * resolution).astype(np.int64)
        ij = np.clip(ij, 0, resolution - 1)
        return sum(ij[:, k] * resolution ** k for k in range(d))

    n_cells = resolution ** d
    masses = np.zeros((len(source_sets), n_cells))
    for qi, s in enumerate(source_sets):
        counts = np.bincount(cell_of(s), minlength=n_cells)
        masses[qi] = counts / s.shape[0]

    n_pairs = 0
    n_diverse = 0
    for a in range(n_cells - 1):
        for b in range(a + 1, n_cells):
            n_pairs += 1
            if np.any(np.abs(masses[:, a] - masses[:, b]) > tolerance):
                n_diverse += 1
    return {
        "n_box_pairs": n_pairs,
        "n_diverse": n_diverse,
        "fraction_diverse": n_diverse / n_pairs if n_pairs else 0.0,
        "resolution": resolution,
        "tolerance": tolerance,
    }


def _write_rows(fh, arrays, domain_of, cond_of, d):
    for arr, dom, cond in zip(arrays, domain_of, cond_of):
        for row in arr:
            vals = ",".join(repr(float(v)) for v in row)
            fh.write(f"{cond},{dom},{vals}\n")


def save_dataset(path, ds: ConditionalDataset):
    d = ds.dim
    header = "cond,domain," + ",".join(f"dim_{k}" for k in range(d))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for q in range(ds.q):
            _write_rows(fh, [ds.xs[q], ds.ys[q]], ["source", "target"], [q, q], d)


def save_paired(path, split: PairedSplit):
    d = split.xs[0].shape[1]
    header = "cond,domain," + ",".join(f"dim_{k}" for k in range(d))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for q in range(len(split.xs)):
            _write_rows(fh, [split.xs[q], split.ys[q]], ["source", "target"], [q, q], d)


def _parse_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[:2] != ["cond", "domain"] or len(header) < 3:
            raise ValueError(f"{path}: header must be cond,domain,dim_0,..., "
                             f"got {header}")
        for k, name in enumerate(header[2:]):
            if name != f"dim_{k}":
                raise ValueError(f"{path}: bad dimension column {name!r} at {k}")
        d = len(header) - 2
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != d + 2:
                raise ValueError(f"{path}:{lineno}: expected {d + 2} fields, "
                                 f"got {len(parts)}")
            try:
                cond = int(parts[0])
                vec = [float(v) for v in parts[1 + 1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {line!r}") from None
            dom = parts[1]
            if dom not in ("source", "target"):
                raise ValueError(f"{path}:{lineno}: domain must be source/target, "
                                 f"got {dom!r}")
            rows.append((cond, dom, vec))
    return d, rows


def load_dataset(path) -> ConditionalDataset:
    d, rows = _parse_csv(path)
    conds = sorted({c for c, _, _ in rows})
    if conds != list(range(len(conds))):
        raise ValueError(f"{path}: conditions must be 0..Q-1, got {conds}")
    xs = [[] for _ in conds]
    ys = [[] for _ in conds]
    for cond, dom, vec in rows:
        (xs if dom == "source" else ys)[cond].append(vec)
    if any(not x for x in xs) or any(not y for y in ys):
        raise ValueError(f"{path}: every condition needs source and target rows")
    return ConditionalDataset(xs=[np.asarray(x) for x in xs],
                              ys=[np.asarray(y) for y in ys])


def load_paired(path) -> PairedSplit:
    ds = load_dataset(path)
    for q in range(ds.q):
        if ds.xs[q].shape != ds.ys[q].shape:
            raise ValueError(f"{path}: paired split needs equal source/target "
                             f"counts per condition (condition {q})")
    return PairedSplit(xs=ds.xs, ys=ds.ys)
