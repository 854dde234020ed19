"""Command-line entry point: gen / train / translate / eval / reproduce.

Config files are flat ``key = value`` text ('#' comments); command-line
``--set key=value`` flags override file values, which override defaults.
The environment variable ``DIVFLOW_OUT_ROOT``, when set, is prepended to
relative output paths.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as dtm
from . import flow, metrics, nn, surface
from .coupling import ConditionalDataset

TRAIN_KEYS = {
    "mode": str, "iterations": int, "iterations_interp": int, "batch_size": int,
    "lr_v": float, "lr_interp": float, "sigma1": float, "sigma2": float,
    "eta": float, "fd_step": float, "ode_steps": int, "ode_method": str,
    "seed": int, "hidden": str, "weight_decay": float, "ema_decay": float,
    "t_in_gamma": bool, "lambda_split": float, "lambda1": float, "lambda2": float,
}
RUN_KEYS = {"preset": str, "dataset": str, "paired": str, "surface": str,
            "out_dir": str, "n": int, "eval_size": int}


def _parse_bool(s: str) -> bool:
    if s.lower() in ("1", "true", "yes", "on"):
        return True
    if s.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def parse_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (part.strip() for part in line.split("=", 1))
            out[key] = val
    return out


def _typed(key: str, raw):
    if not isinstance(raw, str):
        return raw
    kind = TRAIN_KEYS.get(key) or RUN_KEYS.get(key)
    if kind is None:
        raise ValueError(f"unknown config key {key!r}")
    if kind is bool:
        return _parse_bool(raw)
    return kind(raw)


def build_train_config(settings: dict) -> flow.TrainConfig:
    cfg = flow.TrainConfig()
    for key, raw in settings.items():
        if key in TRAIN_KEYS:
            val = _typed(key, raw)
            if key == "hidden":
                val = tuple(int(v) for v in str(val).split(",") if v.strip())
            setattr(cfg, key, val)
    return cfg


def _out_path(p: str) -> Path:
    root = os.environ.get("DIVFLOW_OUT_ROOT")
    path = Path(p)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def _echo_config(out_dir: Path, settings: dict):
    lines = [f"{k} = {settings[k]}" for k in sorted(settings)]
    (out_dir / "config_echo.txt").write_text("\n".join(lines) + "\n")


def save_matrix(path, arr: np.ndarray):
    d = arr.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join(f"dim_{k}" for k in range(d)) + "\n")
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_matrix(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not all(h == f"dim_{k}" for k, h in enumerate(header)):
            raise ValueError(f"{path}: expected header dim_0,...,dim_d-1, got {header}")
        rows = [[float(v) for v in line.strip().split(",")]
                for line in fh if line.strip()]
    return np.asarray(rows, dtype=np.float64)


def save_trajectories(path, states: np.ndarray):
    """CSV rows sample_id,t,dim_0..; `states` is (steps+1, n, d)."""
    steps1, n, d = states.shape
    times = np.linspace(0.0, 1.0, steps1)
    with open(path, "w") as fh:
        fh.write("sample_id,t," + ",".join(f"dim_{k}" for k in range(d)) + "\n")
        for i in range(n):
            for s in range(steps1):
                vals = ",".join(repr(float(v)) for v in states[s, i])
                fh.write(f"{i},{times[s]!r},{vals}\n")


def save_train_log(path, log):
    with open(path, "w") as fh:
        fh.write("iter,loss_interp,loss_fm\n")
        for it, li, lf in log:
            a = "" if li is None else repr(float(li))
            b = "" if lf is None else repr(float(lf))
            fh.write(f"{it},{a},{b}\n")


# ---------------------------------------------------------------- svg ----

def _color(t: float) -> str:
    """Blue-to-red ramp over [0,1]."""
    r = int(255 * t)
    b = int(255 * (1.0 - t))
    return f"#{r:02x}40{b:02x}"


def _svg_canvas(pts2d):
    lo = pts2d.min(axis=0)
    hi = pts2d.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    size = 360.0
    pad = 20.0

    def to_px(p):
        q = (p - lo) / span
        return (pad + q[0] * size, pad + (1.0 - q[1]) * size)

    return to_px, size + 2 * pad


def svg_trajectories(path, states: np.ndarray, scatter=None, max_lines: int = 120):
    """Minimal SVG: trajectory polylines colored by time plus optional point
    groups. 3-D data is emitted as two orthographic projections (xy, xz)."""
    steps1, n, d = states.shape
    projections = [(0, 1)] if d == 2 else [(0, 1), (0, 2)]
    panels = []
    width_total = 0.0
    for ax, ay in projections:
        take = states[:, :: max(1, n // max_lines), :]
        flat = take[..., [ax, ay]].reshape(-1, 2)
        if scatter:
            flat = np.vstack([flat] + [np.asarray(g)[:, [ax, ay]] for g, _ in scatter])
        to_px, wh = _svg_canvas(flat)
        body = []
        for i in range(take.shape[1]):
            for s in range(steps1 - 1):
                x1, y1 = to_px(take[s, i, [ax, ay]])
                x2, y2 = to_px(take[s + 1, i, [ax, ay]])
                body.append(
                    f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" '
                    f'stroke="{_color(s / max(steps1 - 2, 1))}" stroke-width="0.6"/>')
        if scatter:
            for group, color in scatter:
                for p in np.asarray(group):
                    x, y = to_px(p[[ax, ay]])
                    body.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="1.5" '
                                f'fill="{color}"/>')
        panels.append((body, wh))
        width_total += wh
    height = max(wh for _, wh in panels)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{width_total:.0f}" height="{height:.0f}">']
    xoff = 0.0
    for body, wh in panels:
        parts.append(f'<g transform="translate({xoff:.0f},0)">')
        parts.extend(body)
        parts.append("</g>")
        xoff += wh
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


# ----------------------------------------------------------- commands ----

def cmd_gen(args) -> int:
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, split, cloud = dtm.make_preset(args.preset, seed=args.seed, n=args.n,
                                       n_eval=args.n_eval)
    dtm.save_dataset(out / "dataset.csv", ds)
    files = ["dataset.csv"]
    if split is not None:
        dtm.save_paired(out / "paired_eval.csv", split)
        files.append("paired_eval.csv")
    if cloud is not None:
        surface.save_point_cloud(out / "surface.xyz", cloud)
        files.append("surface.xyz")
    manifest = {"preset": args.preset, "seed": args.seed, "n": args.n,
                "n_eval": args.n_eval, "files": files,
                "q": ds.q, "dim": ds.dim}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True,
                                                  indent=2) + "\n")
    print(f"wrote {', '.join(files)} to {out}")
    return 0


def _load_run_inputs(settings):
    preset = settings.get("preset")
    ds = split = cloud = None
    if preset:
        ds, split, cloud = dtm.make_preset(str(preset),
                                           seed=int(settings.get("seed", 0)),
                                           n=int(settings.get("n", 2000)))
    if settings.get("dataset"):
        ds = dtm.load_dataset(settings["dataset"])
    if settings.get("paired"):
        split = dtm.load_paired(settings["paired"])
    if settings.get("surface"):
        cloud = surface.load_point_cloud(settings["surface"])
    if ds is None:
        raise ValueError("no data: give preset= or dataset=")
    return ds, split, cloud


def cmd_train(args) -> int:
    settings = {}
    if args.config:
        settings.update(parse_config_file(args.config))
    for kv in args.set or []:
        if "=" not in kv:
            raise ValueError(f"--set expects key=value, got {kv!r}")
        key, val = kv.split("=", 1)
        settings[key.strip()] = val.strip()
    cfg = build_train_config(settings)
    ds, _, cloud = _load_run_inputs(settings)

    surface_term = None
    if cloud is not None and cfg.lambda2 > 0:
        surface_term = surface.mfm_term(cloud)
    try:
        res = flow.run_training(cfg, ds, surface_term=surface_term)
    except Exception as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1

    out = _out_path(settings.get("out_dir", "run"))
    out.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(out / "velocity.json", res.velocity.net, "velocity",
                       seed=cfg.seed, iteration=cfg.iterations,
                       extra={"dim": ds.dim})
    written = ["velocity.json"]
    if res.interpolant is not None:
        nn.save_checkpoint(out / "interpolant.json", res.interpolant.gamma,
                           "interpolant", seed=cfg.seed,
                           iteration=cfg.iterations_interp,
                           extra={"dim": ds.dim,
                                  "use_time_input": res.interpolant.use_time_input})
        written.append("interpolant.json")
    save_train_log(out / "train_log.csv", res.log)
    written.append("train_log.csv")
    _echo_config(out, settings)
    written.append("config_echo.txt")
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def _load_velocity(path) -> flow.VelocityField:
    params, doc = nn.load_checkpoint(path)
    if doc["role"] != "velocity":
        raise ValueError(f"{path}: expected a velocity checkpoint, got role "
                         f"{doc['role']!r}")
    return flow.VelocityField(net=params)


def cmd_translate(args) -> int:
    v = _load_velocity(args.checkpoint)
    x = load_matrix(args.input)
    if x.shape[1] != v.dim:
        raise ValueError(f"input dim {x.shape[1]} does not match checkpoint "
                         f"dim {v.dim}")
    states = flow.integrate_batch(v, x, steps=args.steps, method=args.method)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_matrix(out, states[-1])
    if args.trajectory:
        save_trajectories(_out_path(args.trajectory), states)
    print(f"translated {x.shape[0]} rows -> {out}")
    return 0


def evaluate_velocity(v: flow.VelocityField, ds: ConditionalDataset,
                      split=None, cloud=None, eval_size: int = 500,
                      steps: int = 100, method: str = "euler",
                      seed: int = 0, config_echo: dict = None) -> metrics.EvalReport:
    """Per-population distribution distance, translation error on the paired
    split, wrong-population rate, and (with a cloud) surface adherence."""
    rng = np.random.default_rng(seed)
    centers = np.stack([y.mean(axis=0) for y in ds.ys])
    emds, counts = [], []
    ccr_parts = []
    te_parts = []
    sa = None
    all_states = []
    for q in range(ds.q):
        if split is not None:
            x_eval = split.xs[q][:eval_size]
        else:
            idx = rng.choice(ds.xs[q].shape[0],
                             size=min(eval_size, ds.xs[q].shape[0]), replace=False)
            x_eval = ds.xs[q][idx]
        states = flow.integrate_batch(v, x_eval, steps=steps, method=method)
        y_hat = states[-1]
        all_states.append(states)
        emds.append(metrics.emd(y_hat, ds.ys[q], seed=seed))
        counts.append(x_eval.shape[0])
        nearest = np.argmin(np.linalg.norm(y_hat[:, None, :] - centers[None],
                                           axis=2), axis=1)
        ccr_parts.append(nearest != q)
        if split is not None:
            te_parts.append(np.linalg.norm(y_hat - split.ys[q][:eval_size], axis=1))
    if cloud is not None:
        sa = float(np.mean([surface.surface_adherence(s, cloud)
                            for s in all_states]))
    return metrics.EvalReport(
        per_condition_emd=emds,
        te=float(np.mean(np.concatenate(te_parts))) if te_parts else None,
        cross_cluster=float(np.mean(np.concatenate(ccr_parts))),
        surface_adherence=sa,
        sample_counts=counts,
        config=config_echo or {},
    )


def cmd_eval(args) -> int:
    v = _load_velocity(args.checkpoint)
    ds = dtm.load_dataset(args.dataset)
    split = dtm.load_paired(args.paired) if args.paired else None
    cloud = surface.load_point_cloud(args.surface) if args.surface else None
    if args.te and split is None:
        raise ValueError("translation error needs --paired with ground-truth pairs")
    echo = {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset),
            "paired": str(args.paired or ""), "surface": str(args.surface or ""),
            "eval_size": args.eval_size, "steps": args.steps,
            "method": args.method, "seed": args.seed}
    report = evaluate_velocity(v, ds, split, cloud, eval_size=args.eval_size,
                               steps=args.steps, method=args.method,
                               seed=args.seed, config_echo=echo)
    out = _out_path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    if args.table:
        doc = report.to_dict()
        table = _out_path(args.table)
        new = not table.exists()
        with open(table, "a") as fh:
            if new:
                fh.write("checkpoint,mean_emd,te,cross_cluster,surface_adherence\n")
            fh.write(f"{args.checkpoint},{doc['mean_emd']!r},{doc['te']!r},"
                     f"{doc['cross_cluster']!r},{doc['surface_adherence']!r}\n")
    print(report.to_json())
    return 0


# -------------------------------------------------------- reproduce ----

TABLE_METHODS = ("fm-cond", "fm-cond-ot", "dfm-two-phase")
BLOB_KERNEL = {"sigma1": 1.0, "sigma2": 0.3}


def _train_method(mode, ds, seed, iters, cloud=None, lambda2=0.0, batch=512):
    cfg = flow.TrainConfig(mode=mode, iterations=iters, iterations_interp=iters,
                           batch_size=batch, seed=seed, **BLOB_KERNEL)
    if cloud is not None:
        cfg.sigma1, cfg.sigma2 = 0.1, 1.5
        cfg.lambda1, cfg.lambda2 = 5000.0, lambda2
        cfg.weight_decay = 1e-5
        cfg.hidden = (64, 64, 64)
    term = surface.mfm_term(cloud) if (cloud is not None and lambda2 > 0) else None
    return flow.run_training(cfg, ds, surface_term=term)


def _reproduce_table(name, preset, seeds, iters, out: Path):
    rows = {m: {"emd": [], "te": []} for m in TABLE_METHODS}
    for seed in seeds:
        ds, split, _ = dtm.make_preset(preset, seed=seed, n=2000)
        for method in TABLE_METHODS:
            res = _train_method(method, ds, seed, iters)
            rep = evaluate_velocity(res.velocity, ds, split, seed=seed)
            rows[method]["emd"].append(np.mean(rep.per_condition_emd))
            rows[method]["te"].append(rep.te)
            if seed == seeds[0]:
                x0 = np.vstack([split.xs[q][:40] for q in range(ds.q)])
                states = flow.integrate_batch(res.velocity, x0, steps=100)
                save_trajectories(out / f"{name}_{method}_trajectories.csv", states)
                scatter = [(ds.xs[q][:150], "#777777") for q in range(ds.q)]
                scatter += [(ds.ys[q][:150], "#bbbb22") for q in range(ds.q)]
                svg_trajectories(out / f"{name}_{method}.svg", states, scatter)
    with open(out / f"{name}_table.csv", "w") as fh:
        fh.write("method,emd_mean,emd_std,te_mean,te_std,n_seeds\n")
        for method in TABLE_METHODS:
            e, t = rows[method]["emd"], rows[method]["te"]
            fh.write(f"{method},{np.mean(e)!r},{np.std(e)!r},"
                     f"{np.mean(t)!r},{np.std(t)!r},{len(seeds)}\n")


def _reproduce_reflection(seeds, iters, out: Path):
    seed = seeds[0]
    ds, split, _ = dtm.make_preset("blobs2d", seed=seed, n=2000)
    # straight-line pairings of population samples (the crossing picture)
    n = 60
    rng = np.random.default_rng(seed)
    lines = []
    for q in range(ds.q):
        xi = ds.xs[q][rng.integers(ds.xs[q].shape[0], size=n)]
        yi = ds.ys[q][rng.integers(ds.ys[q].shape[0], size=n)]
        grid = np.linspace(0, 1, 51)
        lines.append(np.stack([(1 - t) * xi + t * yi for t in grid]))
    states = np.concatenate(lines, axis=1)
    save_trajectories(out / "fig-reflection_linear_interpolants.csv", states)
    svg_trajectories(out / "fig-reflection_linear_interpolants.svg", states)
    # actual trained trajectories under the naive population-conditioned loss
    res = _train_method("fm-cond", ds, seed, iters)
    x0 = np.vstack([split.xs[q][:n] for q in range(ds.q)])
    actual = flow.integrate_batch(res.velocity, x0, steps=100)
    save_trajectories(out / "fig-reflection_fm-cond_trajectories.csv", actual)
    svg_trajectories(out / "fig-reflection_fm-cond.svg", actual)


def _reproduce_swarm(seeds, iters, out: Path):
    methods = [("dfm-two-phase", 1.0), ("dfm-two-phase", 0.0),
               ("fm-cond-ot", 0.0), ("fm-ot", 0.0)]
    rows = []
    for seed in seeds:
        ds, _, cloud = dtm.make_preset("swarm", seed=seed, n=2000)
        for mode, lam2 in methods:
            label = mode if mode != "dfm-two-phase" else f"dfm-lambda2-{lam2:g}"
            res = _train_method(mode, ds, seed, iters, cloud=cloud,
                                lambda2=lam2, batch=256)
            rep = evaluate_velocity(res.velocity, ds, cloud=cloud,
                                    eval_size=200, seed=seed)
            rows.append((label, seed, rep.surface_adherence,
                         float(np.mean(rep.per_condition_emd))))
            if seed == seeds[0]:
                x0 = np.vstack([ds.xs[q][:40] for q in range(ds.q)])
                states = flow.integrate_batch(res.velocity, x0, steps=100)
                save_trajectories(out / f"swarm_{label}_trajectories.csv", states)
                svg_trajectories(out / f"swarm_{label}.svg", states,
                                 [(cloud.points[::7], "#55aa55")])
    with open(out / "swarm_sa_table.csv", "w") as fh:
        fh.write("method,seed,surface_adherence,mean_emd\n")
        for label, seed, sa, e in rows:
            fh.write(f"{label},{seed},{sa!r},{e!r}\n")


def cmd_reproduce(args) -> int:
    out = _out_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(range(10))
    if args.experiment == "table1-2d":
        _reproduce_table("table1-2d", "blobs2d", seeds, args.iters, out)
    elif args.experiment == "table1-3d":
        _reproduce_table("table1-3d", "blobs3d", seeds, args.iters, out)
    elif args.experiment == "fig-reflection":
        _reproduce_reflection(seeds, args.iters, out)
    elif args.experiment == "swarm":
        _reproduce_swarm(seeds, args.iters, out)
    else:
        raise ValueError(f"unknown experiment {args.experiment!r}")
    print(f"experiment {args.experiment} written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="divflow")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a preset dataset")
    g.add_argument("--preset", required=True, choices=dtm.PRESETS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--n-eval", type=int, default=500)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", help="flat key = value file")
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="push samples through a checkpoint")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--steps", type=int, default=100)
    tr.add_argument("--method", default="euler", choices=("euler", "rk4"))
    tr.add_argument("--trajectory", help="also write the full time grid")
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--paired")
    e.add_argument("--surface")
    e.add_argument("--te", action="store_true",
                   help="require translation error (needs --paired)")
    e.add_argument("--eval-size", type=int, default=500)
    e.add_argument("--steps", type=int, default=100)
    e.add_argument("--method", default="euler", choices=("euler", "rk4"))
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.add_argument("--table", help="append one CSV row here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reproduce", help="run a full experiment")
    r.add_argument("--experiment", required=True,
                   choices=("table1-2d", "table1-3d", "fig-reflection", "swarm"))
    r.add_argument("--seeds", help="comma list, default 0..9")
    r.add_argument("--iters", type=int, default=2000)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reproduce)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
