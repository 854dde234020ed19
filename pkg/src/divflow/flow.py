"""Flow-matching losses, training procedures, and ODE integration.

Trainers cover: plain / population-conditioned flow matching with linear
interpolants (optionally with minibatch OT re-pairing), the two-phase
procedure (repulsion-trained interpolant, then velocity regression), its
interleaved variant, and the variable-splitting formulation with private
velocity fields and private interpolants.

Velocity-regression targets are always evaluated in plain numpy, so the
interpolant parameters receive exactly zero gradient from the velocity
loss. Only the splitting trainer differentiates through the interpolant,
which is the point of that formulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .coupling import (ConditionalDataset, PairBatch, independent_coupling,
                       marginal_coupling, ot_coupling)
from .interpolant import (KernelParams, LearnableInterpolant, interp_dt,
                          interp_dt_np, interp_eval, interp_eval_np,
                          linear_interp, linear_interp_dt, make_interpolant,
                          repulsion_loss)

MODES = ("dfm-two-phase", "dfm-interleaved", "fm", "fm-cond", "fm-ot",
         "fm-cond-ot", "split")


@dataclass
class VelocityField:
    """MLP over (state, time): input dim d+1, output dim d."""
    net: nn.MlpParams

    @property
    def dim(self) -> int:
        return self.net.out_dim

    def velocity(self, z: np.ndarray, t) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        tc = np.broadcast_to(np.asarray(t, dtype=np.float64),
                             (z.shape[0],)).reshape(-1, 1)
        return nn.mlp_apply(self.net, np.concatenate([z, tc], axis=1))


def make_velocity(dim: int, hidden=(64, 64), seed: int = 0) -> VelocityField:
    return VelocityField(net=nn.mlp_init([dim + 1, *hidden, dim], seed=seed))


@dataclass
class TrainConfig:
    mode: str = "dfm-two-phase"
    iterations: int = 2000          # velocity phase / joint loop
    iterations_interp: int = 2000   # interpolant phase (two-phase mode)
    batch_size: int = 512
    lr_v: float = 1e-3
    lr_interp: float = 1e-4
    sigma1: float = None            # repulsion spatial bandwidth, data units
    sigma2: float = None            # repulsion temporal bandwidth
    eta: float = 1e-4
    fd_step: float = 1e-3
    ode_steps: int = 100
    ode_method: str = "euler"
    seed: int = 0
    hidden: tuple = (64, 64)
    weight_decay: float = 0.0
    ema_decay: float = None         # None disables the weight average
    t_in_gamma: bool = True
    lambda_split: float = 1.0       # consensus weight, split mode
    lambda1: float = 1.0            # repulsion weight in phase 1
    lambda2: float = 0.0            # surface-metric weight in phase 1

    def validate(self, need_kernel: bool):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; pick one of {MODES}")
        for name in ("iterations", "iterations_interp", "batch_size", "ode_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr_v", "lr_interp", "fd_step"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if need_kernel:
            if self.sigma1 is None or self.sigma2 is None:
                raise ValueError("sigma1 and sigma2 are required for interpolant "
                                 "training; set them for this dataset")
            KernelParams(self.sigma1, self.sigma2, self.eta)

    def kernel(self) -> KernelParams:
        return KernelParams(self.sigma1, self.sigma2, self.eta)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Trajectory:
    times: np.ndarray     # (steps+1,), 0 to 1
    states: np.ndarray    # (steps+1, d)
    start: np.ndarray     # (d,)


@dataclass
class TrainResult:
    velocity: VelocityField
    interpolant: LearnableInterpolant = None
    private_velocities: list = field(default_factory=list)
    private_interpolants: list = field(default_factory=list)
    log: list = field(default_factory=list)   # rows (iter, loss_interp, loss_fm)
    config: TrainConfig = None
    velocity_ema: VelocityField = None


def _t_leaf(t: np.ndarray) -> ad.Node:
    return ad.leaf(t.reshape(-1, 1))


def _velocity_graph(v: VelocityField, z: ad.Node, t: np.ndarray) -> ad.Node:
    return nn.mlp_forward(v.net, ad.concat([z, _t_leaf(t)], axis=1))


def _mse_rows(a: ad.Node, b: ad.Node) -> ad.Node:
    return ad.reduce_mean(ad.reduce_sum(ad.square(ad.sub(a, b)), axis=1))


def _check_state(z: np.ndarray, what: str):
    bad = ~np.all(np.isfinite(z), axis=1)
    if bad.any():
        raise ad.NonFiniteError(what, f"sample {int(np.flatnonzero(bad)[0])}")


def interp_targets(interp, pairs: PairBatch, t: np.ndarray, h: float):
    """Detached (z_t, dz_t) regression targets; linear when interp is None."""
    if interp is None:
        z = linear_interp(pairs.x, pairs.y, t)
        dz = linear_interp_dt(pairs.x, pairs.y)
    else:
        z = interp_eval_np(interp, pairs.x, pairs.y, t)
        dz = interp_dt_np(interp, pairs.x, pairs.y, t, h)
    _check_state(z, "interpolant state z_t")
    return z, dz


def fm_loss(v: VelocityField, interp, pairs: PairBatch, t: np.ndarray,
            h: float = 1e-3) -> ad.Node:
    """Mean squared residual of the velocity net against interpolant slopes.

    Targets are plain arrays: gradient reaches only the velocity net.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("t batch must lie in [0,1]")
    z, dz = interp_targets(interp, pairs, t, h)
    return _mse_rows(_velocity_graph(v, ad.leaf(z), t), ad.leaf(dz))


def _adam_for(params: nn.MlpParams, lr: float, weight_decay: float) -> nn.AdamState:
    return nn.adam_init(params, lr=lr, weight_decay=weight_decay)


def _step(loss: ad.Node, nets_and_states, loss_name: str):
    leaves = []
    for params, _ in nets_and_states:
        leaves.extend(params.leaves())
    grads = ad.backward(loss, leaves)
    for params, state in nets_and_states:
        nn.adam_step(params, grads, state, loss_name=loss_name)
    return float(loss.value)


def _sample_q(ds: ConditionalDataset, rng: np.random.Generator) -> int:
    return int(rng.choice(ds.q, p=ds.weights))


def _cond_batch(ds, q, cfg, rng):
    pairs = independent_coupling(ds, q, cfg.batch_size, rng)
    t = rng.uniform(0.0, 1.0, size=cfg.batch_size)
    return pairs, t


def train_fm(cfg: TrainConfig, ds: ConditionalDataset) -> TrainResult:
    """Linear-interpolant baselines: fm, fm-cond, fm-ot, fm-cond-ot."""
    if cfg.mode not in ("fm", "fm-cond", "fm-ot", "fm-cond-ot"):
        raise ValueError(f"train_fm got mode {cfg.mode!r}")
    cfg.validate(need_kernel=False)
    rng = np.random.default_rng(cfg.seed)
    v = make_velocity(ds.dim, cfg.hidden, seed=cfg.seed)
    st = _adam_for(v.net, cfg.lr_v, cfg.weight_decay)
    ema = nn.ema_init(v.net, cfg.ema_decay) if cfg.ema_decay else None
    log = []
    conditional = cfg.mode in ("fm-cond", "fm-cond-ot")
    use_ot = cfg.mode in ("fm-ot", "fm-cond-ot")
    for it in range(cfg.iterations):
        if conditional:
            pairs, t = _cond_batch(ds, _sample_q(ds, rng), cfg, rng)
        else:
            pairs = marginal_coupling(ds, cfg.batch_size, rng)
            t = rng.uniform(0.0, 1.0, size=cfg.batch_size)
        if use_ot:
            pairs = ot_coupling(pairs.x, pairs.y, pairs.cond)
        loss = fm_loss(v, None, pairs, t, cfg.fd_step)
        val = _step(loss, [(v.net, st)], "flow-matching loss")
        if ema:
            nn.ema_update(ema, v.net)
        log.append((it, None, val))
    res = TrainResult(velocity=v, log=log, config=cfg)
    if ema:
        res.velocity_ema = VelocityField(net=nn.ema_params(ema, v.net))
    return res


def _interp_phase_loss(interp, ds, cfg, rng, kernel, surface_term):
    batches = []
    for q in range(ds.q):
        pairs, t = _cond_batch(ds, q, cfg, rng)
        batches.append((pairs.x, pairs.y, t))
    loss = repulsion_loss(interp, batches, kernel)
    if cfg.lambda1 != 1.0:
        loss = ad.smul(loss, cfg.lambda1)
    if surface_term is not None:
        loss = ad.add(loss, ad.smul(surface_term(interp, batches, cfg), cfg.lambda2))
    return loss


def train_dfm_two_phase(cfg: TrainConfig, ds: ConditionalDataset,
                        surface_term=None) -> TrainResult:
    """Phase 1: repulsion training of the shared interpolant (plus an optional
    surface penalty built by `surface_term`). Phase 2: velocity regression
    against the frozen interpolant, one population per step."""
    if ds.q < 2:
        raise ValueError("multi-population training needs Q >= 2")
    cfg.validate(need_kernel=True)
    rng = np.random.default_rng(cfg.seed)
    kernel = cfg.kernel()
    interp = make_interpolant(ds.dim, cfg.hidden, seed=cfg.seed + 1,
                              use_time_input=cfg.t_in_gamma)
    v = make_velocity(ds.dim, cfg.hidden, seed=cfg.seed)
    st_th = _adam_for(interp.gamma, cfg.lr_interp, cfg.weight_decay)
    st_v = _adam_for(v.net, cfg.lr_v, cfg.weight_decay)
    ema = nn.ema_init(v.net, cfg.ema_decay) if cfg.ema_decay else None
    log = []
    for it in range(cfg.iterations_interp):
        loss = _interp_phase_loss(interp, ds, cfg, rng, kernel, surface_term)
        val = _step(loss, [(interp.gamma, st_th)], "interpolant loss")
        log.append((it, val, None))
    for it in range(cfg.iterations):
        pairs, t = _cond_batch(ds, _sample_q(ds, rng), cfg, rng)
        loss = fm_loss(v, interp, pairs, t, cfg.fd_step)
        val = _step(loss, [(v.net, st_v)], "flow-matching loss")
        if ema:
            nn.ema_update(ema, v.net)
        log.append((cfg.iterations_interp + it, None, val))
    res = TrainResult(velocity=v, interpolant=interp, log=log, config=cfg)
    if ema:
        res.velocity_ema = VelocityField(net=nn.ema_params(ema, v.net))
    return res


def train_dfm_interleaved(cfg: TrainConfig, ds: ConditionalDataset,
                          surface_term=None) -> TrainResult:
    """One interpolant update then one velocity update per iteration.

    The velocity regression averages over all populations; the interpolant
    never sees gradient from it, and vice versa.
    """
    if ds.q < 2:
        raise ValueError("multi-population training needs Q >= 2")
    cfg.validate(need_kernel=True)
    rng = np.random.default_rng(cfg.seed)
    kernel = cfg.kernel()
    interp = make_interpolant(ds.dim, cfg.hidden, seed=cfg.seed + 1,
                              use_time_input=cfg.t_in_gamma)
    v = make_velocity(ds.dim, cfg.hidden, seed=cfg.seed)
    st_th = _adam_for(interp.gamma, cfg.lr_interp, cfg.weight_decay)
    st_v = _adam_for(v.net, cfg.lr_v, cfg.weight_decay)
    ema = nn.ema_init(v.net, cfg.ema_decay) if cfg.ema_decay else None
    log = []
    for it in range(cfg.iterations):
        batches = []
        for q in range(ds.q):
            pairs, t = _cond_batch(ds, q, cfg, rng)
            batches.append((pairs, t))
        rep = repulsion_loss(interp, [(p.x, p.y, t) for p, t in batches], kernel)
        if cfg.lambda1 != 1.0:
            rep = ad.smul(rep, cfg.lambda1)
        if surface_term is not None:
            rep = ad.add(rep, ad.smul(
                surface_term(interp, [(p.x, p.y, t) for p, t in batches], cfg),
                cfg.lambda2))
        li = _step(rep, [(interp.gamma, st_th)], "interpolant loss")

        zs, dzs, ts = [], [], []
        for pairs, t in batches:
            z, dz = interp_targets(interp, pairs, t, cfg.fd_step)
            zs.append(z)
            dzs.append(dz)
            ts.append(t)
        z = np.concatenate(zs)
        dz = np.concatenate(dzs)
        t = np.concatenate(ts)
        loss = _mse_rows(_velocity_graph(v, ad.leaf(z), t), ad.leaf(dz))
        lf = _step(loss, [(v.net, st_v)], "flow-matching loss")
        if ema:
            nn.ema_update(ema, v.net)
        log.append((it, li, lf))
    res = TrainResult(velocity=v, interpolant=interp, log=log, config=cfg)
    if ema:
        res.velocity_ema = VelocityField(net=nn.ema_params(ema, v.net))
    return res


def train_split(cfg: TrainConfig, ds: ConditionalDataset) -> TrainResult:
    """Variable-splitting objective: private velocity fields regress their own
    learnable interpolants while a consensus penalty ties them to one shared
    field. All networks update simultaneously from a single joint loss, and
    gradient flows through the interpolants (no repulsion, no stop-gradient):
    this trainer exists to exhibit the success/failure dichotomy of that
    formulation, not to be a good method.
    """
    if cfg.lambda_split <= 0:
        raise ValueError(f"consensus weight must be positive, got {cfg.lambda_split}")
    cfg.validate(need_kernel=False)
    rng = np.random.default_rng(cfg.seed)
    v = make_velocity(ds.dim, cfg.hidden, seed=cfg.seed)
    privates = [make_velocity(ds.dim, cfg.hidden, seed=cfg.seed + 101 + q)
                for q in range(ds.q)]
    interps = [make_interpolant(ds.dim, cfg.hidden, seed=cfg.seed + 201 + q,
                                use_time_input=cfg.t_in_gamma)
               for q in range(ds.q)]
    nets = [(v.net, _adam_for(v.net, cfg.lr_v, cfg.weight_decay))]
    nets += [(p.net, _adam_for(p.net, cfg.lr_v, cfg.weight_decay)) for p in privates]
    nets += [(ip.gamma, _adam_for(ip.gamma, cfg.lr_interp, cfg.weight_decay))
             for ip in interps]
    log = []
    for it in range(cfg.iterations):
        total = None
        for q in range(ds.q):
            pairs, t = _cond_batch(ds, q, cfg, rng)
            z = interp_eval(interps[q], pairs.x, pairs.y, t)
            dz = interp_dt(interps[q], pairs.x, pairs.y, t, cfg.fd_step)
            vin = ad.concat([z, _t_leaf(t)], axis=1)
            priv = nn.mlp_forward(privates[q].net, vin)
            term = ad.reduce_mean(ad.reduce_sum(ad.square(ad.sub(priv, dz)), axis=1))
            cons = ad.reduce_mean(ad.reduce_sum(
                ad.square(ad.sub(nn.mlp_forward(v.net, vin), priv)), axis=1))
            term = ad.add(term, ad.smul(cons, cfg.lambda_split))
            total = term if total is None else ad.add(total, term)
        val = _step(total, nets, "split objective")
        log.append((it, None, val))
    return TrainResult(velocity=v, private_velocities=privates,
                       private_interpolants=interps, log=log, config=cfg)


def run_training(cfg: TrainConfig, ds: ConditionalDataset,
                 surface_term=None) -> TrainResult:
    if cfg.mode in ("fm", "fm-cond", "fm-ot", "fm-cond-ot"):
        return train_fm(cfg, ds)
    if cfg.mode == "dfm-two-phase":
        return train_dfm_two_phase(cfg, ds, surface_term)
    if cfg.mode == "dfm-interleaved":
        return train_dfm_interleaved(cfg, ds, surface_term)
    if cfg.mode == "split":
        return train_split(cfg, ds)
    raise ValueError(f"unknown mode {cfg.mode!r}; pick one of {MODES}")


def integrate_batch(v: VelocityField, x: np.ndarray, steps: int = 100,
                    method: str = "euler") -> np.ndarray:
    """Fixed-step integration over [0, 1]; returns (steps+1, B, d) states."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if method not in ("euler", "rk4"):
        raise ValueError(f"method must be 'euler' or 'rk4', got {method!r}")
    z = np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
    h = 1.0 / steps
    out = np.empty((steps + 1, z.shape[0], z.shape[1]))
    out[0] = z
    for k in range(steps):
        t = k * h
        if method == "euler":
            z = z + h * v.velocity(z, t)
        else:
            k1 = v.velocity(z, t)
            k2 = v.velocity(z + 0.5 * h * k1, t + 0.5 * h)
            k3 = v.velocity(z + 0.5 * h * k2, t + 0.5 * h)
            k4 = v.velocity(z + h * k3, t + h)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise ad.NonFiniteError("integration state", f"step {k + 1}")
        out[k + 1] = z
    return out


def integrate(v: VelocityField, x: np.ndarray, steps: int = 100,
              method: str = "euler") -> Trajectory:
    x = np.asarray(x, dtype=np.float64)
    states = integrate_batch(v, x.reshape(1, -1), steps, method)[:, 0, :]
    return Trajectory(times=np.linspace(0.0, 1.0, steps + 1),
                      states=states, start=x.copy())


def translate(v: VelocityField, x: np.ndarray, steps: int = 100,
              method: str = "euler") -> np.ndarray:
    """Endpoints only; row order preserved."""
    return integrate_batch(v, x, steps, method)[-1]
