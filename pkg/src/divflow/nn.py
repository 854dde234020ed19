"""Small feedforward networks, Adam, EMA, and checkpoint IO.

Parameters live as persistent graph leaves (`autodiff.Node`); the tape is
rebuilt around them each step and the optimizer mutates `node.value` in
place. Hidden layers use SeLU, the output layer is identity. Weights are
LeCun-normal (fan-in scaled), biases start at zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    dims: list
    weights: list = field(default_factory=list)   # Node, shape (dims[i], dims[i+1])
    biases: list = field(default_factory=list)    # Node, shape (dims[i+1],)

    @property
    def in_dim(self) -> int:
        return self.dims[0]

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def leaves(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def n_params(self) -> int:
        return sum(lf.value.size for lf in self.leaves())

    def flat(self) -> np.ndarray:
        return np.concatenate([lf.value.ravel() for lf in self.leaves()])

    def set_flat(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        off = 0
        for lf in self.leaves():
            n = lf.value.size
            lf.value = vec[off:off + n].reshape(lf.value.shape).copy()
            off += n
        assert off == vec.size

    def copy(self) -> "MlpParams":
        p = MlpParams(list(self.dims))
        p.weights = [ad.leaf(w.value.copy()) for w in self.weights]
        p.biases = [ad.leaf(b.value.copy()) for b in self.biases]
        return p


def mlp_init(dims, seed: int = 0) -> MlpParams:
    """Deterministic LeCun-normal init; biases zero."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError(f"need at least input and output dims, got {dims}")
    if any(d <= 0 for d in dims):
        raise ValueError(f"layer dims must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    p = MlpParams(dims)
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        p.weights.append(ad.leaf(w))
        p.biases.append(ad.leaf(np.zeros(fan_out)))
    return p


def mlp_forward(params: MlpParams, x: ad.Node) -> ad.Node:
    """Graph forward pass for a batch (B, in_dim) -> (B, out_dim)."""
    if x.value.ndim != 2 or x.value.shape[1] != params.in_dim:
        raise ad.ShapeError("mlp-forward", [x.value.shape, (params.in_dim,)])
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = ad.selu(h)
    return h


def mlp_apply(params: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain numpy forward, bit-identical to `mlp_forward` values."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ad.ShapeError("mlp-forward", [x.shape, (params.in_dim,)])
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.value + b.value
        if i < last:
            pos = h > 0
            ex = np.exp(np.minimum(h, 0.0))
            h = ad.SELU_LAMBDA * np.where(pos, h, ad.SELU_ALPHA * (ex - 1.0))
    return h


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params: MlpParams, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> AdamState:
    st = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                   weight_decay=weight_decay)
    for lf in params.leaves():
        st.m.append(np.zeros_like(lf.value))
        st.v.append(np.zeros_like(lf.value))
    return st


def adam_step(params: MlpParams, grads: dict, state: AdamState,
              loss_name: str = "loss"):
    """Bias-corrected Adam with decoupled weight decay, in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, lf in enumerate(params.leaves()):
        g = grads[id(lf)]
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"gradient of {loss_name}",
                                    f"parameter {i}, step {t}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1 ** t)
        vhat = state.v[i] / (1 - b2 ** t)
        if state.weight_decay:
            lf.value = lf.value - state.lr * state.weight_decay * lf.value
        lf.value = lf.value - state.lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass
class EmaState:
    decay: float
    shadow: list = field(default_factory=list)


def ema_init(params: MlpParams, decay: float = 0.9999) -> EmaState:
    return EmaState(decay=decay,
                    shadow=[lf.value.copy() for lf in params.leaves()])


def ema_update(ema: EmaState, params: MlpParams) -> EmaState:
    d = ema.decay
    for i, lf in enumerate(params.leaves()):
        if ema.shadow[i].shape != lf.value.shape:
            raise ad.ShapeError("ema-update", [ema.shadow[i].shape, lf.value.shape])
        ema.shadow[i] = d * ema.shadow[i] + (1 - d) * lf.value
    return ema


def ema_params(ema: EmaState, params: MlpParams) -> MlpParams:
    p = params.copy()
    for lf, sh in zip(p.leaves(), ema.shadow):
        lf.value = sh.copy()
    return p


def save_checkpoint(path, params: MlpParams, role: str, *, adam: AdamState = None,
                    seed: int = 0, iteration: int = 0, extra: dict = None):
    """JSON checkpoint. Float lists round-trip bit-exactly through repr."""
    doc = {
        "version": CHECKPOINT_VERSION,
        "role": role,
        "layer_dims": list(params.dims),
        "weights": [w.value.ravel().tolist() for w in params.weights],
        "biases": [b.value.ravel().tolist() for b in params.biases],
        "seed": int(seed),
        "iteration": int(iteration),
        "extra": extra or {},
    }
    if adam is not None:
        doc["adam"] = {
            "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
            "eps": adam.eps, "weight_decay": adam.weight_decay,
            "step": adam.step,
            "m": [m.ravel().tolist() for m in adam.m],
            "v": [v.ravel().tolist() for v in adam.v],
        }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path):
    """Returns (params, doc). `doc` keeps role/seed/iteration/extra/adam."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    dims = doc["layer_dims"]
    p = MlpParams(dims)
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = np.asarray(doc["weights"][i], dtype=np.float64).reshape(fan_in, fan_out)
        b = np.asarray(doc["biases"][i], dtype=np.float64).reshape(fan_out)
        p.weights.append(ad.leaf(w))
        p.biases.append(ad.leaf(b))
    return p, doc


def load_adam(doc, params: MlpParams) -> AdamState:
    a = doc["adam"]
    st = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"],
                   weight_decay=a["weight_decay"], step=a["step"])
    for i, lf in enumerate(params.leaves()):
        st.m.append(np.asarray(a["m"][i], dtype=np.float64).reshape(lf.value.shape))
        st.v.append(np.asarray(a["v"][i], dtype=np.float64).reshape(lf.value.shape))
    return st
