"""Dense MLPs with hand-written reverse mode, AdamW, and finite-difference checks.

Tensors are plain float64 numpy arrays. Weights are stored as ``(fan_in, fan_out)``
so a batch ``x`` of shape ``(n, fan_in)`` maps to ``x @ W + b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, UsageError

ACTIVATIONS = ("relu", "silu", "tanh")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def act_forward(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "silu":
        return z * _sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    raise ConfigError(f"unknown activation {name!r}")


def act_backward(name: str, z: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient through the activation, given its pre-activation ``z``."""
    if name == "relu":
        return g * (z > 0)
    if name == "silu":
        s = _sigmoid(z)
        return g * (s * (1.0 + z * (1.0 - s)))
    if name == "tanh":
        return g * (1.0 - np.tanh(z) ** 2)
    raise ConfigError(f"unknown activation {name!r}")


@dataclass
class MlpCache:
    owner: int
    inputs: list  # input to each linear layer
    pre: list  # pre-activations of hidden layers
    out_shape: tuple
    lead_shape: tuple
    used: bool = False


@dataclass
class Mlp:
    layer_dims: list
    activation: str
    weights: list
    biases: list

    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Mlp":
        return Mlp(list(self.layer_dims), self.activation,
                   [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, x):
        return mlp_forward(self, x)

    def backward(self, cache, output_grad):
        return mlp_backward(self, cache, output_grad)

    def __call__(self, x):
        return mlp_forward(self, x)[0]


def mlp_init(layer_dims: Sequence[int], activation: str = "silu", seed: int = 0) -> Mlp:
    """Glorot-uniform weights in ``±sqrt(6 / (fan_in + fan_out))``, zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ConfigError(f"layer_dims needs >= 2 positive widths, got {list(layer_dims)}")
    if activation not in ACTIVATIONS:
        raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Mlp(dims, activation, weights, biases)


def mlp_forward(net: Mlp, x) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != net.layer_dims[0]:
        raise ShapeError(f"input last extent {x.shape[-1:]} != {net.layer_dims[0]}")
    lead = x.shape[:-1]
    h = x.reshape(-1, net.layer_dims[0])
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w + b
        if i < last:
            pre.append(z)
            h = act_forward(net.activation, z)
        else:
            h = z
    out = h.reshape(lead + (net.layer_dims[-1],))
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite MLP output")
    return out, MlpCache(id(net), inputs, pre, out.shape, lead)


def mlp_backward(net: Mlp, cache: MlpCache | None, output_grad) -> tuple:
    """Returns ``(param_grads, input_grad)``; ``param_grads`` follows ``net.params()``."""
    if cache is None or not isinstance(cache, MlpCache):
        raise UsageError("mlp_backward needs the cache from mlp_forward")
    if cache.owner != id(net) or cache.used:
        raise UsageError("stale cache: it belongs to another net or was already consumed")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache.out_shape:
        raise ShapeError(f"output_grad shape {g.shape} != forward output {cache.out_shape}")
    cache.used = True
    g = g.reshape(-1, net.layer_dims[-1])
    n_layers = len(net.weights)
    grads = [None] * (2 * n_layers)
    for i in range(n_layers - 1, -1, -1):
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ net.weights[i].T
        if i > 0:
            g = act_backward(net.activation, cache.pre[i - 1], g)
    return grads, g.reshape(cache.lead_shape + (net.layer_dims[0],))


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    epsilon_hat: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


def adamw_step(params: list, grads: list, state: AdamWState) -> AdamWState:
    """Decoupled-weight-decay Adam update, applied to ``params`` in place."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeError(f"grad shape {np.shape(g)} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; optimizer state left unchanged")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    elif any(m.shape != p.shape for m, p in zip(state.m, params)) or len(state.m) != len(params):
        raise ShapeError("optimizer moments do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon_hat)
    return state


def cosine_lr(base: float, floor_frac: float, epoch: int, epochs: int) -> float:
    """Cosine annealing from ``base`` down to ``base * floor_frac`` at the last epoch."""
    if epochs <= 1:
        return base
    c = 0.5 * (1.0 + np.cos(np.pi * epoch / (epochs - 1)))
    return base * (floor_frac + (1.0 - floor_frac) * c)


def grad_check(f: Callable, point, h: float = 1e-5, n_coords: int | None = None,
               seed: int = 0, reduce: str = "max") -> float:
    """Relative error between ``f``'s analytic gradient and central differences.

    ``f(x)`` must return ``(scalar, grad)`` with ``grad`` shaped like ``x``. With
    ``n_coords`` set, a seeded random subset of coordinates is checked.
    ``reduce="max"`` gives the worst per-coordinate error; ``reduce="norm"`` gives
    ``|g - fd| / max(|g|, |fd|)`` over the checked coordinates as one vector, which
    stays meaningful when single coordinates sit at roundoff level.
    """
    if not (0 < h <= 1e-2):
        raise UsageError("h must lie in (0, 1e-2]")
    if reduce not in ("max", "norm"):
        raise UsageError("reduce must be 'max' or 'norm'")
    x = np.array(point, dtype=np.float64)
    value, grad = f(x.copy())
    if np.ndim(value) != 0:
        raise UsageError("grad_check needs a scalar-valued function")
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    idx = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, n_coords, replace=False))
    fds = np.empty(idx.size)
    for j, i in enumerate(idx):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fds[j] = (float(f(xp.reshape(x.shape))[0]) - float(f(xm.reshape(x.shape))[0])) / (2 * h)
    a = grad[idx]
    if reduce == "norm":
        return float(np.linalg.norm(a - fds) / max(np.linalg.norm(a), np.linalg.norm(fds), 1e-12))
    return float(np.max(np.abs(a - fds) / np.maximum(np.maximum(np.abs(a), np.abs(fds)), 1e-8), initial=0.0))


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten_into(arrays: Sequence[np.ndarray], flat: np.ndarray) -> None:
    """Write ``flat`` back into ``arrays`` in place (inverse of ``flatten``)."""
    off = 0
    for a in arrays:
        a[...] = flat[off:off + a.size].reshape(a.shape)
        off += a.size
    if off != flat.size:
        raise ShapeError("flat vector length does not match parameter list")


def param_grad_check(params: list, loss_and_grads: Callable, h: float = 1e-5,
                     n_coords: int | None = 60, seed: int = 0, reduce: str = "max") -> float:
    """grad_check over a parameter list; ``loss_and_grads()`` reads params in place."""
    saved = [p.copy() for p in params]

    def f(theta):
        unflatten_into(params, theta)
        loss, grads = loss_and_grads()
        return loss, flatten(grads)

    try:
        return grad_check(f, flatten(params), h=h, n_coords=n_coords, seed=seed, reduce=reduce)
    finally:
        for p, s in zip(params, saved):
            p[...] = s


def checksum(arrays: Sequence[np.ndarray]) -> str:
    """sha256 over the float32 little-endian encoding, as stored in checkpoints."""
    import hashlib

    hsh = hashlib.sha256()
    for a in arrays:
        hsh.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return hsh.hexdigest()
