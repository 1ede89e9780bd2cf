"""Class-conditional velocity network and flow-matching training.

The trunk sees ``[x | time embedding | class embedding]``. Row ``K`` of the class
table is the null class used for classifier-free guidance. An optional attention
block splits the first hidden layer into tokens and applies multi-head attention
with per-head L2-normalized queries/keys (QK-Norm) and a learned temperature.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigError, ContractError, NumericError, ShapeError
from .interpolant import LINEAR, Interpolant, regression_loss_at, sample_t, unit_weighting
from .netcore import (AdamWState, cosine_lr, Mlp, act_backward, act_forward, adamw_step, mlp_backward,
                      mlp_forward, mlp_init)

_NORM_EPS = 1e-12


def time_embed(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding ``[sin(f t), cos(f t)]`` with ``f`` geometric in [1, 1000]."""
    if dim < 2 or dim % 2:
        raise ConfigError(f"time embedding width must be even and >= 2, got {dim}")
    half = dim // 2
    freqs = np.geomspace(1.0, 1000.0, half) if half > 1 else np.ones(1)
    t = np.asarray(t, dtype=np.float64)
    arg = t[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


# ------------------------------------------------------------------ attention

@dataclass
class QKAttention:
    token_dim: int
    heads: int
    qk_norm: bool
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    temperature: np.ndarray  # (heads,), used only with qk_norm

    @classmethod
    def init(cls, token_dim: int, heads: int, qk_norm: bool = True, seed: int = 0,
             temperature: float | None = None) -> "QKAttention":
        if heads < 1 or token_dim % heads:
            raise ConfigError(f"token width {token_dim} not divisible by {heads} heads")
        rng = np.random.default_rng(seed)
        bound = np.sqrt(3.0 / token_dim)
        mats = [rng.uniform(-bound, bound, (token_dim, token_dim)) for _ in range(4)]
        dh = token_dim // heads
        temp = np.full(heads, float(temperature if temperature is not None else np.sqrt(dh)))
        return cls(token_dim, heads, qk_norm, *mats, temp)

    def params(self) -> list:
        return [self.wq, self.wk, self.wv, self.wo, self.temperature]

    @property
    def head_dim(self) -> int:
        return self.token_dim // self.heads

    def logits_bound(self) -> np.ndarray:
        return np.abs(self.temperature)

    def forward(self, tokens):
        x = np.asarray(tokens, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != self.token_dim or x.shape[1] < 1:
            raise ShapeError(f"tokens must be (n, L>=1, {self.token_dim}), got {x.shape}")
        n, L, _ = x.shape
        h, dh = self.heads, self.head_dim

        def split(m):
            return (x @ m).reshape(n, L, h, dh).transpose(0, 2, 1, 3)  # (n, h, L, dh)

        q, k, v = split(self.wq), split(self.wk), split(self.wv)
        if self.qk_norm:
            qn = np.sqrt(np.sum(q * q, -1, keepdims=True) + _NORM_EPS)
            kn = np.sqrt(np.sum(k * k, -1, keepdims=True) + _NORM_EPS)
            qh, kh = q / qn, k / kn
            dots = qh @ kh.transpose(0, 1, 3, 2)
            logits = self.temperature[None, :, None, None] * dots
        else:
            qn = kn = qh = kh = dots = None
            logits = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(dh)
        logits = logits - logits.max(-1, keepdims=True)
        a = np.exp(logits)
        a /= a.sum(-1, keepdims=True)
        o = a @ v  # (n, h, L, dh)
        o_cat = o.transpose(0, 2, 1, 3).reshape(n, L, self.token_dim)
        y = o_cat @ self.wo
        cache = (x, q, k, v, qn, kn, qh, kh, dots, a, o_cat)
        return y, cache

    def backward(self, cache, gy):
        x, q, k, v, qn, kn, qh, kh, dots, a, o_cat = cache
        n, L, _ = x.shape
        h, dh = self.heads, self.head_dim
        gy = np.asarray(gy, dtype=np.float64)
        g_wo = np.einsum("nld,nle->de", o_cat, gy)
        g_o = (gy @ self.wo.T).reshape(n, L, h, dh).transpose(0, 2, 1, 3)
        g_a = g_o @ v.transpose(0, 1, 3, 2)
        g_v = a.transpose(0, 1, 3, 2) @ g_o
        g_logits = a * (g_a - np.sum(g_a * a, -1, keepdims=True))
        if self.qk_norm:
            g_temp = np.einsum("nhij,nhij->h", g_logits, dots)
            g_dots = g_logits * self.temperature[None, :, None, None]
            g_qh = g_dots @ kh
            g_kh = g_dots.transpose(0, 1, 3, 2) @ qh
            g_q = (g_qh - qh * np.sum(g_qh * qh, -1, keepdims=True)) / qn
            g_k = (g_kh - kh * np.sum(g_kh * kh, -1, keepdims=True)) / kn
        else:
            g_temp = np.zeros_like(self.temperature)
            scale = 1.0 / np.sqrt(dh)
            g_q = (g_logits @ k) * scale
            g_k = (g_logits.transpose(0, 1, 3, 2) @ q) * scale

        def merge(g):
            return g.transpose(0, 2, 1, 3).reshape(n, L, self.token_dim)

        g_q, g_k, g_v = merge(g_q), merge(g_k), merge(g_v)
        g_wq = np.einsum("nld,nle->de", x, g_q)
        g_wk = np.einsum("nld,nle->de", x, g_k)
        g_wv = np.einsum("nld,nle->de", x, g_v)
        g_x = g_q @ self.wq.T + g_k @ self.wk.T + g_v @ self.wv.T
        return [g_wq, g_wk, g_wv, g_wo, g_temp], g_x


def qk_attention(block: QKAttention, tokens):
    return block.forward(tokens)[0]


# ------------------------------------------------------------------ velocity net

@dataclass
class VelocityNet:
    feature_dim: int
    n_classes: int
    time_dim: int
    class_table: np.ndarray  # (K + 1, class_dim)
    trunk: Mlp  # full trunk, or the layers after attention when enabled
    stem: Mlp | None = None  # first layer feeding the attention block
    attention: QKAttention | None = None
    n_tokens: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def null_class(self) -> int:
        return self.n_classes

    def params(self) -> list:
        ps = [self.class_table]
        if self.stem is not None:
            ps += self.stem.params() + self.attention.params()
        return ps + self.trunk.params()

    def zero_output(self) -> None:
        self.trunk.weights[-1][...] = 0.0
        self.trunk.biases[-1][...] = 0.0

    def _inputs(self, x, t, class_id):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.feature_dim:
            raise ShapeError(f"feature width {x.shape[1]} != {self.feature_dim}")
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        c = np.broadcast_to(np.asarray(class_id), (n,)).astype(np.int64)
        if np.any(c < 0) or np.any(c > self.n_classes):
            raise ConfigError(f"class id outside [0, {self.n_classes}]")
        z = np.concatenate([x, time_embed(t, self.time_dim), self.class_table[c]], axis=1)
        return z, c

    def forward(self, x, t, class_id):
        z, c = self._inputs(x, t, class_id)
        if self.stem is None:
            out, tc = mlp_forward(self.trunk, z)
            return out, (c, None, tc)
        pre, sc = mlp_forward(self.stem, z)
        hid = act_forward(self.trunk.activation, pre)
        n = hid.shape[0]
        tokens = hid.reshape(n, self.n_tokens, -1)
        att, ac = self.attention.forward(tokens)
        mixed = hid + att.reshape(n, -1)
        out, tc = mlp_forward(self.trunk, mixed)
        return out, (c, (sc, pre, ac), tc)

    def backward(self, cache, grad_out):
        """Parameter gradients in ``params()`` order, plus the input-feature gradient."""
        c, stem_cache, tc = cache
        g_trunk, g_z = mlp_backward(self.trunk, tc, grad_out)
        g_stem = g_att = []
        if stem_cache is not None:
            sc, pre, ac = stem_cache
            n = g_z.shape[0]
            g_att, g_tok = self.attention.backward(ac, g_z.reshape(n, self.n_tokens, -1))
            g_hid = g_z + g_tok.reshape(n, -1)
            g_pre = act_backward(self.trunk.activation, pre, g_hid)
            g_stem, g_z = mlp_backward(self.stem, sc, g_pre)
        g_table = np.zeros_like(self.class_table)
        np.add.at(g_table, c, g_z[:, self.feature_dim + self.time_dim:])
        return [g_table] + g_stem + g_att + g_trunk, g_z[:, :self.feature_dim]

    def __call__(self, x, t, class_id):
        return self.forward(x, t, class_id)[0]

    def as_model(self):
        """Adapter for the interpolant losses: ``model(xt, t, labels) -> (pred, backward)``."""
        def model(xt, t, labels):
            out, cache = self.forward(xt, t, labels)
            return out, lambda g: self.backward(cache, g)[0]
        return model

    def copy(self) -> "VelocityNet":
        import copy

        return copy.deepcopy(self)


def velocity_init(feature_dim: int, n_classes: int, hidden=(256, 256), time_dim: int = 32,
                  class_dim: int = 16, activation: str = "silu", attention: bool = False,
                  heads: int = 4, n_tokens: int = 4, qk_norm: bool = True,
                  seed: int = 0) -> VelocityNet:
    if n_classes < 1:
        raise ConfigError("need at least one class")
    hidden = [int(h) for h in hidden]
    rng = np.random.default_rng(seed)
    table = rng.normal(0.0, 1.0, (n_classes + 1, class_dim))
    in_dim = feature_dim + time_dim + class_dim
    meta = {"hidden": hidden, "class_dim": class_dim, "activation": activation,
            "attention": attention, "heads": heads, "n_tokens": n_tokens, "qk_norm": qk_norm,
            "seed": seed}
    if not attention:
        trunk = mlp_init([in_dim] + hidden + [feature_dim], activation, seed + 1)
        return VelocityNet(feature_dim, n_classes, time_dim, table, trunk, meta=meta)
    width = hidden[0]
    if width % n_tokens:
        raise ConfigError(f"hidden width {width} not divisible into {n_tokens} tokens")
    stem = mlp_init([in_dim, width], activation, seed + 1)
    att = QKAttention.init(width // n_tokens, heads, qk_norm, seed + 2)
    trunk = mlp_init(hidden + [feature_dim], activation, seed + 3)
    return VelocityNet(feature_dim, n_classes, time_dim, table, trunk, stem, att, n_tokens, meta)


def velocity_forward(net: VelocityNet, x, t, class_id):
    return net(x, t, class_id)


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    batch: int = 256
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    iterations: int = 2000
    label_drop_prob: float = 0.1
    log_every: int = 50
    lr_floor: float = 1.0  # cosine-anneal to lr * lr_floor; 1.0 keeps lr constant
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.lr_floor <= 1:
            raise ConfigError("lr_floor must lie in (0, 1]")
        if not 0 <= self.label_drop_prob < 1:
            raise ConfigError("label_drop_prob must lie in [0, 1)")
        if self.batch < 1 or self.iterations < 1:
            raise ConfigError("batch and iterations must be positive")


def train_flow(net: VelocityNet, features, labels, config: TrainConfig,
               interp: Interpolant = LINEAR, weighting=unit_weighting):
    """AdamW on the flow-matching loss over pre-normalized features.

    Returns ``(net, loss_curve)`` where each curve entry is the mean loss over one
    logging interval. On a non-finite loss the net is rolled back to the last
    interval boundary and ``NumericError`` is raised with it attached.
    """
    x_all = np.asarray(features, dtype=np.float64)
    y_all = np.asarray(labels, dtype=np.int64)
    if x_all.ndim != 2 or x_all.shape[1] != net.feature_dim or x_all.shape[0] != y_all.size:
        raise ShapeError("features must be (n, feature_dim) with one label each")
    if np.any(y_all < 0) or np.any(y_all >= net.n_classes):
        raise ConfigError("training labels must lie in [0, K)")
    rng = np.random.default_rng(config.seed)
    params = net.params()
    opt = AdamWState(lr=config.lr, beta1=config.betas[0], beta2=config.betas[1],
                     weight_decay=config.weight_decay)
    model = net.as_model()
    n = x_all.shape[0]
    curve, window = [], []
    good = [p.copy() for p in params]
    for it in range(config.iterations):
        if config.lr_floor < 1:
            opt.lr = cosine_lr(config.lr, config.lr_floor, it, config.iterations)
        idx = rng.integers(0, n, size=min(config.batch, n))
        x0, y = x_all[idx], y_all[idx].copy()
        if config.label_drop_prob > 0:
            y[rng.uniform(size=y.size) < config.label_drop_prob] = net.null_class
        eps = rng.standard_normal(x0.shape)
        t = sample_t(rng, x0.shape[0])
        try:
            loss, grads = regression_loss_at(model, x0, eps, t, y, interp, weighting)
            adamw_step(params, grads, opt)
        except NumericError as exc:
            for p, g in zip(params, good):
                p[...] = g
            exc.net = net
            exc.loss_curve = curve
            raise
        window.append(loss)
        if len(window) == config.log_every or it == config.iterations - 1:
            curve.append(float(np.mean(window)))
            window = []
            for p, g in zip(params, good):
                g[...] = p
    return net, curve


class FlowMatcher(BaseEstimator):
    """Estimator wrapper: ``fit(features, labels)`` trains a :class:`VelocityNet`."""

    def __init__(self, hidden=(256, 256), time_dim=32, class_dim=16, attention=False,
                 heads=4, n_tokens=4, qk_norm=True, batch=256, lr=1e-4, weight_decay=0.0,
                 iterations=2000, label_drop_prob=0.1, log_every=50, lr_floor=1.0, seed=0):
        self.hidden = hidden
        self.time_dim = time_dim
        self.class_dim = class_dim
        self.attention = attention
        self.heads = heads
        self.n_tokens = n_tokens
        self.qk_norm = qk_norm
        self.batch = batch
        self.lr = lr
        self.weight_decay = weight_decay
        self.iterations = iterations
        self.label_drop_prob = label_drop_prob
        self.log_every = log_every
        self.lr_floor = lr_floor
        self.seed = seed

    def train_config(self) -> TrainConfig:
        return TrainConfig(batch=self.batch, lr=self.lr, weight_decay=self.weight_decay,
                           iterations=self.iterations, label_drop_prob=self.label_drop_prob,
                           log_every=self.log_every, lr_floor=self.lr_floor, seed=self.seed)

    def fit(self, X, y, n_classes: int | None = None):
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        k = int(n_classes if n_classes is not None else y.max() + 1)
        net = velocity_init(X.shape[1], k, self.hidden, self.time_dim, self.class_dim,
                            attention=self.attention, heads=self.heads,
                            n_tokens=self.n_tokens, qk_norm=self.qk_norm, seed=self.seed)
        self.net_, self.loss_curve_ = train_flow(net, X, y, self.train_config())
        self.n_features_in_ = X.shape[1]
        return self

    def velocity(self, x, t, class_id):
        check_is_fitted(self, "net_")
        return self.net_(x, t, class_id)


def assert_frozen(before: str, after: str, what: str = "encoder") -> None:
    if before != after:
        raise ContractError(f"frozen {what} changed: checksum {before[:12]} -> {after[:12]}")


__all__ = ["time_embed", "QKAttention", "qk_attention", "VelocityNet", "velocity_init",
           "velocity_forward", "TrainConfig", "train_flow", "FlowMatcher", "assert_frozen"]
