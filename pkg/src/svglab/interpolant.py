"""Forward corruption path, velocity targets and the two training losses.

Data sits at ``t = 0`` and noise at ``t = 1``. Losses use the mean over the batch of
the per-sample sum of squares, weighted by ``weighting(t)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, NumericError, ShapeError


@dataclass(frozen=True)
class Interpolant:
    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ConfigError(f"unsupported interpolant {self.kind!r}")

    def alpha(self, t):
        return 1.0 - np.asarray(t, dtype=np.float64)

    def sigma(self, t):
        return np.asarray(t, dtype=np.float64)


LINEAR = Interpolant()


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1) or not np.all(np.isfinite(t)):
        raise ConfigError("t must lie in [0, 1]")
    return t


def _bcast_t(t, x):
    """Per-sample times of shape (n,) broadcast against (n, d)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1 and x.ndim > 1:
        return t.reshape((-1,) + (1,) * (x.ndim - 1))
    return t


def corrupt(interp: Interpolant, x0, eps, t):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = _bcast_t(_check_t(t), x0)
    return interp.alpha(t) * x0 + interp.sigma(t) * eps


def velocity_target(x0, eps):
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    return eps - x0


def sample_t(rng: np.random.Generator, n: int | None = None, scheme: str = "uniform"):
    if scheme != "uniform":
        raise ConfigError(f"unknown t scheme {scheme!r}")
    return rng.uniform(0.0, 1.0, size=n)


def unit_weighting(t):
    return np.ones_like(np.asarray(t, dtype=np.float64))


def _regression_loss(model: Callable, x0, labels, interp, weighting, rng, target_kind):
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ShapeError("batch must be a non-empty (n, d) array")
    n = x0.shape[0]
    eps = rng.standard_normal(x0.shape)
    t = sample_t(rng, n)
    return regression_loss_at(model, x0, eps, t, labels, interp, weighting, target_kind)


def regression_loss_at(model: Callable, x0, eps, t, labels, interp=LINEAR,
                       weighting: Callable = unit_weighting, target_kind: str = "velocity"):
    """Loss and output-gradient for explicit ``(eps, t)`` draws.

    ``model(xt, t, labels)`` returns ``(prediction, backward)`` where
    ``backward(grad_out)`` yields parameter gradients. Returns ``(loss, grads)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.shape[0]
    xt = corrupt(interp, x0, eps, t)
    target = velocity_target(x0, eps) if target_kind == "velocity" else np.asarray(eps)
    pred, backward = model(xt, np.asarray(t, dtype=np.float64), labels)
    resid = pred - target
    lam = np.asarray(weighting(np.asarray(t, dtype=np.float64)), dtype=np.float64).reshape(-1)
    per = np.sum(resid.reshape(n, -1) ** 2, axis=1)
    loss = float(np.sum(lam * per) / n)
    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")
    gout = (2.0 / n) * _bcast_t(lam, resid) * resid
    grads = backward(gout) if backward is not None else None
    return loss, grads


def fm_loss(model: Callable, x0, labels=None, interp: Interpolant = LINEAR,
            weighting: Callable = unit_weighting, rng: np.random.Generator | None = None):
    """Flow-matching loss: regress the model onto ``eps - x0`` at ``x_t``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return _regression_loss(model, x0, labels, interp, weighting, rng, "velocity")


def eps_loss(model: Callable, x0, labels=None, interp: Interpolant = LINEAR,
             weighting: Callable = unit_weighting, rng: np.random.Generator | None = None):
    """Noise-prediction loss: regress the model onto the injected ``eps``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return _regression_loss(model, x0, labels, interp, weighting, rng, "eps")
