"""Exact marginal velocity fields for isotropic Gaussian-mixture targets.

Under ``x_t = (1 - t) x0 + t eps`` the marginal velocity is
``v(x, t) = (x - E[x0 | x_t = x]) / t``. For component ``i`` the noisy marginal is
``N((1 - t) mu_i, s_i^2 I)`` with ``s_i^2 = (1 - t)^2 var_i + t^2``, and the
per-component posterior mean is ``mu_i + (1 - t) var_i / s_i^2 (x - (1 - t) mu_i)``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .datagen import MixtureSpec, sample_mixture
from .errors import ConfigError, NumericError, ShapeError

ENDPOINT_PAD = 1e-3


def _prep(spec: MixtureSpec, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != spec.dim:
        raise ShapeError(f"query dim {x.shape[1]} != mixture dim {spec.dim}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)).copy()
    if np.any(t <= 0) or np.any(t >= 1):
        raise ConfigError("oracle velocity needs t strictly inside (0, 1)")
    return x, t, single


def posterior_mean(spec: MixtureSpec, x, t):
    """``E[x0 | x_t = x]`` with responsibilities evaluated in log space."""
    x, t, single = _prep(spec, x, t)
    a = (1.0 - t)[:, None]  # (n, 1)
    s2 = a ** 2 * spec.variances[None, :] + (t ** 2)[:, None]  # (n, k)
    centers = a[:, :, None] * spec.means[None, :, :]  # (n, k, d)
    diff = x[:, None, :] - centers
    sq = np.einsum("nkd,nkd->nk", diff, diff)
    logr = np.log(spec.weights)[None, :] - 0.5 * spec.dim * np.log(s2) - 0.5 * sq / s2
    logr -= logsumexp(logr, axis=1, keepdims=True)
    r = np.exp(logr)
    gain = a * spec.variances[None, :] / s2  # (n, k)
    comp_mean = spec.means[None, :, :] + gain[:, :, None] * diff
    out = np.einsum("nk,nkd->nd", r, comp_mean)
    return out[0] if single else out


def oracle_velocity(spec: MixtureSpec, x, t):
    xx, tt, single = _prep(spec, x, t)
    v = (xx - posterior_mean(spec, xx, tt)) / tt[:, None]
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite oracle velocity")
    return v[0] if single else v


def class_velocity(spec: MixtureSpec, x, t, class_id: int):
    """Velocity of the class-conditional sub-mixture."""
    return oracle_velocity(spec.restrict(class_id), x, t)


def _mixture_logpdf(spec: MixtureSpec, x0):
    d = spec.dim
    sq = np.sum((x0[:, None, :] - spec.means[None]) ** 2, axis=2)
    logc = (np.log(spec.weights) - 0.5 * d * np.log(2 * np.pi * spec.variances))[None, :]
    return logsumexp(logc - 0.5 * sq / spec.variances[None, :], axis=1)


def mc_velocity(spec: MixtureSpec, x, t: float, n: int = 200_000, seed: int = 0,
                min_ess: float = 10.0):
    """Self-normalized importance estimate of the marginal velocity.

    Uses only the prior density and the Gaussian likelihood, never the closed-form
    posterior. A share ``t`` of the draws comes from the prior (stratified over
    components), the rest from the likelihood viewed as a Gaussian in ``x0``; the
    two are combined with balance-heuristic weights so neither end of the time
    range starves the estimate.
    """
    if n < 1000:
        raise ConfigError("mc_velocity needs n >= 1000")
    if not 0 < t < 1:
        raise ConfigError("mc_velocity needs t strictly inside (0, 1)")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.size
    rng = np.random.default_rng(seed)
    share = min(max(t, 0.05), 0.95)
    n_prior = int(round(share * n))
    center, scale = x / (1.0 - t), t / (1.0 - t)
    x0 = np.concatenate([sample_mixture(spec, n_prior, rng, stratify=True).points,
                         center + scale * rng.standard_normal((n - n_prior, d))])
    log_prior = _mixture_logpdf(spec, x0)
    sq = np.sum((x0 - center) ** 2, axis=1)
    log_q = -0.5 * sq / scale ** 2 - d * np.log(scale) - 0.5 * d * np.log(2 * np.pi)
    # the likelihood N(x; (1 - t) x0, t^2) is q(x0) up to a constant
    log_target = log_prior + log_q
    log_prop = np.logaddexp(np.log(share) + log_prior, np.log1p(-share) + log_q)
    logw = log_target - log_prop
    logw -= logsumexp(logw)
    w = np.exp(logw)
    ess = 1.0 / np.sum(w * w)
    if ess < min_ess:
        raise NumericError(f"effective sample size {ess:.1f} < {min_ess}: unreliable estimate")
    return (w @ (x[None, :] - x0)) / t


def oracle_sample(spec: MixtureSpec, noise, steps: int, delta: float = ENDPOINT_PAD,
                  field: Callable | None = None):
    """Euler from ``t = 1 - delta`` to ``t = delta``, then one exact denoising jump.

    The closing jump ``x - delta * v(x, delta)`` equals the posterior mean at
    ``delta``, which is the limit of the flow as ``t -> 0``. ``field(x, t)``
    overrides the velocity (e.g. a class-conditional oracle).
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    f = field if field is not None else (lambda x, t: oracle_velocity(spec, x, t))
    x = np.array(noise, dtype=np.float64)
    ts = np.linspace(1.0 - delta, delta, steps + 1)
    for k in range(steps):
        x = x + (ts[k + 1] - ts[k]) * f(x, ts[k])
    return x - delta * f(x, delta)


def conditional_oracle_sample(spec: MixtureSpec, noise, labels, steps: int,
                              delta: float = ENDPOINT_PAD):
    """Class-conditional generation: each point follows its own class's field."""
    x = np.array(noise, dtype=np.float64)
    labels = np.asarray(labels)
    out = np.empty_like(x)
    for c in np.unique(labels):
        sel = labels == c
        sub = spec.restrict(int(c))
        out[sel] = oracle_sample(sub, x[sel], steps, delta)
    return out


# ------------------------------------------------------------ two-sample statistics

def random_directions(d: int, n_proj: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_proj, d))
    return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def wasserstein2_1d(a, b) -> float:
    """Exact W2 between two 1-D empirical measures with uniform weights."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    na, nb = a.size, b.size
    if na == nb:
        return float(np.sqrt(np.mean((a - b) ** 2)))
    cuts = np.union1d(np.arange(na + 1) / na, np.arange(nb + 1) / nb)
    widths = np.diff(cuts)
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    ia = np.minimum((mids * na).astype(np.int64), na - 1)
    ib = np.minimum((mids * nb).astype(np.int64), nb - 1)
    return float(np.sqrt(np.sum(widths * (a[ia] - b[ib]) ** 2)))


def sliced_wasserstein(A, B, n_proj: int = 64, seed: int = 0) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ShapeError("sliced_wasserstein needs non-empty point sets")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"dimension mismatch {A.shape[1]} vs {B.shape[1]}")
    dirs = random_directions(A.shape[1], n_proj, seed)
    pa, pb = A @ dirs.T, B @ dirs.T
    return float(np.mean([wasserstein2_1d(pa[:, j], pb[:, j]) for j in range(n_proj)]))


def _kernel_sum(X, Y, gamma, same: bool, block: int = 2048) -> float:
    total = 0.0
    for i in range(0, X.shape[0], block):
        xi = X[i:i + block]
        d2 = (np.sum(xi ** 2, 1)[:, None] + np.sum(Y ** 2, 1)[None, :] - 2.0 * xi @ Y.T)
        total += float(np.exp(-gamma * np.maximum(d2, 0.0)).sum())
    if same:
        total -= X.shape[0]  # drop the diagonal k(x, x) = 1
    return total


def mmd(A, B, bandwidth: float = 1.0) -> float:
    """Unbiased Gaussian-kernel MMD^2, clamped at zero."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    m, n = A.shape[0], B.shape[0]
    if m < 2 or n < 2:
        raise ShapeError("mmd needs at least two points per set")
    if A.shape[1] != B.shape[1]:
        raise ShapeError("dimension mismatch")
    gamma = 0.5 / bandwidth ** 2
    kxx = _kernel_sum(A, A, gamma, True) / (m * (m - 1))
    kyy = _kernel_sum(B, B, gamma, True) / (n * (n - 1))
    kxy = _kernel_sum(A, B, gamma, False) / (m * n)
    return max(kxx + kyy - 2.0 * kxy, 0.0)


def noise_floor(draw: Callable, n: int, resamples: int = 20, seed: int = 0,
                n_proj: int = 64) -> dict:
    """Null distribution of SW2 between two independent size-``n`` target draws.

    ``draw(n, rng)`` returns an ``(n, d)`` array. The floor is the mean of the
    null values; the 95th percentile is reported alongside.
    """
    rng = np.random.default_rng(seed)
    vals = np.array([sliced_wasserstein(draw(n, rng), draw(n, rng), n_proj, seed + i)
                     for i in range(resamples)])
    return {"mean": float(vals.mean()), "q95": float(np.quantile(vals, 0.95)),
            "values": vals.tolist()}
