"""Feature-space and image statistics: dispersion, velocity coherence, probes, PSNR/SSIM, PCA."""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ConfigError, NumericError, ShapeError
from .netcore import AdamWState, adamw_step
from .oracle import sliced_wasserstein

SCORE_CAP = 1e6
PSNR_IDENTICAL = float("inf")


def dispersion_score(features, labels) -> float:
    """Mean pairwise centroid distance over mean distance to own class centroid."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if f.ndim != 2 or f.shape[0] != y.size:
        raise ShapeError("features must be (n, C) with one label per row")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ConfigError("dispersion_score needs at least two classes")
    if np.any(counts < 2):
        raise ConfigError("dispersion_score needs at least two points per class")
    cents = np.stack([f[y == c].mean(axis=0) for c in classes])
    idx = np.searchsorted(classes, y)
    within = float(np.mean(np.linalg.norm(f - cents[idx], axis=1)))
    iu = np.triu_indices(classes.size, k=1)
    between = float(np.mean(np.linalg.norm(cents[:, None] - cents[None, :], axis=2)[iu]))
    return float(min(between / max(within, 1e-8), SCORE_CAP))


def _unit_rows(v):
    norms = np.linalg.norm(v, axis=1)
    keep = norms > 0
    return v[keep] / norms[keep, None]


def velocity_coherence(x, classes, v) -> dict:
    """Within-class direction agreement and cross-class divergence of a velocity sample.

    Coherence is the mean pairwise cosine among a class's velocities, mapped to
    [0, 1]. Divergence is the mean cosine between the classes' mean directions.
    Zero vectors are dropped.
    """
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    cls = np.asarray(classes).reshape(-1)
    if x is not None and np.asarray(x).shape[0] != v.shape[0]:
        raise ShapeError("x and v disagree on sample count")
    if cls.size != v.shape[0]:
        raise ShapeError("one class per velocity required")
    coherence, means = {}, []
    labels = np.unique(cls)
    for c in labels:
        u = _unit_rows(v[cls == c])
        if u.shape[0] < 2:
            raise NumericError(f"class {c} has fewer than two non-zero velocities")
        s = u.sum(axis=0)
        m = u.shape[0]
        cos_mean = (float(s @ s) - m) / (m * (m - 1))
        coherence[int(c)] = 0.5 * (cos_mean + 1.0)
        means.append(s / np.linalg.norm(s) if np.linalg.norm(s) > 0 else s)
    means = np.array(means)
    iu = np.triu_indices(len(labels), k=1)
    div = float(np.mean((means @ means.T)[iu])) if len(labels) > 1 else float("nan")
    return {"coherence": coherence, "mean_coherence": float(np.mean(list(coherence.values()))),
            "divergence": div, "mean_directions": means}


# ------------------------------------------------------------------ probe

class LinearProbe(BaseEstimator, ClassifierMixin):
    """Single linear layer with softmax cross-entropy, trained by AdamW on standardized inputs."""

    def __init__(self, epochs=200, batch=128, lr=5e-3, weight_decay=1e-4, seed=0):
        self.epochs = epochs
        self.batch = batch
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed

    def fit(self, X, y):
        from .latentspace import softmax_xent

        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ConfigError("probe needs at least two classes")
        self.mean_ = X.mean(axis=0)
        self.scale_ = np.maximum(X.std(axis=0), 1e-8)
        Z = (X - self.mean_) / self.scale_
        rng = np.random.default_rng(self.seed)
        k = self.classes_.size
        self.coef_ = rng.uniform(-1, 1, (X.shape[1], k)) * np.sqrt(6.0 / (X.shape[1] + k))
        self.intercept_ = np.zeros(k)
        params = [self.coef_, self.intercept_]
        opt = AdamWState(lr=self.lr, weight_decay=self.weight_decay)
        n = Z.shape[0]
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for i in range(0, n, self.batch):
                idx = order[i:i + self.batch]
                _, g = softmax_xent(Z[idx] @ self.coef_ + self.intercept_, yi[idx])
                adamw_step(params, [Z[idx].T @ g, g.sum(axis=0)], opt)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return ((X - self.mean_) / self.scale_) @ self.coef_ + self.intercept_

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def probe_split(n: int, split_seed: int = 0, test_frac: float = 0.2):
    order = np.random.default_rng(split_seed).permutation(n)
    n_test = int(round(n * test_frac))
    return order[n_test:], order[:n_test]


def linear_probe(features, labels, split_seed: int = 0, epochs: int = 200, **kw) -> float:
    """Held-out accuracy of a linear probe on an 80/20 split."""
    f = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    train, test = probe_split(y.size, split_seed)
    if test.size == 0 or np.unique(y[train]).size < 2:
        raise ConfigError("degenerate probe split")
    probe = LinearProbe(epochs=epochs, seed=split_seed, **kw).fit(f[train], y[train])
    return float(probe.score(f[test], y[test]))


# ------------------------------------------------------------------ images

def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * np.log10(1.0 / mse)


def mean_psnr(A, B) -> float:
    """Per-image PSNR averaged over a batch (identical pairs excluded from the mean)."""
    vals = np.array([psnr(a, b) for a, b in zip(A, B)])
    finite = vals[np.isfinite(vals)]
    return float(finite.mean()) if finite.size else PSNR_IDENTICAL


def ssim(a, b, window_sigma: float = 1.5, window: int = 11, k1: float = 0.01,
         k2: float = 0.03) -> float:
    """Gaussian-window SSIM on [0, 1] images, valid region only, channels averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < window:
        raise ShapeError(f"image smaller than the {window}px window")
    r = window // 2
    truncate = r / window_sigma
    c1, c2 = k1 ** 2, k2 ** 2

    def blur(img):
        return gaussian_filter(img, window_sigma, truncate=truncate)[r:-r or None, r:-r or None]

    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))
        scores.append(smap.mean())
    return float(np.mean(scores))


# ------------------------------------------------------------------ PCA

class PCAProjection(BaseEstimator, TransformerMixin):
    """Top-k eigenvectors of the sample covariance, sign-fixed so each axis's
    largest-magnitude coordinate is positive."""

    def __init__(self, k=2):
        self.k = k

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, c = X.shape
        if not 1 <= self.k <= c or n <= self.k:
            raise ConfigError(f"need n > k >= 1 and k <= C, got n={n}, k={self.k}, C={c}")
        self.mean_ = X.mean(axis=0)
        cov = np.cov(X - self.mean_, rowvar=False, ddof=1).reshape(c, c)
        vals, vecs = np.linalg.eigh(cov)
        order = np.argsort(vals)[::-1]
        vals = np.maximum(vals[order], 0.0)
        vecs = vecs[:, order]
        pick = np.argmax(np.abs(vecs), axis=0)
        vecs = vecs * np.sign(vecs[pick, np.arange(c)])
        self.components_ = vecs[:, :self.k].T
        self.explained_variance_ = vals[:self.k]
        total = vals.sum()
        self.explained_variance_ratio_ = self.explained_variance_ / total if total > 0 else np.zeros(self.k)
        self.n_features_in_ = c
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "components_")
        return np.asarray(Z) @ self.components_ + self.mean_


def pca_project(features, k: int):
    p = PCAProjection(k).fit(features)
    return p.transform(features), p.explained_variance_


# ------------------------------------------------------------------ few-step gap

def few_step_gap(generate: Callable, target: Callable, steps_low: int, steps_high: int,
                 n: int, seed: int = 0, n_proj: int = 64) -> dict:
    """SW2 to fresh target draws at two step budgets.

    ``generate(n, steps, seed)`` returns samples; ``target(n, seed)`` returns target
    draws. Both budgets integrate the same noise seed.
    """
    if steps_low > steps_high:
        raise ConfigError("steps_low must not exceed steps_high")
    ref = target(n, seed + 1)
    lo = generate(n, steps_low, seed)
    sw_lo = sliced_wasserstein(lo, ref, n_proj, seed)
    if steps_low == steps_high:
        sw_hi = sw_lo
    else:
        sw_hi = sliced_wasserstein(generate(n, steps_high, seed), ref, n_proj, seed)
    return {"sw2_low": sw_lo, "sw2_high": sw_hi, "gap": sw_lo - sw_hi,
            "steps_low": steps_low, "steps_high": steps_high, "n": n}
