"""Synthetic data: labeled Gaussian mixtures and a tiny procedural shape-image set."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class MixtureSpec:
    """Isotropic Gaussian mixture with a class label per component."""

    weights: np.ndarray
    means: np.ndarray  # (k, d)
    variances: np.ndarray  # (k,)
    class_ids: np.ndarray  # (k,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        k = self.weights.size
        if not (self.means.shape[0] == self.variances.size == self.class_ids.size == k):
            raise ShapeError("mixture fields disagree on component count")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ConfigError("mixture weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise ConfigError("component variances must be positive")
        if np.any(self.class_ids < 0):
            raise ConfigError("class ids must be non-negative")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.class_ids)

    def restrict(self, class_id: int) -> "MixtureSpec":
        """The class-conditional sub-mixture, weights renormalized."""
        keep = self.class_ids == class_id
        if not np.any(keep):
            raise ConfigError(f"class {class_id} not present in mixture")
        w = self.weights[keep]
        return MixtureSpec(w / w.sum(), self.means[keep], self.variances[keep],
                           self.class_ids[keep], dict(self.meta))

    def class_weights(self) -> np.ndarray:
        return np.array([self.weights[self.class_ids == c].sum() for c in self.classes])

    def class_centroids(self) -> np.ndarray:
        return np.stack([
            (self.weights[self.class_ids == c, None] * self.means[self.class_ids == c]).sum(0)
            / self.weights[self.class_ids == c].sum()
            for c in self.classes
        ])

    def pooled_mean(self) -> np.ndarray:
        return self.weights @ self.means

    def pooled_cov(self) -> np.ndarray:
        mu = self.pooled_mean()
        diff = self.means - mu
        cov = (self.weights[:, None] * diff).T @ diff
        return cov + np.eye(self.dim) * float(self.weights @ self.variances)

    def to_dict(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist(), "class_ids": self.class_ids.tolist(),
                "meta": self.meta}


@dataclass
class LabeledPoints:
    points: np.ndarray
    labels: np.ndarray


def make_mixture(preset: str, d: int = 2, seed: int | None = None,
                 half_separation: float = 2.0, var: float = 0.09) -> MixtureSpec:
    """Two-class mixtures with matched pooled mean and covariance.

    ``dispersed`` puts one component per class at ``±a`` along a layout axis.
    ``entangled`` interleaves eight components at odd multiples of ``b`` with
    mirror-symmetric alternating labels, so both class centroids sit at the origin;
    ``b = a / sqrt(21)`` makes the pooled second moments identical to the dispersed
    preset. The axis is ``e_1`` unless a
    seed is given, in which case it is a seeded random unit vector.
    """
    if d < 1:
        raise ConfigError("d must be >= 1")
    if half_separation <= 0 or var <= 0:
        raise ConfigError("half_separation and var must be positive")
    axis = np.zeros(d)
    axis[0] = 1.0
    if seed is not None:
        axis = np.random.default_rng(seed).standard_normal(d)
        axis /= np.linalg.norm(axis)
    a = float(half_separation)
    meta = {"preset": preset, "d": d, "half_separation": a, "var": var,
            "axis": axis.tolist()}
    if preset == "dispersed":
        offsets = np.array([-a, a])
        labels = np.array([0, 1])
    elif preset == "entangled":
        b = a / np.sqrt(21.0)
        offsets = b * np.array([-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0])
        labels = np.array([0, 1, 0, 1, 1, 0, 1, 0])
    else:
        raise ConfigError(f"unknown mixture preset {preset!r}")
    k = offsets.size
    return MixtureSpec(np.full(k, 1.0 / k), offsets[:, None] * axis[None, :],
                       np.full(k, float(var)), labels, meta)


def sample_mixture(spec: MixtureSpec, n: int, seed: int | np.random.Generator = 0,
                   stratify: bool = False) -> LabeledPoints:
    """Draw ``n`` labeled points.

    With ``stratify`` the component counts are fixed at ``n * weight`` (largest
    remainder) instead of multinomial, which removes mode-weight noise from
    two-sample comparisons; the points come out grouped by component.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if stratify:
        exact = spec.weights * n
        counts = np.floor(exact).astype(np.int64)
        short = n - counts.sum()
        counts[np.argsort(-(exact - counts), kind="stable")[:short]] += 1
        comp = np.repeat(np.arange(spec.weights.size), counts)
    else:
        comp = rng.choice(spec.weights.size, size=n, p=spec.weights)
    noise = rng.standard_normal((n, spec.dim))
    pts = spec.means[comp] + np.sqrt(spec.variances[comp])[:, None] * noise
    return LabeledPoints(pts, spec.class_ids[comp].copy())


# --------------------------------------------------------------------------- shapes

SHAPE_KINDS = ("disc", "square", "triangle", "cross", "ring", "diamond")
BACKGROUND = 0.1
_SUPERSAMPLE = 4


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v: coordinates relative to the centre in units of the radius
    if kind == "disc":
        return u * u + v * v <= 1.0
    if kind == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8
    if kind == "triangle":
        return (v <= 0.8) & (v >= -0.9) & (np.abs(u) <= 0.6 * (v + 0.9))
    if kind == "cross":
        return ((np.abs(u) <= 0.3) & (np.abs(v) <= 0.95)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 0.95))
    if kind == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.3)
    if kind == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    raise ConfigError(f"unknown shape kind {kind!r}")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    import colorsys

    return np.array(colorsys.hsv_to_rgb(h, s, v))


def render_shape(kind: str, size: int, cx: float, cy: float, radius: float,
                 color: np.ndarray) -> np.ndarray:
    """Anti-aliased single shape on a dark background, ``(size, size, 3)`` in [0, 1]."""
    ss = _SUPERSAMPLE
    grid = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    cover = _shape_mask(kind, (xx - cx) / radius, (yy - cy) / radius).astype(np.float64)
    cover = cover.reshape(size, ss, size, ss).mean(axis=(1, 3))
    img = BACKGROUND + cover[..., None] * (np.asarray(color)[None, None, :] - BACKGROUND)
    return np.clip(img, 0.0, 1.0)


@dataclass
class ShapeImageDataset:
    images: np.ndarray  # (n, H, W, C)
    labels: np.ndarray  # (n,)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.size:
            raise ShapeError("images must be (n, H, W, C) with one label per image")

    def __len__(self):
        return self.labels.size

    @property
    def n_classes(self) -> int:
        return int(self.config.get("K", int(self.labels.max()) + 1 if len(self) else 0))

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def flat(self) -> np.ndarray:
        return self.images.reshape(len(self), -1)

    def subset(self, idx) -> "ShapeImageDataset":
        return ShapeImageDataset(self.images[idx], self.labels[idx], dict(self.config))

    def __eq__(self, other):
        return (isinstance(other, ShapeImageDataset)
                and self.images.shape == other.images.shape
                and np.array_equal(self.images, other.images)
                and np.array_equal(self.labels, other.labels)
                and self.config == other.config)


def gen_shapes(n: int, K: int = 4, size: int = 16, seed: int = 0,
               scale_range=(0.22, 0.34), position_jitter: float = 0.18,
               saturation: float = 0.85, value: float = 0.95) -> ShapeImageDataset:
    """One jittered shape per image; class ``k`` always draws ``SHAPE_KINDS[k]``."""
    if K < 1 or K > len(SHAPE_KINDS):
        raise ConfigError(f"K must lie in [1, {len(SHAPE_KINDS)}], got {K}")
    if n < 1 or size < 4:
        raise ConfigError("need n >= 1 and size >= 4")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % K)
    images = np.empty((n, size, size, 3))
    for i, lab in enumerate(labels):
        cx, cy = size * (0.5 + rng.uniform(-position_jitter, position_jitter, size=2))
        radius = size * rng.uniform(*scale_range)
        color = _hsv_to_rgb(rng.uniform(), saturation, value)
        images[i] = render_shape(SHAPE_KINDS[lab], size, cx, cy, radius, color)
    config = {"n": n, "K": K, "size": size, "seed": seed, "kinds": list(SHAPE_KINDS[:K]),
              "scale_range": list(scale_range), "position_jitter": position_jitter,
              "saturation": saturation, "value": value, "background": BACKGROUND}
    return ShapeImageDataset(images, labels, config)


def write_dataset(path, dataset: ShapeImageDataset) -> None:
    from .fileio import save_dataset

    save_dataset(path, dataset)


def read_dataset(path) -> ShapeImageDataset:
    from .fileio import load_dataset

    return load_dataset(path)
