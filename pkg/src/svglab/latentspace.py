"""Semantic + residual feature codec and a reconstruction-trained baseline.

Feature layout is ``[semantic (C_s) | residual (C_r)]``; semantic channels always
occupy ``[0, C_s)``. Images enter as ``(n, H, W, C)`` arrays in [0, 1].
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import ConfigError, ContractError, NumericError, ShapeError, TrainingDivergedError, UsageError
from .netcore import (AdamWState, cosine_lr, Mlp, act_backward, act_forward, adamw_step, checksum,
                      mlp_backward, mlp_forward, mlp_init)

STD_FLOOR = 1e-6


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray
    population: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64).reshape(-1), STD_FLOOR)
        if self.mean.shape != self.std.shape:
            raise ShapeError("stats mean/std differ in length")

    @classmethod
    def of(cls, features) -> "ChannelStats":
        f = np.asarray(features, dtype=np.float64)
        return cls(f.mean(axis=0), f.std(axis=0), f.shape[0])

    @property
    def channels(self) -> int:
        return self.mean.size

    @property
    def pooled_mean(self) -> float:
        return float(self.mean.mean())

    @property
    def pooled_std(self) -> float:
        return float(self.std.mean())


def normalize(features, stats: ChannelStats):
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != stats.channels:
        raise ShapeError(f"feature width {f.shape[-1]} != stats width {stats.channels}")
    return (f - stats.mean) / stats.std


def denormalize(features, stats: ChannelStats):
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != stats.channels:
        raise ShapeError(f"feature width {f.shape[-1]} != stats width {stats.channels}")
    return f * stats.std + stats.mean


def alignment_penalty(residual_feats, target: ChannelStats, with_grad: bool = False):
    """Sum over residual channels of ``(mu_c - m)^2 + (sigma_c - s)^2``.

    ``mu_c, sigma_c`` are batch statistics; ``m, s`` are the mean of the target's
    channel means and the mean of its channel stds.
    """
    r = np.asarray(residual_feats, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] < 2:
        raise UsageError("alignment_penalty needs a batch of at least two rows")
    n = r.shape[0]
    mu = r.mean(axis=0)
    centered = r - mu
    sigma = np.sqrt(np.mean(centered ** 2, axis=0))
    dm = mu - target.pooled_mean
    ds = sigma - target.pooled_std
    value = float(np.sum(dm ** 2) + np.sum(ds ** 2))
    if not with_grad:
        return value
    grad = (2.0 * dm / n)[None, :] + (2.0 * ds / (n * np.maximum(sigma, STD_FLOOR)))[None, :] * centered
    return value, grad


def _as_flat_images(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 4:
        shape = X.shape[1:]
        X = X.reshape(X.shape[0], -1)
    elif X.ndim == 3:
        shape = X.shape
        X = X.reshape(1, -1)
    else:
        shape = None
    return check_array(X, dtype=np.float64), shape


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch):
        idx = order[i:i + batch]
        if idx.size >= 2:
            yield idx


def _pixel_loss(out, target):
    diff = out - target
    loss = float(np.mean(diff ** 2))
    return loss, 2.0 * diff / diff.size


def _snapshot(params):
    return [p.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p[...] = s


def _freeze_params(params) -> None:
    for p in params:
        p[...] = p.astype(np.float32).astype(np.float64)


def semantic_batch_loss(backbone: Mlp, head: Mlp, x, y):
    """Cross-entropy of the proxy classification head; grads follow backbone then head."""
    pre, bc = mlp_forward(backbone, x)
    logits, hc = mlp_forward(head, act_forward("relu", pre))
    loss, g_logits = softmax_xent(logits, y)
    g_head, g_feat = mlp_backward(head, hc, g_logits)
    g_bb, _ = mlp_backward(backbone, bc, act_backward("relu", pre, g_feat))
    return loss, g_bb + g_head


def codec_batch_loss(decoder: Mlp, residual: Mlp | None, sem_feats, x, target: ChannelStats,
                     align_weight: float):
    """Pixel MSE plus the weighted alignment penalty; grads follow decoder then residual."""
    if residual is not None:
        res, rc = mlp_forward(residual, x)
        feats = np.concatenate([sem_feats, res], axis=1)
    else:
        feats = sem_feats
    out, dc = mlp_forward(decoder, feats)
    loss, g_out = _pixel_loss(out, x)
    grads, g_feat = mlp_backward(decoder, dc, g_out)
    if residual is None:
        return loss, grads
    g_res = g_feat[:, sem_feats.shape[1]:]
    if align_weight > 0:
        pen, g_pen = alignment_penalty(res, target, with_grad=True)
        loss += align_weight * pen
        g_res = g_res + align_weight * g_pen
    return loss, grads + mlp_backward(residual, rc, g_res)[0]


def baseline_batch_loss(encoder: Mlp, decoder: Mlp, x, noise, kl_weight: float):
    """VAE objective for fixed reparameterization ``noise``; grads follow encoder then decoder.

    With ``kl_weight == 0`` the code is the mean and ``noise`` is ignored.
    """
    enc, ec = mlp_forward(encoder, x)
    c = enc.shape[1] // 2
    mu, logvar = enc[:, :c], enc[:, c:]
    if kl_weight > 0:
        std = np.exp(0.5 * logvar)
        z = mu + std * noise
    else:
        z = mu
    out, dc = mlp_forward(decoder, z)
    loss, g_out = _pixel_loss(out, x)
    g_dec, g_z = mlp_backward(decoder, dc, g_out)
    g_enc = np.zeros_like(enc)
    g_enc[:, :c] = g_z
    if kl_weight > 0:
        n = x.shape[0]
        loss += kl_weight * 0.5 * np.sum(mu ** 2 + np.exp(logvar) - 1.0 - logvar) / n
        g_enc[:, :c] += kl_weight * mu / n
        g_enc[:, c:] = g_z * noise * 0.5 * std + kl_weight * 0.5 * (np.exp(logvar) - 1.0) / n
    g_e, _ = mlp_backward(encoder, ec, g_enc)
    return loss, g_e + g_dec


# ------------------------------------------------------------------ semantic encoder

class SemanticEncoder(BaseEstimator, TransformerMixin):
    """Proxy for a frozen self-supervised backbone.

    ``fit`` trains the backbone with a temporary classification head, discards the
    head and freezes the backbone (parameters rounded to float32 so the frozen copy
    equals what a checkpoint stores). Features are the ReLU of the last layer.

    With ``color_invariant`` the backbone sees the per-pixel maximum over colour
    channels, so its features cannot depend on hue.
    """

    def __init__(self, width=32, hidden=(256,), epochs=30, batch=64, lr=1e-3,
                 weight_decay=1e-4, color_invariant=True, min_accuracy=0.8, seed=0):
        self.width = width
        self.color_invariant = color_invariant
        self.hidden = hidden
        self.epochs = epochs
        self.batch = batch
        self.lr = lr
        self.weight_decay = weight_decay
        self.min_accuracy = min_accuracy
        self.seed = seed

    @property
    def frozen(self) -> bool:
        return getattr(self, "frozen_", False)

    def _inputs(self, X):
        if not self.color_invariant:
            return X
        n_ch = self.image_shape_[-1] if self.image_shape_ else 1
        return X.reshape(X.shape[0], -1, n_ch).max(axis=2)

    def fit(self, X, y):
        if self.frozen:
            raise ContractError("semantic encoder is frozen; refusing to train it again")
        X, shape = _as_flat_images(X)
        self.image_shape_ = shape
        self.n_features_in_ = X.shape[1]
        X = self._inputs(X)
        y = np.asarray(y, dtype=np.int64)
        k = int(y.max()) + 1
        rng = np.random.default_rng(self.seed)
        self.backbone_ = mlp_init([X.shape[1], *self.hidden, self.width], "relu", self.seed)
        head = mlp_init([self.width, k], "relu", self.seed + 1)
        params = self.backbone_.params() + head.params()
        opt = AdamWState(lr=self.lr, weight_decay=self.weight_decay)
        for _ in range(self.epochs):
            for idx in _batches(X.shape[0], self.batch, rng):
                _, grads = semantic_batch_loss(self.backbone_, head, X[idx], y[idx])
                adamw_step(params, grads, opt)
        acc = float(np.mean(np.argmax(head(self._features(X)), 1) == y))
        self.training_meta_ = {"proxy_task": "shape classification", "head_accuracy": acc,
                               "n_classes": k, "epochs": self.epochs, "seed": self.seed}
        if acc < self.min_accuracy:
            raise TrainingDivergedError(f"semantic proxy reached only {acc:.3f} train accuracy")
        _freeze_params(self.backbone_.params())
        self.frozen_ = True
        self.checksum_ = checksum(self.backbone_.params())
        return self

    def _features(self, X):
        return act_forward("relu", self.backbone_(X))

    def transform(self, X):
        check_is_fitted(self, "backbone_")
        X, _ = _as_flat_images(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} input values, got {X.shape[1]}")
        return self._features(self._inputs(X))

    def current_checksum(self) -> str:
        return checksum(self.backbone_.params())


def softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), labels]))
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return loss, g / n


def pretrain_semantic(dataset, epochs: int = 30, seed: int = 0, **kw) -> SemanticEncoder:
    return SemanticEncoder(epochs=epochs, seed=seed, **kw).fit(dataset.images, dataset.labels)


# ------------------------------------------------------------------ SVG codec

class SvgCodec(BaseEstimator, TransformerMixin):
    """Frozen semantic features concatenated with a trained residual, plus a decoder.

    ``fit`` is stage 1: only the residual encoder and the decoder are optimized,
    on pixel squared error plus ``align_weight`` times the alignment penalty.
    ``residual_dim=0`` gives the semantic-only ablation.
    """

    def __init__(self, semantic=None, residual_dim=8, residual_hidden=(256,),
                 decoder_hidden=(512, 512), align_weight=0.1, epochs=40, batch=64, lr=3e-3,
                 lr_floor=0.05, weight_decay=0.0, seed=0):
        self.semantic = semantic
        self.residual_dim = residual_dim
        self.residual_hidden = residual_hidden
        self.decoder_hidden = decoder_hidden
        self.align_weight = align_weight
        self.epochs = epochs
        self.batch = batch
        self.lr = lr
        self.lr_floor = lr_floor
        self.weight_decay = weight_decay
        self.seed = seed

    def _check_semantic(self):
        sem = self.semantic
        if sem is None or not getattr(sem, "frozen", False):
            raise ContractError("stage 1 needs a trained, frozen semantic encoder")
        if sem.current_checksum() != sem.checksum_:
            raise ContractError("semantic encoder parameters changed after freezing")

    @property
    def semantic_dim(self) -> int:
        return self.semantic.width

    @property
    def feature_dim(self) -> int:
        return self.semantic.width + self.residual_dim

    def fit(self, X, y=None):
        self._check_semantic()
        X, shape = _as_flat_images(X)
        if self.align_weight < 0:
            raise ConfigError("align_weight must be non-negative")
        before = self.semantic.checksum_
        rng = np.random.default_rng(self.seed)
        sem_all = self.semantic.transform(X)
        self.semantic_stats_ = ChannelStats.of(sem_all)
        cr = int(self.residual_dim)
        self.residual_ = (mlp_init([X.shape[1], *self.residual_hidden, cr], "relu", self.seed)
                          if cr > 0 else None)
        self.decoder_ = mlp_init([self.semantic.width + cr, *self.decoder_hidden, X.shape[1]],
                                 "relu", self.seed + 1)
        params = self.decoder_.params() + (self.residual_.params() if cr else [])
        opt = AdamWState(lr=self.lr, weight_decay=self.weight_decay)
        self.loss_curve_ = []
        good = _snapshot(params)
        for epoch in range(self.epochs):
            opt.lr = cosine_lr(self.lr, self.lr_floor, epoch, self.epochs)
            total, count = 0.0, 0
            for idx in _batches(X.shape[0], self.batch, rng):
                loss, grads = codec_batch_loss(self.decoder_, self.residual_, sem_all[idx], X[idx],
                                               self.semantic_stats_, self.align_weight)
                if not np.isfinite(loss):
                    _restore(params, good)
                    raise NumericError(f"stage-1 loss became non-finite in epoch {epoch}")
                adamw_step(params, grads, opt)
                total += loss * idx.size
                count += idx.size
            self.loss_curve_.append(total / count)
            good = _snapshot(params)
        if self.semantic.current_checksum() != before:
            raise ContractError("semantic encoder changed during stage 1")
        self.semantic_checksum_ = before
        self.image_shape_ = shape
        self.n_features_in_ = X.shape[1]
        self.stats_ = ChannelStats.of(self._encode(X))
        return self

    def _encode(self, X):
        sem = self.semantic.transform(X)
        if not self.residual_dim:
            return sem
        return np.concatenate([sem, self.residual_(X)], axis=1)

    def transform(self, X):
        """Raw (unnormalized) SVG features, ``(n, C_s + C_r)``."""
        check_is_fitted(self, "decoder_")
        self._check_semantic()
        X, _ = _as_flat_images(X)
        return self._encode(X)

    def residual_features(self, X):
        check_is_fitted(self, "decoder_")
        X, _ = _as_flat_images(X)
        return self.residual_(X) if self.residual_dim else np.zeros((X.shape[0], 0))

    def inverse_transform(self, F):
        """Decode raw features to images clamped to [0, 1]."""
        check_is_fitted(self, "decoder_")
        F = np.atleast_2d(np.asarray(F, dtype=np.float64))
        if F.shape[1] != self.feature_dim:
            raise ShapeError(f"feature width {F.shape[1]} != {self.feature_dim}")
        out = np.clip(self.decoder_(F), 0.0, 1.0)
        return out.reshape((F.shape[0],) + tuple(self.image_shape_)) if self.image_shape_ else out

    def trainable_params(self) -> list:
        return self.decoder_.params() + (self.residual_.params() if self.residual_dim else [])

    def checksum(self) -> str:
        return checksum(self.semantic.backbone_.params() + self.trainable_params())


def svg_encode(codec: SvgCodec, images):
    return codec.transform(images)


def decode(codec, features):
    return codec.inverse_transform(features)


def train_codec_stage1(semantic: SemanticEncoder, dataset, config: dict | None = None,
                       seed: int = 0) -> SvgCodec:
    return SvgCodec(semantic=semantic, seed=seed, **(config or {})).fit(dataset.images)


# ------------------------------------------------------------------ baseline

class BaselineCodec(BaseEstimator, TransformerMixin):
    """Reconstruction-trained encoder/decoder with optional Gaussian latents.

    With ``kl_weight > 0`` training samples ``z = mu + exp(logvar / 2) * eps`` and adds
    ``kl_weight`` times the per-sample KL to N(0, I); ``transform`` returns ``mu``.
    """

    def __init__(self, latent_dim=40, hidden=(256,), decoder_hidden=(512, 512), kl_weight=1e-4,
                 epochs=40, batch=64, lr=3e-3, lr_floor=0.05, seed=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.decoder_hidden = decoder_hidden
        self.kl_weight = kl_weight
        self.epochs = epochs
        self.batch = batch
        self.lr = lr
        self.lr_floor = lr_floor
        self.seed = seed

    @property
    def feature_dim(self) -> int:
        return self.latent_dim

    def fit(self, X, y=None):
        if self.kl_weight < 0:
            raise ConfigError("kl_weight must be non-negative")
        X, shape = _as_flat_images(X)
        c = int(self.latent_dim)
        rng = np.random.default_rng(self.seed)
        self.encoder_ = mlp_init([X.shape[1], *self.hidden, 2 * c], "relu", self.seed)
        self.decoder_ = mlp_init([c, *self.decoder_hidden, X.shape[1]], "relu", self.seed + 1)
        params = self.encoder_.params() + self.decoder_.params()
        opt = AdamWState(lr=self.lr)
        self.loss_curve_ = []
        good = _snapshot(params)
        for epoch in range(self.epochs):
            opt.lr = cosine_lr(self.lr, self.lr_floor, epoch, self.epochs)
            total, count = 0.0, 0
            for idx in _batches(X.shape[0], self.batch, rng):
                noise = rng.standard_normal((idx.size, c)) if self.kl_weight > 0 else None
                loss, grads = baseline_batch_loss(self.encoder_, self.decoder_, X[idx], noise,
                                                  self.kl_weight)
                if not np.isfinite(loss):
                    _restore(params, good)
                    raise NumericError(f"baseline loss became non-finite in epoch {epoch}")
                adamw_step(params, grads, opt)
                total += loss * idx.size
                count += idx.size
            self.loss_curve_.append(total / count)
            good = _snapshot(params)
        self.image_shape_ = shape
        self.n_features_in_ = X.shape[1]
        self.stats_ = ChannelStats.of(self.transform(X))
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X, _ = _as_flat_images(X)
        return self.encoder_(X)[:, :self.latent_dim]

    def inverse_transform(self, F):
        check_is_fitted(self, "decoder_")
        F = np.atleast_2d(np.asarray(F, dtype=np.float64))
        if F.shape[1] != self.latent_dim:
            raise ShapeError(f"latent width {F.shape[1]} != {self.latent_dim}")
        out = np.clip(self.decoder_(F), 0.0, 1.0)
        return out.reshape((F.shape[0],) + tuple(self.image_shape_)) if self.image_shape_ else out

    def checksum(self) -> str:
        return checksum(self.encoder_.params() + self.decoder_.params())


def train_baseline_vae(dataset, config: dict | None = None, seed: int = 0) -> BaselineCodec:
    return BaselineCodec(seed=seed, **(config or {})).fit(dataset.images)


__all__ = ["ChannelStats", "normalize", "denormalize", "alignment_penalty", "SemanticEncoder",
           "pretrain_semantic", "SvgCodec", "svg_encode", "decode", "train_codec_stage1",
           "BaselineCodec", "train_baseline_vae", "softmax_xent", "semantic_batch_loss",
           "codec_batch_loss", "baseline_batch_loss"]
