"""Checkpoint adapters: models <-> named float32 arrays plus a JSON header.

Every architecture is rebuilt from header metadata alone and filled in ``params()``
order, so a checkpoint never needs the config that produced it.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, FormatError
from .fileio import load_checkpoint, save_checkpoint
from .flowmodel import VelocityNet, velocity_init
from .latentspace import BaselineCodec, ChannelStats, SemanticEncoder, SvgCodec
from .netcore import checksum, mlp_init

KIND_SEMANTIC = "semantic-encoder"
KIND_CODEC = "svg-codec"
KIND_BASELINE = "baseline-codec"
KIND_FLOW = "velocity-net"


def _pack(prefix: str, params: list) -> dict:
    return {f"{prefix}.{i:03d}": p for i, p in enumerate(params)}


def _fill(prefix: str, params: list, arrays: dict) -> None:
    for i, p in enumerate(params):
        key = f"{prefix}.{i:03d}"
        if key not in arrays or arrays[key].shape != p.shape:
            raise FormatError(f"checkpoint array {key!r} missing or mis-shaped")
        p[...] = arrays[key]


def _plain(params: dict) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}


def _shape(v):
    return tuple(v) if v is not None else None


# ------------------------------------------------------------------ semantic

def semantic_state(sem: SemanticEncoder, prefix: str = "semantic"):
    meta = {"params": _plain(sem.get_params()), "image_shape": list(sem.image_shape_ or []),
            "n_features_in": sem.n_features_in_, "checksum": sem.checksum_,
            "training_meta": sem.training_meta_}
    return _pack(prefix, sem.backbone_.params()), meta


def semantic_from_state(arrays: dict, meta: dict, prefix: str = "semantic") -> SemanticEncoder:
    sem = SemanticEncoder(**meta["params"])
    sem.image_shape_ = _shape(meta["image_shape"]) or None
    sem.n_features_in_ = int(meta["n_features_in"])
    in_dim = sem.n_features_in_ // (sem.image_shape_[-1] if sem.color_invariant and sem.image_shape_ else 1)
    sem.backbone_ = mlp_init([in_dim, *sem.hidden, sem.width], "relu")
    _fill(prefix, sem.backbone_.params(), arrays)
    sem.training_meta_ = meta.get("training_meta", {})
    sem.frozen_ = True
    sem.checksum_ = meta["checksum"]
    if sem.current_checksum() != sem.checksum_:
        raise ContractError("semantic checkpoint does not match its recorded checksum")
    return sem


def save_semantic(path, sem: SemanticEncoder) -> None:
    if not sem.frozen:
        raise ContractError("only a frozen semantic encoder can be saved")
    arrays, meta = semantic_state(sem)
    save_checkpoint(path, KIND_SEMANTIC, arrays, meta)


def load_semantic(path) -> SemanticEncoder:
    _, arrays, meta = load_checkpoint(path, KIND_SEMANTIC)
    return semantic_from_state(arrays, meta)


# ------------------------------------------------------------------ codecs

def _stats_arrays(name: str, stats: ChannelStats) -> dict:
    return {f"{name}.mean": stats.mean, f"{name}.std": stats.std}


def _stats_from(name: str, arrays: dict, population: int) -> ChannelStats:
    return ChannelStats(arrays[f"{name}.mean"], arrays[f"{name}.std"], population)


def save_codec(path, codec: SvgCodec, extra_meta: dict | None = None) -> None:
    sem_arrays, sem_meta = semantic_state(codec.semantic)
    params = _plain({k: v for k, v in codec.get_params(deep=False).items() if k != "semantic"})
    arrays = {**sem_arrays, **_pack("decoder", codec.decoder_.params()),
              **_stats_arrays("stats", codec.stats_),
              **_stats_arrays("semantic_stats", codec.semantic_stats_)}
    if codec.residual_dim:
        arrays.update(_pack("residual", codec.residual_.params()))
    meta = {"params": params, "semantic": sem_meta, "image_shape": list(codec.image_shape_),
            "n_features_in": codec.n_features_in_, "population": codec.stats_.population,
            "semantic_checksum": codec.semantic_checksum_, **(extra_meta or {})}
    save_checkpoint(path, KIND_CODEC, arrays, meta)


def load_codec(path) -> SvgCodec:
    _, arrays, meta = load_checkpoint(path, KIND_CODEC)
    sem = semantic_from_state(arrays, meta["semantic"])
    if sem.checksum_ != meta["semantic_checksum"]:
        raise ContractError("codec was trained against a different semantic encoder")
    codec = SvgCodec(semantic=sem, **meta["params"])
    n_in = int(meta["n_features_in"])
    cr = int(codec.residual_dim)
    codec.residual_ = mlp_init([n_in, *codec.residual_hidden, cr], "relu") if cr else None
    codec.decoder_ = mlp_init([sem.width + cr, *codec.decoder_hidden, n_in], "relu")
    _fill("decoder", codec.decoder_.params(), arrays)
    if cr:
        _fill("residual", codec.residual_.params(), arrays)
    codec.image_shape_ = _shape(meta["image_shape"])
    codec.n_features_in_ = n_in
    codec.semantic_checksum_ = sem.checksum_
    codec.stats_ = _stats_from("stats", arrays, int(meta["population"]))
    codec.semantic_stats_ = _stats_from("semantic_stats", arrays, int(meta["population"]))
    codec.loss_curve_ = []
    return codec


def save_baseline(path, codec: BaselineCodec, extra_meta: dict | None = None) -> None:
    arrays = {**_pack("encoder", codec.encoder_.params()), **_pack("decoder", codec.decoder_.params()),
              **_stats_arrays("stats", codec.stats_)}
    meta = {"params": _plain(codec.get_params()), "image_shape": list(codec.image_shape_),
            "n_features_in": codec.n_features_in_, "population": codec.stats_.population,
            **(extra_meta or {})}
    save_checkpoint(path, KIND_BASELINE, arrays, meta)


def load_baseline(path) -> BaselineCodec:
    _, arrays, meta = load_checkpoint(path, KIND_BASELINE)
    codec = BaselineCodec(**meta["params"])
    n_in = int(meta["n_features_in"])
    c = int(codec.latent_dim)
    codec.encoder_ = mlp_init([n_in, *codec.hidden, 2 * c], "relu")
    codec.decoder_ = mlp_init([c, *codec.decoder_hidden, n_in], "relu")
    _fill("encoder", codec.encoder_.params(), arrays)
    _fill("decoder", codec.decoder_.params(), arrays)
    codec.image_shape_ = _shape(meta["image_shape"])
    codec.n_features_in_ = n_in
    codec.stats_ = _stats_from("stats", arrays, int(meta["population"]))
    codec.loss_curve_ = []
    return codec


def load_any_codec(path):
    """Load either codec kind; returns ``(kind, codec)``."""
    kind, _, _ = load_checkpoint(path)
    if kind == KIND_CODEC:
        return kind, load_codec(path)
    if kind == KIND_BASELINE:
        return kind, load_baseline(path)
    raise FormatError(f"{path} holds a {kind!r} checkpoint, not a codec")


def codec_checksum(codec) -> str:
    return codec.checksum()


def semantic_checksum_of(codec) -> str | None:
    return getattr(codec, "semantic_checksum_", None)


# ------------------------------------------------------------------ velocity nets

def save_flow(path, net: VelocityNet, extra_meta: dict | None = None) -> None:
    meta = {"feature_dim": net.feature_dim, "n_classes": net.n_classes, "time_dim": net.time_dim,
            "arch": net.meta, **(extra_meta or {})}
    save_checkpoint(path, KIND_FLOW, _pack("net", net.params()), meta)


def load_flow(path):
    """Returns ``(net, meta)``."""
    _, arrays, meta = load_checkpoint(path, KIND_FLOW)
    arch = dict(meta["arch"])
    net = velocity_init(int(meta["feature_dim"]), int(meta["n_classes"]), arch["hidden"],
                        int(meta["time_dim"]), arch["class_dim"], arch["activation"],
                        arch["attention"], arch["heads"], arch["n_tokens"], arch["qk_norm"],
                        arch.get("seed", 0))
    _fill("net", net.params(), arrays)
    return net, meta


def flow_checksum(net: VelocityNet) -> str:
    return checksum(net.params())


def max_param_gap(a: list, b: list) -> float:
    return float(max(np.max(np.abs(x - y)) for x, y in zip(a, b)))
