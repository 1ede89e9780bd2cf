"""Command-line pipeline: ``svglab <command> [--config file.yaml] [--set key=value] [--seed N] --out DIR``.

Every run writes ``config.json`` (the resolved configuration) and ``metrics.json``
into its output directory. Metrics never contain paths or timestamps, so a rerun
with the same configuration reproduces them byte for byte.
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import yaml

from . import datagen, fileio, metrics, oracle, persist, sampler
from .errors import ConfigError, ContractError, FormatError, NumericError, SvgLabError
from .flowmodel import TrainConfig, train_flow, velocity_init
from .latentspace import BaselineCodec, SemanticEncoder, SvgCodec, normalize
from .netcore import checksum

log = logging.getLogger("svglab")

EXIT_CODES = {"config": 2, "io": 3, "numeric": 4, "contract": 5}

DEFAULTS = {
    "gen-data": {"n": 3000, "held_out": 600, "K": 4, "size": 16,
                 "scale_range": [0.22, 0.34], "position_jitter": 0.18},
    "train-semantic": {"data": None, "test_data": None, "width": 32, "hidden": [256], "epochs": 30,
                       "batch": 64, "lr": 1e-3, "weight_decay": 1e-4, "color_invariant": True,
                       "min_accuracy": 0.8},
    "train-codec": {"data": None, "test_data": None, "semantic": None, "residual_dim": 8,
                    "residual_hidden": [256], "decoder_hidden": [512, 512], "align_weight": 0.1,
                    "epochs": 40, "batch": 64, "lr": 3e-3, "lr_floor": 0.05},
    "train-baseline": {"data": None, "test_data": None, "latent_dim": 40, "hidden": [256],
                       "decoder_hidden": [512, 512], "kl_weight": 1e-4, "epochs": 40, "batch": 64,
                       "lr": 3e-3, "lr_floor": 0.05},
    "train-flow": {"data": None, "codec": None, "semantic": None, "hidden": [256, 256], "time_dim": 32,
                   "class_dim": 16, "attention": False, "heads": 4, "n_tokens": 4, "qk_norm": True,
                   "train": {"batch": 256, "lr": 1e-4, "weight_decay": 0.0, "iterations": 3000,
                             "label_drop_prob": 0.1, "log_every": 50, "lr_floor": 1.0}},
    "sample": {"codec": None, "flow": None, "per_class": 8,
               "sampler": {"steps": 25, "guidance_w": 1.55, "zero_init": True, "shift_s": 1.0}},
    "edit": {"codec": None, "flow": None, "data": None, "index": 0, "new_class": None,
             "mask": {"top": 0, "left": 0, "height": 16, "width": 8},
             "editor": {"t_edit": 0.7, "steps": 100, "guidance_w": 4.0, "shift_s": 0.4,
                        "blur_sigma": 1.0, "hold": 0.7, "paste_back": True}},
    "interpolate": {"codec": None, "flow": None, "class_id": 0, "mode": "slerp", "frames": 11,
                    "sampler": {"steps": 25, "guidance_w": 1.55, "zero_init": True, "shift_s": 1.0}},
    "analyze": {"data": None, "semantic": None, "codec": None, "baseline": None, "flow": None,
                "pca_k": 2, "probe_epochs": 200, "coherence_t": 0.5},
    "oracle": {"presets": ["dispersed", "entangled"], "half_separation": 2.0, "var": 0.09,
               "grid": 21, "extent": 3.5, "t": 0.5, "mc_points": 20, "mc_n": 200000,
               "gap_n": 10000, "steps_low": 5, "steps_high": 100, "floor_resamples": 20},
}


# ------------------------------------------------------------------ configuration

def _parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {text!r}: {exc}") from exc


def _merge(base: dict, update: dict, where: str = "") -> dict:
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} expects a mapping")
            _merge(base[key], value, path + ".")
        else:
            base[key] = _coerce(base[key], value, path)
    return base


def _coerce(default, value, path: str):
    # YAML 1.1 reads "3e-3" as a string; numeric keys take it as a number
    if isinstance(default, bool) or default is None:
        return value
    if isinstance(default, (int, float)) and isinstance(value, str):
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"config key {path!r} expects a number, got {value!r}") from None
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def resolve_config(command: str, config_file=None, overrides=(), seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS[command])
    cfg["seed"] = 0
    if config_file:
        try:
            loaded = yaml.safe_load(Path(config_file).read_text()) or {}
        except OSError as exc:
            raise FormatError(f"cannot read config {config_file}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {config_file}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        _merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, text = item.split("=", 1)
        nested = _parse_value(text)
        for part in reversed(dotted.split(".")):
            nested = {part: nested}
        _merge(cfg, nested)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def _require(cfg: dict, key: str, stage: str) -> Path:
    value = cfg.get(key)
    if not value:
        raise ConfigError(f"config key {key!r} is required (output of {stage})")
    path = Path(value)
    if not path.exists():
        raise ContractError(f"missing prerequisite {path}: run {stage} first")
    return path


def _load_codec(cfg: dict):
    path = _require(cfg, "codec", "train-codec or train-baseline")
    return persist.load_any_codec(path)


def _load_flow_for(cfg: dict, codec):
    path = _require(cfg, "flow", "train-flow")
    net, meta = persist.load_flow(path)
    if meta.get("codec_checksum") != persist.codec_checksum(codec):
        raise ContractError("flow was trained against a different codec checkpoint; rerun train-flow")
    if meta.get("semantic_checksum") != persist.semantic_checksum_of(codec):
        raise ContractError("frozen encoder checksum differs from the one the flow was trained on")
    return net, meta


def _sampler_config(block: dict, seed: int) -> sampler.SamplerConfig:
    return sampler.SamplerConfig(steps=int(block["steps"]), guidance_w=float(block["guidance_w"]),
                                 zero_init=bool(block["zero_init"]), shift_s=float(block["shift_s"]),
                                 seed=seed)


def _dataset(cfg: dict, key: str = "data", stage: str = "gen-data"):
    return datagen.read_dataset(_require(cfg, key, stage))


def _psnr_report(codec, ds) -> dict:
    rec = codec.inverse_transform(codec.transform(ds.images))
    return {"psnr": metrics.mean_psnr(rec, ds.images),
            "ssim": float(np.mean([metrics.ssim(a, b) for a, b in zip(rec[:64], ds.images[:64])]))}


# ------------------------------------------------------------------ commands

def cmd_gen_data(cfg: dict, out: Path) -> dict:
    seed = cfg["seed"]
    kw = dict(K=cfg["K"], size=cfg["size"], scale_range=tuple(cfg["scale_range"]),
              position_jitter=cfg["position_jitter"])
    train = datagen.gen_shapes(int(cfg["n"]), seed=seed, **kw)
    datagen.write_dataset(out / "train.svgd", train)
    result = {"n_train": len(train), "class_counts": np.bincount(train.labels).tolist()}
    if int(cfg["held_out"]) > 0:
        test = datagen.gen_shapes(int(cfg["held_out"]), seed=seed + 1_000_003, **kw)
        datagen.write_dataset(out / "test.svgd", test)
        result["n_test"] = len(test)
    fileio.write_ppm(out / "preview.ppm", fileio.tile_images(train.images[:32], 8))
    return result


def cmd_train_semantic(cfg: dict, out: Path) -> dict:
    ds = _dataset(cfg)
    sem = SemanticEncoder(width=cfg["width"], hidden=tuple(cfg["hidden"]), epochs=cfg["epochs"],
                          batch=cfg["batch"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                          color_invariant=cfg["color_invariant"], min_accuracy=cfg["min_accuracy"],
                          seed=cfg["seed"])
    sem.fit(ds.images, ds.labels)
    persist.save_semantic(out / "semantic.svgc", sem)
    result = {"head_accuracy": sem.training_meta_["head_accuracy"], "checksum": sem.checksum_,
              "dispersion_train": metrics.dispersion_score(sem.transform(ds.images), ds.labels)}
    if cfg.get("test_data"):
        test = _dataset(cfg, "test_data")
        result["probe_heldout"] = metrics.linear_probe(sem.transform(test.images), test.labels, cfg["seed"])
    return result


def cmd_train_codec(cfg: dict, out: Path) -> dict:
    ds = _dataset(cfg)
    sem = persist.load_semantic(_require(cfg, "semantic", "train-semantic"))
    before = sem.current_checksum()
    codec = SvgCodec(semantic=sem, residual_dim=cfg["residual_dim"],
                     residual_hidden=tuple(cfg["residual_hidden"]),
                     decoder_hidden=tuple(cfg["decoder_hidden"]), align_weight=cfg["align_weight"],
                     epochs=cfg["epochs"], batch=cfg["batch"], lr=cfg["lr"], lr_floor=cfg["lr_floor"],
                     seed=cfg["seed"]).fit(ds.images)
    if sem.current_checksum() != before:
        raise ContractError("semantic encoder changed during stage 1")
    persist.save_codec(out / "codec.svgc", codec)
    fileio.write_csv(out / "loss.csv", ["epoch", "loss"], enumerate(codec.loss_curve_))
    result = {"final_loss": codec.loss_curve_[-1], "semantic_checksum": before,
              "feature_dim": codec.feature_dim}
    if cfg.get("test_data"):
        result["heldout"] = _psnr_report(codec, _dataset(cfg, "test_data"))
    return result


def cmd_train_baseline(cfg: dict, out: Path) -> dict:
    ds = _dataset(cfg)
    codec = BaselineCodec(latent_dim=cfg["latent_dim"], hidden=tuple(cfg["hidden"]),
                          decoder_hidden=tuple(cfg["decoder_hidden"]), kl_weight=cfg["kl_weight"],
                          epochs=cfg["epochs"], batch=cfg["batch"], lr=cfg["lr"],
                          lr_floor=cfg["lr_floor"], seed=cfg["seed"]).fit(ds.images)
    persist.save_baseline(out / "baseline.svgc", codec)
    fileio.write_csv(out / "loss.csv", ["epoch", "loss"], enumerate(codec.loss_curve_))
    result = {"final_loss": codec.loss_curve_[-1], "feature_dim": codec.feature_dim}
    if cfg.get("test_data"):
        result["heldout"] = _psnr_report(codec, _dataset(cfg, "test_data"))
    return result


def cmd_train_flow(cfg: dict, out: Path) -> dict:
    ds = _dataset(cfg)
    kind, codec = _load_codec(cfg)
    if cfg.get("semantic"):
        sem = persist.load_semantic(_require(cfg, "semantic", "train-semantic"))
        if sem.checksum_ != persist.semantic_checksum_of(codec):
            raise ContractError("codec was trained against a different frozen encoder; rerun train-codec")
    before = persist.codec_checksum(codec)
    feats = normalize(codec.transform(ds.images), codec.stats_)
    net = velocity_init(feats.shape[1], ds.n_classes, tuple(cfg["hidden"]), cfg["time_dim"],
                        cfg["class_dim"], attention=cfg["attention"], heads=cfg["heads"],
                        n_tokens=cfg["n_tokens"], qk_norm=cfg["qk_norm"], seed=cfg["seed"])
    tc = TrainConfig(seed=cfg["seed"], **cfg["train"])
    try:
        net, curve = train_flow(net, feats, ds.labels, tc)
    except NumericError as exc:
        persist.save_flow(out / "flow.last_good.svgc", exc.net)
        raise
    if persist.codec_checksum(codec) != before:
        raise ContractError("codec parameters changed during stage 2")
    meta = {"codec_kind": kind, "codec_checksum": before,
            "semantic_checksum": persist.semantic_checksum_of(codec),
            "train": {**asdict(tc), "t_sampling": "uniform", "loss_weighting": "unit"}}
    persist.save_flow(out / "flow.svgc", net, meta)
    fileio.write_csv(out / "loss.csv", ["interval", "loss"], enumerate(curve))
    return {"final_loss": curve[-1], "initial_loss": curve[0], "intervals": len(curve), **meta}


def _generate(net, codec, n_per_class: int, config: sampler.SamplerConfig):
    rng = np.random.default_rng(config.seed)
    imgs, nfe = [], 0
    for c in range(net.n_classes):
        noise = rng.standard_normal((n_per_class, net.feature_dim))
        feats, traj = sampler.euler_sample(net, config, noise, c)
        imgs.append(sampler.decode_normalized(codec, feats))
        nfe = traj.nfe
    return np.concatenate(imgs), nfe


def cmd_sample(cfg: dict, out: Path) -> dict:
    _, codec = _load_codec(cfg)
    net, _ = _load_flow_for(cfg, codec)
    sc = _sampler_config(cfg["sampler"], cfg["seed"])
    imgs, nfe = _generate(net, codec, int(cfg["per_class"]), sc)
    fileio.write_ppm(out / "samples.ppm", fileio.tile_images(imgs, int(cfg["per_class"])))
    return {"nfe": nfe, "n_images": len(imgs), "sampler": asdict(sc),
            "mean_intensity": float(imgs.mean()), "image_checksum": checksum([imgs])}


def cmd_edit(cfg: dict, out: Path) -> dict:
    _, codec = _load_codec(cfg)
    net, _ = _load_flow_for(cfg, codec)
    ds = _dataset(cfg)
    idx = int(cfg["index"])
    if not 0 <= idx < len(ds):
        raise ConfigError(f"index {idx} outside dataset of {len(ds)}")
    image, orig = ds.images[idx], int(ds.labels[idx])
    new = orig if cfg["new_class"] is None else int(cfg["new_class"])
    m = cfg["mask"]
    raw = sampler.box_mask(image.shape[:2], m["top"], m["left"], m["height"], m["width"])
    e = cfg["editor"]
    mask = sampler.soften_mask(raw, e["blur_sigma"], e["hold"])
    ec = sampler.EditConfig(t_edit=e["t_edit"], steps=e["steps"], guidance_w=e["guidance_w"],
                            shift_s=e["shift_s"], blur_sigma=e["blur_sigma"], hold=e["hold"],
                            paste_back=e["paste_back"], seed=cfg["seed"])
    edited, info = sampler.masked_edit(net, codec, image, mask, orig, new, ec, return_info=True)
    rec = codec.inverse_transform(codec.transform(image[None]))[0]
    keep = mask.softened < 1e-3
    mask_img = np.repeat(raw[..., None], image.shape[2], axis=2)
    fileio.write_ppm(out / "triptych.ppm", fileio.tile_images(np.stack([image, mask_img, edited]), 3))
    return {"orig_class": orig, "new_class": new, "nfe": info["nfe"], "mask_area": info["mask_area"],
            "preserved_rel_l2": sampler.relative_l2(edited, rec, keep) if keep.any() else 0.0,
            "preserved_rel_l2_decoded": sampler.relative_l2(info["decoded"], rec, keep) if keep.any() else 0.0,
            "edited_rel_change": sampler.relative_l2(edited, rec, raw > 0) if raw.any() else 0.0}


def cmd_interpolate(cfg: dict, out: Path) -> dict:
    _, codec = _load_codec(cfg)
    net, _ = _load_flow_for(cfg, codec)
    rng = np.random.default_rng(cfg["seed"])
    x0, x1 = rng.standard_normal((2, net.feature_dim))
    grid = np.linspace(0.0, 1.0, int(cfg["frames"]))
    sc = _sampler_config(cfg["sampler"], cfg["seed"])
    frames = sampler.interpolation_sweep(net, codec, x0, x1, int(cfg["class_id"]), cfg["mode"], grid, sc)
    fileio.write_ppm(out / "frames.ppm", fileio.tile_images(frames, len(frames)))
    cont = sampler.continuity(frames)
    return {"mode": cfg["mode"], "frames": len(frames), "continuity": cont,
            "noise_norms": [float(np.linalg.norm(sampler.interpolate_slerp(x0, x1, lam)
                                                 if cfg["mode"] == "slerp" else
                                                 sampler.interpolate_linear(x0, x1, lam)))
                            for lam in grid]}


def cmd_analyze(cfg: dict, out: Path) -> dict:
    ds = _dataset(cfg)
    seed = cfg["seed"]
    spaces = {"pixels": ds.flat()}
    if cfg.get("semantic"):
        spaces["semantic"] = persist.load_semantic(_require(cfg, "semantic", "train-semantic")).transform(ds.images)
    codec = None
    if cfg.get("codec"):
        _, codec = _load_codec(cfg)
        spaces["codec"] = codec.transform(ds.images)
    if cfg.get("baseline"):
        spaces["baseline"] = persist.load_baseline(_require(cfg, "baseline", "train-baseline")).transform(ds.images)
    result = {}
    for name, feats in spaces.items():
        proj, var = metrics.pca_project(feats, int(cfg["pca_k"]))
        result[name] = {"dispersion": metrics.dispersion_score(feats, ds.labels),
                        "probe": metrics.linear_probe(feats, ds.labels, seed, int(cfg["probe_epochs"])),
                        "pca_explained_variance": var.tolist()}
        fileio.write_csv(out / f"pca_{name}.csv", ["label"] + [f"pc{i}" for i in range(proj.shape[1])],
                         ([int(y)] + row.tolist() for y, row in zip(ds.labels, proj)))
    if cfg.get("flow") and codec is not None:
        net, _ = _load_flow_for(cfg, codec)
        z = normalize(codec.transform(ds.images), codec.stats_)
        t = float(cfg["coherence_t"])
        rng = np.random.default_rng(seed)
        xt = (1.0 - t) * z + t * rng.standard_normal(z.shape)
        v = net(xt, t, ds.labels)
        coh = metrics.velocity_coherence(xt, ds.labels, v)
        result["flow_coherence"] = {"coherence": coh["coherence"], "divergence": coh["divergence"]}
    return result


def cmd_oracle(cfg: dict, out: Path) -> dict:
    seed = cfg["seed"]
    t = float(cfg["t"])
    g = np.linspace(-cfg["extent"], cfg["extent"], int(cfg["grid"]))
    pts = np.stack(np.meshgrid(g, g, indexing="xy"), -1).reshape(-1, 2)
    report = {}
    for preset in cfg["presets"]:
        spec = datagen.make_mixture(preset, 2, None, cfg["half_separation"], cfg["var"])
        rows = []
        samples_x, samples_c, samples_v = [], [], []
        for c in spec.classes:
            v = oracle.class_velocity(spec, pts, t, int(c))
            rows += [[float(p[0]), float(p[1]), int(c), float(a), float(b)] for p, (a, b) in zip(pts, v)]
            samples_x.append(pts)
            samples_c.append(np.full(len(pts), int(c)))
            samples_v.append(v)
        vm = oracle.oracle_velocity(spec, pts, t)
        rows += [[float(p[0]), float(p[1]), -1, float(a), float(b)] for p, (a, b) in zip(pts, vm)]
        fileio.write_csv(out / f"field_{preset}.csv", ["x", "y", "class", "vx", "vy"], rows)
        coh = metrics.velocity_coherence(np.concatenate(samples_x), np.concatenate(samples_c),
                                         np.concatenate(samples_v))
        rng = np.random.default_rng(seed)
        errs = []
        for i in range(int(cfg["mc_points"])):
            tt = float(rng.uniform(0.05, 0.95))
            x0 = datagen.sample_mixture(spec, 1, rng).points[0]
            x = (1.0 - tt) * x0 + tt * rng.standard_normal(2)
            errs.append((oracle.oracle_velocity(spec, x, tt),
                         oracle.mc_velocity(spec, x, tt, int(cfg["mc_n"]), seed + i)))
        exact = np.array([e[0] for e in errs])
        mc = np.array([e[1] for e in errs])
        gap = oracle_gap(spec, int(cfg["gap_n"]), int(cfg["steps_low"]), int(cfg["steps_high"]), seed)
        report[preset] = {"coherence": coh["coherence"], "divergence": coh["divergence"],
                          "mc_relative_l2": float(np.linalg.norm(exact - mc) / np.linalg.norm(exact)),
                          "few_step": gap}
    if {"dispersed", "entangled"} <= set(report):
        d, e = report["dispersed"]["few_step"]["gap"], report["entangled"]["few_step"]["gap"]
        report["gap_ratio"] = e / d if d > 0 else float("inf")
    return report


def oracle_gap(spec, n: int, steps_low: int, steps_high: int, seed: int = 0, n_proj: int = 64) -> dict:
    """Class-conditional few-step gap on an exact mixture field, class-balanced labels."""
    labels = np.arange(n) % spec.classes.size

    def generate(m, steps, s):
        noise = np.random.default_rng(s).standard_normal((m, spec.dim))
        return oracle.conditional_oracle_sample(spec, noise, spec.classes[labels[:m]], steps)

    def target(m, s):
        return datagen.sample_mixture(spec, m, s, stratify=True).points

    return metrics.few_step_gap(generate, target, steps_low, steps_high, n, seed, n_proj)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-semantic": cmd_train_semantic,
    "train-codec": cmd_train_codec,
    "train-baseline": cmd_train_baseline,
    "train-flow": cmd_train_flow,
    "sample": cmd_sample,
    "edit": cmd_edit,
    "interpolate": cmd_interpolate,
    "analyze": cmd_analyze,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svglab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML file with keys for this command")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a (dotted) config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command: str, cfg: dict, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_json(out / "config.json", {"command": command, **cfg})
    result = COMMANDS[command](cfg, out)
    fileio.write_json(out / "metrics.json", {"command": command, "seed": cfg["seed"], **result})
    return result


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.command, args.config, args.overrides, args.seed)
        run(args.command, cfg, args.out)
    except SvgLabError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(exc.category, 1)
    except (FileNotFoundError, PermissionError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
