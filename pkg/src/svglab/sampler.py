"""Euler ODE sampling, guidance, inversion, masked editing and noise interpolation.

Sampling integrates ``dx/dt = v(x, t)`` from noise at ``t = 1`` to data at ``t = 0``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, NumericError, ShapeError


@dataclass
class SamplerConfig:
    steps: int = 25
    guidance_w: float = 1.55
    zero_init: bool = True
    shift_s: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ConfigError("steps must be >= 1")
        if not self.shift_s > 0:
            raise ConfigError("shift_s must be positive")
        if self.guidance_w < 0:
            raise ConfigError("guidance_w must be non-negative")


@dataclass
class Trajectory:
    times: list
    states: list
    class_id: int | None = None
    config: dict = field(default_factory=dict)
    nfe: int = 0

    @property
    def nodes(self):
        return list(zip(self.times, self.states))

    def __len__(self):
        return len(self.times)


def shift_time(u, shift_s: float):
    """``tau(u) = s u / (1 + (s - 1) u)``; fixes 0 and 1, identity at ``s = 1``."""
    u = np.asarray(u, dtype=np.float64)
    return shift_s * u / (1.0 + (shift_s - 1.0) * u)


def time_grid(steps: int, shift_s: float = 1.0) -> np.ndarray:
    if int(steps) < 1:
        raise ConfigError("steps must be >= 1")
    if not shift_s > 0:
        raise ConfigError("shift_s must be positive")
    u = 1.0 - np.arange(steps + 1) / steps
    ts = shift_time(u, shift_s)
    ts[0], ts[-1] = 1.0, 0.0
    return ts


def cfg_velocity(net, x, t, class_id, w: float):
    """``v_null + w (v_class - v_null)``; ``w = 1`` and ``w = 0`` skip the unused branch."""
    if w == 1.0:
        return net(x, t, class_id)
    v_null = net(x, t, net.null_class)
    if w == 0.0:
        return v_null
    return v_null + w * (net(x, t, class_id) - v_null)


def integrate(field_fn: Callable, x, times, zero_init: bool = False, class_id=None,
              config: dict | None = None) -> tuple:
    """Euler along ``times``; ``zero_init`` freezes the state over the first interval."""
    x = np.array(x, dtype=np.float64)
    traj = Trajectory([float(times[0])], [x.copy()], class_id, dict(config or {}))
    for k in range(len(times) - 1):
        t, t_next = float(times[k]), float(times[k + 1])
        if k == 0 and zero_init:
            v = np.zeros_like(x)
        else:
            v = field_fn(x, t)
            traj.nfe += 1
        x = x + (t_next - t) * v
        if not np.all(np.isfinite(x)):
            err = NumericError(f"non-finite state at t={t_next:.4f}")
            err.trajectory = traj
            raise err
        traj.times.append(t_next)
        traj.states.append(x.copy())
    return x, traj


def euler_sample(net, config: SamplerConfig, noise, class_id) -> tuple:
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if noise.shape[1] != net.feature_dim:
        raise ShapeError(f"noise width {noise.shape[1]} != feature width {net.feature_dim}")
    ts = time_grid(config.steps, config.shift_s)

    def field_fn(x, t):
        return cfg_velocity(net, x, t, class_id, config.guidance_w)

    return integrate(field_fn, noise, ts, config.zero_init, _as_id(class_id), asdict(config))


def field_sample(field_fn: Callable, noise, steps: int, shift_s: float = 1.0,
                 zero_init: bool = False) -> np.ndarray:
    """Euler on an arbitrary ``field_fn(x, t)``, e.g. an analytic or oracle field."""
    return integrate(field_fn, noise, time_grid(steps, shift_s), zero_init)[0]


def _as_id(class_id):
    arr = np.asarray(class_id)
    return int(arr) if arr.ndim == 0 else arr.tolist()


def inversion_times(t_edit: float, steps: int, shift_s: float = 1.0) -> np.ndarray:
    """Ascending nodes of the sampling grid below ``t_edit``, closed by ``t_edit``."""
    if not 0 < t_edit <= 1:
        raise ConfigError("t_edit must lie in (0, 1]")
    grid = time_grid(steps, shift_s)[::-1]
    below = grid[grid < t_edit - 1e-12]
    return np.append(below, t_edit)


def invert(net, x0_feature, class_id, t_edit: float, steps: int, shift_s: float = 1.0,
           guidance_w: float = 1.0) -> Trajectory:
    """Integrate the sampling ODE forward in time from data to ``t_edit``."""
    times = inversion_times(t_edit, steps, shift_s)

    def field_fn(x, t):
        return cfg_velocity(net, x, t, class_id, guidance_w)

    cfg = {"t_edit": t_edit, "steps": steps, "shift_s": shift_s, "guidance_w": guidance_w}
    return integrate(field_fn, np.atleast_2d(x0_feature), times, False, _as_id(class_id), cfg)[1]


def resume(net, x, times_desc, class_id, guidance_w: float = 1.0) -> tuple:
    """Sample from an intermediate state along descending ``times_desc``."""
    def field_fn(z, t):
        return cfg_velocity(net, z, t, class_id, guidance_w)

    return integrate(field_fn, x, times_desc, False, _as_id(class_id))


# ------------------------------------------------------------------ interpolation

def interpolate_linear(x0, x1, lam: float):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError("interpolation endpoints differ in shape")
    if not 0 <= lam <= 1:
        raise ConfigError("lambda must lie in [0, 1]")
    if lam == 0:
        return x0.copy()
    if lam == 1:
        return x1.copy()
    return (1.0 - lam) * x0 + lam * x1


def interpolate_slerp(x0, x1, lam: float, parallel_tol: float = 1e-6):
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError("interpolation endpoints differ in shape")
    if not 0 <= lam <= 1:
        raise ConfigError("lambda must lie in [0, 1]")
    n0, n1 = np.linalg.norm(x0), np.linalg.norm(x1)
    if n0 < 1e-12 or n1 < 1e-12:
        raise ConfigError("slerp endpoints must be non-zero")
    if lam == 0:
        return x0.copy()
    if lam == 1:
        return x1.copy()
    cos = np.clip(np.vdot(x0, x1) / (n0 * n1), -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < parallel_tol:
        return interpolate_linear(x0, x1, lam)
    s = np.sin(theta)
    return (np.sin((1.0 - lam) * theta) / s) * x0 + (np.sin(lam * theta) / s) * x1


def interpolation_sweep(net, codec, x0, x1, class_id: int, mode: str = "slerp",
                        grid=None, config: SamplerConfig | None = None) -> np.ndarray:
    """Decode one sample per interpolation weight; all frames share ``class_id``."""
    config = config or SamplerConfig()
    grid = np.linspace(0.0, 1.0, 11) if grid is None else np.asarray(grid, dtype=np.float64)
    interp = {"linear": interpolate_linear, "slerp": interpolate_slerp}.get(mode)
    if interp is None:
        raise ConfigError(f"unknown interpolation mode {mode!r}")
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1)
    noise = np.stack([interp(x0, x1, float(lam)) for lam in grid])
    feats, _ = euler_sample(net, config, noise, class_id)
    return decode_normalized(codec, feats)


def continuity(frames) -> dict:
    """Adjacent-frame pixel L2 distances and the max / mean jump ratio."""
    f = np.asarray(frames, dtype=np.float64).reshape(len(frames), -1)
    d = np.linalg.norm(np.diff(f, axis=0), axis=1)
    mean = float(d.mean()) if d.size else 0.0
    return {"adjacent": d.tolist(), "max": float(d.max()) if d.size else 0.0, "mean": mean,
            "ratio": float(d.max() / mean) if mean > 0 else 0.0}


# ------------------------------------------------------------------ editing

@dataclass
class EditMask:
    raw: np.ndarray
    softened: np.ndarray
    hold: float = 0.7

    def fade(self, k: int, n_steps: int) -> float:
        """1 through the first ``hold`` share of steps, then linear to 0 at the last."""
        if n_steps <= 1:
            return 0.0
        last = n_steps - 1
        release = (1.0 - self.hold) * last
        if release <= 0:
            return 1.0 if k < last else 0.0
        return float(np.clip((last - k) / release, 0.0, 1.0))


def soften_mask(raw, blur_sigma: float = 1.0, hold: float = 0.7) -> EditMask:
    """Separable Gaussian blur with a unit-sum kernel and edge-replicating padding,
    so an all-ones (all-zeros) mask stays all ones (zeros)."""
    if blur_sigma < 0:
        raise ConfigError("blur_sigma must be non-negative")
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ShapeError("mask must be (H, W)")
    if not np.all((raw == 0) | (raw == 1)):
        raise ConfigError("raw mask must be binary")
    soft = raw.copy() if blur_sigma == 0 else gaussian_filter(raw, blur_sigma, mode="nearest")
    return EditMask(raw, np.clip(soft, 0.0, 1.0), hold)


def box_mask(shape, top: int, left: int, height: int, width: int) -> np.ndarray:
    m = np.zeros(shape)
    m[top:top + height, left:left + width] = 1.0
    return m


@dataclass
class EditConfig:
    t_edit: float = 0.7
    steps: int = 100
    guidance_w: float = 4.0
    shift_s: float = 0.4
    blur_sigma: float = 1.0
    hold: float = 0.7
    paste_back: bool = True
    seed: int = 0


def encode_normalized(codec, images) -> np.ndarray:
    from .latentspace import normalize

    return normalize(codec.transform(images), codec.stats_)


def decode_normalized(codec, feats) -> np.ndarray:
    from .latentspace import denormalize

    return codec.inverse_transform(denormalize(np.atleast_2d(feats), codec.stats_))


def masked_edit(net, codec, image, mask: EditMask, orig_class: int, new_class: int,
                config: EditConfig | None = None, return_info: bool = False):
    """Inversion-guided masked regeneration, projected through pixel space.

    Features carry no spatial layout, so masking acts on decoded clean estimates:
    at each node the clean estimate ``c = x - t v`` is decoded, blended with the
    decoded inversion reference under the faded preserve weight, re-encoded and put
    back in place of ``c``; the noise component of the state is kept. With
    ``paste_back`` the decoded result is finally composited with the reconstruction
    through the softened mask.
    """
    config = config or EditConfig()
    image = np.asarray(image, dtype=np.float64)
    if mask.raw.shape != image.shape[:2]:
        raise ShapeError(f"mask {mask.raw.shape} does not match image {image.shape[:2]}")
    z0 = encode_normalized(codec, image[None])
    inv = invert(net, z0, orig_class, config.t_edit, config.steps, config.shift_s)
    times = np.array(inv.times)
    # clean estimates along the inversion, in feature and pixel space
    ref_feat, ref_img = [], []
    for t, z in zip(inv.times, inv.states):
        c_ref = z if t == 0 else z - t * net(z, t, orig_class)
        ref_feat.append(c_ref)
        ref_img.append(decode_normalized(codec, c_ref)[0])

    T = float(times[-1])
    zT = inv.states[-1]
    area = float(mask.softened.mean())
    rng = np.random.default_rng(config.seed)
    eps = rng.standard_normal(zT.shape)
    if area == 0:
        x = zT.copy()
    else:
        c_T = ref_feat[-1]
        n_inv = (zT - (1.0 - T) * c_T) / T
        n_new = np.sqrt(1.0 - area) * n_inv + np.sqrt(area) * eps
        x = (1.0 - T) * c_T + T * n_new

    keep = 1.0 - mask.softened  # preserve weight before fading
    desc = times[::-1]
    n_steps = len(desc) - 1
    nfe = 0
    for k in range(n_steps):
        t, t_next = float(desc[k]), float(desc[k + 1])
        v = cfg_velocity(net, x, t, new_class, config.guidance_w)
        nfe += 1
        w_pres = mask.fade(k, n_steps) * keep
        if w_pres.max() > 0:
            j = n_steps - k
            c_hat = x - t * v
            noise_hat = v + c_hat
            cur = decode_normalized(codec, c_hat)[0]
            blended = w_pres[..., None] * ref_img[j] + (1.0 - w_pres[..., None]) * cur
            # E(D(c)) != c off the data manifold; carry each side's round-trip residual
            wbar = float(w_pres.mean())
            resid = (wbar * (ref_feat[j] - encode_normalized(codec, ref_img[j][None]))
                     + (1.0 - wbar) * (c_hat - encode_normalized(codec, cur[None])))
            c_new = encode_normalized(codec, blended[None]) + resid
            x = (1.0 - t) * c_new + t * noise_hat
            v = noise_hat - c_new
        x = x + (t_next - t) * v
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite edit state at t={t_next:.4f}")
    out = decode_normalized(codec, x)[0]
    raw_out = out
    if config.paste_back:
        # the decoder is global, so preserved pixels are finally taken from the t=0 node
        soft = mask.softened[..., None]
        out = soft * out + (1.0 - soft) * ref_img[0]
    if return_info:
        return out, {"inversion": inv, "nfe": nfe, "mask_area": area, "final_feature": x,
                     "decoded": raw_out}
    return out


def relative_l2(a, b, region=None) -> float:
    """``||a - b|| / ||b||``, optionally restricted to a boolean (H, W) region."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if region is not None:
        sel = np.asarray(region, dtype=bool)
        a, b = a[sel], b[sel]
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
