import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svglab.datagen import make_mixture
from svglab.errors import ConfigError, NumericError, ShapeError
from svglab.flowmodel import velocity_init
from svglab.oracle import oracle_velocity
from svglab.sampler import (EditConfig, SamplerConfig, box_mask, cfg_velocity, continuity, decode_normalized,
                            encode_normalized, euler_sample, field_sample, integrate, interpolate_linear,
                            interpolate_slerp, interpolation_sweep, invert, inversion_times, masked_edit,
                            relative_l2, resume, shift_time, soften_mask, time_grid)


def test_time_grid_uniform():
    np.testing.assert_array_equal(time_grid(4), [1.0, 0.75, 0.5, 0.25, 0.0])
    with pytest.raises(ConfigError):
        time_grid(0)
    with pytest.raises(ConfigError):
        time_grid(3, 0.0)


def test_shift_value():
    assert float(shift_time(0.5, 0.4)) == pytest.approx(0.2 / 0.7, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.floats(0.01, 50.0))
def test_time_grid_endpoints_and_monotone(steps, s):
    ts = time_grid(steps, s)
    assert ts[0] == 1.0 and ts[-1] == 0.0
    assert np.all(np.diff(ts) < 0)


@pytest.fixture(scope="module")
def small_net():
    return velocity_init(3, 3, hidden=(16,), seed=2)


def test_cfg_special_cases(small_net):
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(cfg_velocity(small_net, x, 0.4, 1, 1.0), small_net(x, 0.4, 1))
    np.testing.assert_array_equal(cfg_velocity(small_net, x, 0.4, 1, 0.0), small_net(x, 0.4, 3))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 8.0), st.floats(0.0, 8.0), st.floats(0.01, 0.99))
def test_cfg_affine_in_w(w1, w2, t):
    net = velocity_init(3, 3, hidden=(16,), seed=2)
    x = np.random.default_rng(1).standard_normal((4, 3))
    v = {w: cfg_velocity(net, x, t, 2, w) for w in (w1, w2, 0.0, 1.0)}
    d = v[1.0] - v[0.0]
    scale = 1.0 + np.abs(v[0.0]).max() + 8 * np.abs(d).max()
    np.testing.assert_allclose(v[w2] - v[w1], (w2 - w1) * d, atol=1e-13 * scale)


def test_constant_field_exact():
    c = np.array([0.3, -1.2])
    noise = np.random.default_rng(0).standard_normal((5, 2))
    for steps, s in ((1, 1.0), (7, 1.0), (13, 0.4)):
        out = field_sample(lambda x, t: np.broadcast_to(c, x.shape), noise, steps, s)
        np.testing.assert_allclose(out, noise - c, atol=1e-14)


def test_zero_init_single_step_is_identity(small_net):
    noise = np.random.default_rng(0).standard_normal((6, 3))
    out, traj = euler_sample(small_net, SamplerConfig(steps=1, zero_init=True), noise, 0)
    np.testing.assert_array_equal(out, noise)
    assert traj.nfe == 0 and len(traj) == 2


def test_sampler_config_defaults():
    cfg = SamplerConfig()
    assert (cfg.steps, cfg.guidance_w) == (25, 1.55)
    with pytest.raises(ConfigError):
        SamplerConfig(steps=0)
    with pytest.raises(ConfigError):
        SamplerConfig(guidance_w=-1.0)


def test_nonfinite_state_returns_partial_trajectory():
    def blowup(x, t):
        return np.full_like(x, np.inf) if t < 0.5 else np.ones_like(x)

    with pytest.raises(NumericError) as info:
        integrate(blowup, np.zeros((1, 2)), time_grid(4))
    # the last finite state is at t=0.25
    assert info.value.trajectory.times[-1] == 0.25


def test_euler_first_order_on_oracle():
    spec = make_mixture("entangled")
    noise = np.random.default_rng(0).standard_normal((64, 2))
    delta = 1e-3
    ts_of = lambda n: np.linspace(1 - delta, delta, n + 1)  # noqa: E731

    def run(n):
        return integrate(lambda x, t: oracle_velocity(spec, x, t), noise, ts_of(n))[0]

    ref = run(512)
    errs = {n: np.linalg.norm(run(n) - ref, axis=1) for n in (8, 16, 32, 64)}
    ratios = [np.mean(errs[n]) / np.mean(errs[2 * n]) for n in (8, 16, 32)]
    assert 1.5 <= np.mean(ratios) <= 2.5


def test_inversion_grid_and_validation(small_net):
    for steps, t_edit in ((10, 0.7), (10, 0.65), (25, 1.0), (100, 0.33)):
        times = inversion_times(t_edit, steps)
        assert len(times) == math.ceil(steps * t_edit - 1e-9) + 1
        assert times[0] == 0.0 and times[-1] == t_edit
    with pytest.raises(ConfigError):
        inversion_times(0.0, 10)
    with pytest.raises(ConfigError):
        invert(small_net, np.zeros(3), 0, 0.0, 10)


def test_inversion_reversible(small_net):
    x0 = np.random.default_rng(3).standard_normal((4, 3))
    errs = []
    for steps in (25, 100, 400):
        traj = invert(small_net, x0, 1, 0.8, steps)
        back, _ = resume(small_net, traj.states[-1], traj.times[::-1], 1)
        errs.append(np.abs(back - x0).max())
    # first order: quadrupling the steps cuts the round-trip error roughly fourfold
    assert errs[0] / errs[1] > 2.5 and errs[1] / errs[2] > 2.5


def test_linear_interpolation():
    a, b = np.array([2.0, 0.0]), np.array([0.0, 2.0])
    np.testing.assert_array_equal(interpolate_linear(a, b, 0.0), a)
    np.testing.assert_array_equal(interpolate_linear(a, b, 1.0), b)
    np.testing.assert_array_equal(interpolate_linear(a, b, 0.5), [1.0, 1.0])
    assert np.linalg.norm(interpolate_linear(a, b, 0.5)) <= 2.0
    with pytest.raises(ShapeError):
        interpolate_linear(a, np.zeros(3), 0.5)
    with pytest.raises(ConfigError):
        interpolate_linear(a, b, 1.5)


def test_slerp_cases():
    e0, e1 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    mid = interpolate_slerp(e0, e1, 0.5)
    np.testing.assert_allclose(mid, (e0 + e1) * np.sqrt(2) / 2, atol=1e-15)
    assert np.linalg.norm(mid) == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(interpolate_slerp(e0, e1, 0.0), e0)
    np.testing.assert_array_equal(interpolate_slerp(e0, e1, 1.0), e1)
    with pytest.raises(ConfigError):
        interpolate_slerp(np.zeros(2), e1, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 64))
def test_slerp_preserves_norm(seed, d):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal(d), rng.standard_normal(d)
    b *= np.linalg.norm(a) / np.linalg.norm(b)
    r = np.linalg.norm(a)
    for lam in np.linspace(0, 1, 11):
        assert abs(np.linalg.norm(interpolate_slerp(a, b, lam)) - r) <= 1e-9 * r


def test_linear_shrinks_gaussian_norm():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 1000, 8))
    mid = np.linalg.norm(0.5 * (a + b), axis=1).mean()
    ends = 0.5 * (np.linalg.norm(a, axis=1).mean() + np.linalg.norm(b, axis=1).mean())
    assert mid < ends


def test_soften_mask():
    raw = box_mask((16, 16), 4, 4, 8, 8)
    assert raw.sum() == 64
    np.testing.assert_array_equal(soften_mask(raw, 0.0).softened, raw)
    m = soften_mask(raw, 1.0)
    assert m.softened.min() >= 0 and m.softened.max() <= 1
    assert abs(m.softened.sum() - raw.sum()) <= 0.01 * raw.sum()
    np.testing.assert_array_equal(soften_mask(np.ones((6, 6)), 2.0).softened, 1.0)
    np.testing.assert_array_equal(soften_mask(np.zeros((6, 6)), 2.0).softened, 0.0)
    with pytest.raises(ConfigError):
        soften_mask(raw * 0.5)
    with pytest.raises(ShapeError):
        soften_mask(np.zeros(4))


def test_fade_schedule():
    m = soften_mask(np.zeros((4, 4)), 0.0, hold=0.7)
    vals = [m.fade(k, 11) for k in range(11)]
    np.testing.assert_allclose(vals[:8], 1.0, atol=1e-12)
    assert vals[-1] == 0.0
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_continuity_statistic():
    frames = np.cumsum(np.ones((5, 2, 2, 1)), axis=0)
    c = continuity(frames)
    assert c["ratio"] == pytest.approx(1.0) and len(c["adjacent"]) == 4


@pytest.fixture(scope="module")
def codec_net(tiny_codec):
    return velocity_init(tiny_codec.feature_dim, 4, hidden=(16,), seed=5)


def test_sweep_endpoints(tiny_codec, codec_net):
    rng = np.random.default_rng(0)
    x0, x1 = rng.standard_normal((2, tiny_codec.feature_dim))
    cfg = SamplerConfig(steps=5)
    frames = interpolation_sweep(codec_net, tiny_codec, x0, x1, 1, "slerp", [0.0, 1.0], cfg)
    direct = decode_normalized(tiny_codec, euler_sample(codec_net, cfg, np.stack([x0, x1]), 1)[0])
    np.testing.assert_array_equal(frames, direct)
    with pytest.raises(ConfigError):
        interpolation_sweep(codec_net, tiny_codec, x0, x1, 1, "cubic")


def test_edit_contracts(tiny_shapes, tiny_codec, codec_net):
    _, te = tiny_shapes
    img, c = te.images[0], int(te.labels[0])
    rec = tiny_codec.inverse_transform(tiny_codec.transform(img[None]))[0]
    empty = soften_mask(np.zeros((16, 16)))
    out = masked_edit(codec_net, tiny_codec, img, empty, c, c, EditConfig(steps=10))
    np.testing.assert_allclose(out, rec, atol=1e-12)
    raw = box_mask((16, 16), 0, 0, 16, 8)
    m = soften_mask(raw)
    out, info = masked_edit(codec_net, tiny_codec, img, m, c, (c + 1) % 4, EditConfig(steps=10), return_info=True)
    keep = m.softened == 0
    assert keep.sum() > 0
    assert relative_l2(out, rec, keep) < 1e-9
    assert info["decoded"].shape == img.shape and info["nfe"] > 0
    with pytest.raises(ShapeError):
        masked_edit(codec_net, tiny_codec, img, soften_mask(np.zeros((8, 8))), c, c)


def test_normalized_roundtrip(tiny_shapes, tiny_codec):
    _, te = tiny_shapes
    z = encode_normalized(tiny_codec, te.images[:5])
    np.testing.assert_allclose(decode_normalized(tiny_codec, z),
                               tiny_codec.inverse_transform(tiny_codec.transform(te.images[:5])), atol=1e-12)
