import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tavr import model as M
from tavr import sampler as sp
from tavr.numerics import rng

from _common import IdentityCodec, toy_context

CFG = M.ModelConfig(d=16, head_count=2, block_count=1, c_lat=3, L=2, d_audio=3)


@pytest.fixture(scope="module")
def net():
    return M.DiT(CFG, seed=3, zero_init_outputs=False)


def _branches(seed, shape=(3, 4)):
    g = rng(seed, "branches")
    return [g.normal(size=shape) for _ in range(3)]


def test_sampler_config_defaults_and_errors():
    c = sp.SamplerConfig()
    assert (c.steps, c.s_text, c.s_audio, c.method) == (24, 5.0, 1.8, "euler")
    for bad in (dict(steps=0), dict(s_text=-1.0), dict(s_audio=-0.1), dict(method="unipc")):
        with pytest.raises(ValueError):
            sp.SamplerConfig(**bad)


def test_cfg_neutral_scales_exact():
    a, b, c = _branches(0)
    assert np.array_equal(sp.cfg_velocity(a, b, c, 1.0, 1.0), c)
    assert np.array_equal(sp.cfg_velocity(a, b, c, 1.0, 0.0), b)
    assert np.array_equal(sp.cfg_velocity(a, b, c, 0.0, 0.0), a)
    # skipped branches may be absent entirely
    assert np.array_equal(sp.cfg_velocity(None, None, c, 1.0, 1.0), c)


def test_cfg_default_scales_formula():
    a, b, c = _branches(1)
    expect = a + 5.0 * (b - a) + 1.8 * (c - b)
    np.testing.assert_allclose(sp.cfg_velocity(a, b, c, 5.0, 1.8), expect, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 8), st.floats(0, 8), st.floats(-3, 3), st.integers(0, 2))
def test_cfg_linear_in_each_branch(s_t, s_a, k, which):
    br = _branches(2)
    extra = rng(3, "extra").normal(size=br[0].shape)
    moved = list(br)
    moved[which] = br[which] + k * extra
    coeff = sp.cfg_coefficients(s_t, s_a)[which]
    lhs = sp.cfg_velocity(*moved, s_t, s_a) - sp.cfg_velocity(*br, s_t, s_a)
    np.testing.assert_allclose(lhs, coeff * k * extra, atol=1e-9)


def test_one_euler_step_recovers_clean_latent_under_oracle_field():
    g = rng(4, "oracle")
    z0 = g.normal(size=(2, 4, 4, 3))
    eps = g.normal(size=z0.shape)
    field = lambda z, t: eps - z0
    out = sp.integrate(field, eps, 1, "euler")
    np.testing.assert_allclose(out, z0, rtol=0, atol=1e-6)
    np.testing.assert_allclose(sp.integrate(field, eps, 3, "heun"), z0, rtol=0, atol=1e-6)


def test_guided_field_branch_contexts():
    seen = []

    def fake(ctx, z, t):
        seen.append((ctx.text is None or not np.any(ctx.text), ctx.a_drv is None or not np.any(ctx.a_drv)))
        return np.zeros_like(z)

    ctx, z = toy_context(CFG)
    sp.guided_field(fake, ctx, sp.SamplerConfig())(z, 0.5)
    assert sorted(seen) == sorted([(True, True), (False, True), (False, False)])
    seen.clear()
    sp.guided_field(fake, ctx, sp.SamplerConfig(s_text=1.0, s_audio=1.0))(z, 0.5)
    assert seen == [(False, False)]


def test_self_convergence_monotone(net):
    ctx, z = toy_context(CFG)
    ref = sp.flow_sample(net, ctx, sp.SamplerConfig(steps=256), z.shape)
    errs = [np.abs(sp.flow_sample(net, ctx, sp.SamplerConfig(steps=n), z.shape) - ref).mean() for n in (4, 8, 16, 32)]
    assert all(a > b for a, b in zip(errs, errs[1:])), errs


def test_flow_sample_deterministic_and_seeded(net):
    ctx, z = toy_context(CFG)
    c = sp.SamplerConfig(steps=4, seed=11)
    a, b = sp.flow_sample(net, ctx, c, z.shape), sp.flow_sample(net, ctx, c, z.shape)
    assert np.array_equal(a, b)
    other = sp.flow_sample(net, ctx, sp.SamplerConfig(steps=4, seed=12), z.shape)
    assert not np.array_equal(a, other)


def test_generate_clip_returns_decoded_and_latent(net):
    ctx, z = toy_context(CFG)
    c = sp.SamplerConfig(steps=3)
    video, lat = sp.generate_clip(net, ctx, c, z.shape, IdentityCodec())
    assert np.array_equal(lat, sp.flow_sample(net, ctx, c, z.shape))
    assert np.array_equal(video, np.clip(lat, 0, 1))


def test_generate_long_single_clip_equals_generate_clip(net):
    ctx, z = toy_context(CFG)
    c = sp.SamplerConfig(steps=3, seed=5)
    long = sp.generate_long(net, [ctx], 1, c, z.shape, IdentityCodec(), CFG.geometry)
    clip, _ = sp.generate_clip(net, ctx, c, z.shape, IdentityCodec())
    assert np.array_equal(long, clip)


def test_generate_long_anchor_and_motion(net):
    ctxs = [toy_context(CFG, seed=k)[0] for k in range(4)]
    z = toy_context(CFG)[1]
    trace = []
    c = sp.SamplerConfig(steps=2, seed=1)
    out = sp.generate_long(net, ctxs, 4, c, z.shape, IdentityCodec(), CFG.geometry, trace=trace)
    assert out.shape[0] == 4 * z.shape[0]
    bgs = [t.background.tokens for t in trace[1:]]
    assert all(np.array_equal(bgs[0], b) for b in bgs[1:])
    # motion of clip k is the last two latent frames of clip k-1
    _, z0 = sp.generate_clip(net, ctxs[0], c, z.shape, IdentityCodec())
    from tavr.tokenizer import MOTION, patchify
    expect = patchify(z0[-2:], CFG.geometry, MOTION, t_offset=-2).tokens
    assert np.array_equal(trace[1].motion.tokens, expect)
    anchor = patchify(np.clip(z0[:1], 0, 1), CFG.geometry, 1).tokens
    assert np.array_equal(bgs[0], anchor)


def test_generate_long_errors(net):
    ctx, z = toy_context(CFG, T=1, motion=False)
    with pytest.raises(ValueError):
        sp.generate_long(net, [ctx, ctx], 2, sp.SamplerConfig(steps=1), z.shape, IdentityCodec(), CFG.geometry)
    with pytest.raises(ValueError):
        sp.generate_long(net, [ctx], 2, sp.SamplerConfig(steps=1), z.shape, IdentityCodec(), CFG.geometry)
