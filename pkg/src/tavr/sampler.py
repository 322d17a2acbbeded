"""Flow-ODE sampling with nested text/audio guidance and clip chaining."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .model import ConditioningContext
from .tokenizer import BACKGROUND, MOTION, patchify


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 24
    s_text: float = 5.0
    s_audio: float = 1.8
    method: str = "euler"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.s_text < 0 or self.s_audio < 0:
            raise ValueError("guidance scales must be nonnegative")
        if self.method not in ("euler", "heun"):
            raise ValueError(f"unknown method {self.method!r}")


def cfg_coefficients(s_text: float, s_audio: float) -> tuple:
    """Weights of (null, text, full) in the nested guidance combination."""
    return 1.0 - s_text, s_text - s_audio, s_audio


def cfg_velocity(v_null, v_text, v_full, s_text: float, s_audio: float):
    """v_null + s_text (v_text - v_null) + s_audio (v_full - v_text).

    Evaluated in coefficient form with zero-weight branches skipped (they may
    be passed as None), so neutral scales return a branch exactly. The
    weights always sum to one, so at least one branch is used.
    """
    out = None
    for c, v in zip(cfg_coefficients(s_text, s_audio), (v_null, v_text, v_full)):
        if c == 0.0:
            continue
        term = v if c == 1.0 else c * v
        out = term if out is None else out + term
    return out


def _velocity_fn(model) -> Callable:
    if hasattr(model, "velocity"):
        return model.velocity
    return model


def guided_field(model, ctx: ConditioningContext, cfg: SamplerConfig) -> Callable:
    """Velocity field z, t -> v combining the three conditioning branches."""
    vel = _velocity_fn(model)
    c_null, c_text, c_full = cfg_coefficients(cfg.s_text, cfg.s_audio)
    ctx_text = ctx.without_audio()
    ctx_null = ctx_text.without_text()

    def field(z, t):
        v_null = vel(ctx_null, z, t) if c_null != 0.0 else None
        v_text = vel(ctx_text, z, t) if c_text != 0.0 else None
        v_full = vel(ctx, z, t) if c_full != 0.0 else None
        return cfg_velocity(v_null, v_text, v_full, cfg.s_text, cfg.s_audio)
    return field


def integrate(field: Callable, z1: np.ndarray, steps: int, method: str = "euler") -> np.ndarray:
    """Integrate dz/dt = field(z, t) from t=1 down to t=0 on a uniform grid."""
    ts = np.linspace(1.0, 0.0, steps + 1)
    z = np.array(z1, copy=True)
    for i in range(steps):
        t0, t1 = float(ts[i]), float(ts[i + 1])
        dt = t1 - t0
        v0 = np.asarray(field(z, t0))
        if method == "euler":
            z = z + dt * v0
        else:
            v1 = np.asarray(field(z + dt * v0, t1))
            z = z + dt * 0.5 * (v0 + v1)
    return z


def initial_noise(shape: tuple, seed: int, dtype=None) -> np.ndarray:
    dtype = dtype or nx.default_dtype()
    return nx.rng(seed, "sampler-noise").standard_normal(shape).astype(dtype)


def flow_sample(model, ctx: ConditioningContext, cfg: SamplerConfig, shape: tuple) -> np.ndarray:
    """Seeded Gaussian at t=1 integrated to a clean latent estimate at t=0."""
    return integrate(guided_field(model, ctx, cfg), initial_noise(shape, cfg.seed), cfg.steps, cfg.method)


def generate_clip(model, ctx: ConditioningContext, cfg: SamplerConfig, shape: tuple, codec) -> tuple:
    """Returns (decoded video clipped to [0, 1], latent)."""
    z = flow_sample(model, ctx, cfg, shape)
    return np.clip(codec.decode(z), 0.0, 1.0), z


@dataclass
class ClipChainState:
    motion: np.ndarray   # last two latent frames of the previous clip
    anchor: np.ndarray   # (1, h, w, C) encoded first frame of clip 0
    clip_index: int


def chain_context(ctx: ConditioningContext, state: ClipChainState, geometry) -> ConditioningContext:
    """Context for a follow-on clip: motion from the previous clip, anchor as background."""
    motion = patchify(state.motion, geometry, MOTION, t_offset=-len(state.motion))
    bg = patchify(state.anchor, geometry, BACKGROUND)
    return replace(ctx, motion=motion, background=bg)


def generate_long(model, contexts: Sequence[ConditioningContext], n_clips: int, cfg: SamplerConfig,
                  shape: tuple, codec, geometry, n_motion: int = 2, trace: Optional[list] = None) -> np.ndarray:
    """Autoregressive multi-clip generation.

    Clip k >= 1 sees the final ``n_motion`` latent frames of clip k-1 (taken
    before decoding) and, in place of the background stream, the latent of
    clip 0's first decoded frame. ``trace`` collects the per-clip contexts.
    """
    if n_clips < 1 or len(contexts) < n_clips:
        raise ValueError("need one context per clip")
    if shape[0] < n_motion:
        raise ValueError("clip latent shorter than the motion window")
    videos = []
    state = None
    for k in range(n_clips):
        ctx = contexts[k]
        if state is not None:
            ctx = chain_context(ctx, state, geometry)
        if trace is not None:
            trace.append(ctx)
        video, z = generate_clip(model, ctx, replace(cfg, seed=cfg.seed + k), shape, codec)
        if state is None:
            state = ClipChainState(z[-n_motion:].copy(), codec.encode(video[:1]), 0)
        else:
            state = ClipChainState(z[-n_motion:].copy(), state.anchor, k)
        videos.append(video)
    return np.concatenate(videos, axis=0)
