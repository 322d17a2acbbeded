"""Velocity-prediction diffusion transformer with reference and audio streams.

Sequence layout is always ``[motion, target, background, reference]``. The
first three groups form the query set of the shared self-attention; the
reference group additionally runs its own self-attention with the same
weights, so reference outputs never see the noisy stream.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .tokenizer import (BACKGROUND, MOTION, REFERENCE, TARGET, REF_TIME_OFFSET, LatentGeometry,
                        TokenGrid, concat_grids, mask_background_tokens, patchify, positional_codes,
                        select_reference_tokens)

ORDER = (MOTION, TARGET, BACKGROUND, REFERENCE)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    head_count: int = 4
    block_count: int = 2
    L: int = 4
    d_audio: int = 8
    geometry: LatentGeometry = field(default_factory=LatentGeometry)
    use_ref_audio: bool = True
    use_token_selection: bool = True
    c_lat: int = 8
    d_text: int = 4
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d % self.head_count:
            raise ValueError("d must be divisible by head_count")
        if self.block_count < 1:
            raise ValueError("block_count must be >= 1")
        if self.d % 2 or self.d < 6:
            raise ValueError("d must be even and >= 6")

    @property
    def patch_dim(self) -> int:
        return self.geometry.p ** 2 * self.c_lat


@dataclass
class LatentState:
    tokens: Tensor
    coords: np.ndarray
    origin: np.ndarray

    def range(self, origin: int) -> tuple:
        idx = np.nonzero(self.origin == origin)[0]
        if not len(idx):
            return (0, 0) if origin != REFERENCE else (len(self.origin), len(self.origin))
        return int(idx[0]), int(idx[-1]) + 1

    @property
    def n_main(self) -> int:
        """Count of motion, target and background tokens (the step-1 queries)."""
        return int(np.sum(self.origin != REFERENCE))

    def with_tokens(self, tokens) -> "LatentState":
        return LatentState(tokens, self.coords, self.origin)

    def check(self):
        pos = [ORDER.index(o) for o in self.origin]
        if any(b < a for a, b in zip(pos, pos[1:])):
            raise ValueError("token groups out of order")


@dataclass
class ConditioningContext:
    a_drv: np.ndarray                    # (T_lat, L, d_audio)
    text: np.ndarray                     # (d_text,)
    background: Optional[TokenGrid] = None
    reference: Optional[TokenGrid] = None
    a_ref: Optional[np.ndarray] = None   # (T_ref_lat, L, d_audio)
    ref_boxes: Optional[np.ndarray] = None   # (T_ref_lat, 4) in latent units
    subject_mask: Optional[np.ndarray] = None  # (H, W) pixels
    motion: Optional[TokenGrid] = None

    def validate(self, n_target_frames: int):
        if self.a_drv.shape[0] != n_target_frames:
            raise ValueError(f"driving audio has {self.a_drv.shape[0]} frames, target has {n_target_frames}")
        if self.reference is not None and len(self.reference) and self.a_ref is not None:
            n_ref = int(self.reference.coords[:, 0].max()) - REF_TIME_OFFSET + 1
            if self.a_ref.shape[0] != n_ref:
                raise ValueError(f"reference audio has {self.a_ref.shape[0]} frames, reference has {n_ref}")

    def without_text(self) -> "ConditioningContext":
        return replace(self, text=np.zeros_like(self.text))

    def without_audio(self) -> "ConditioningContext":
        return replace(self, a_drv=np.zeros_like(self.a_drv))


def make_context(a_drv, text, z_bg=None, z_ref=None, a_ref=None, ref_boxes=None,
                 subject_mask=None, z_motion=None, geometry: LatentGeometry = LatentGeometry()
                 ) -> ConditioningContext:
    """Tokenize conditioning latents (raw patches, no selection yet)."""
    bg = None if z_bg is None else patchify(z_bg, geometry, BACKGROUND)
    ref = None
    if z_ref is not None and len(z_ref):
        ref = patchify(z_ref, geometry, REFERENCE, t_offset=REF_TIME_OFFSET)
    motion = None
    if z_motion is not None and len(z_motion):
        motion = patchify(z_motion, geometry, MOTION, t_offset=-len(z_motion))
    return ConditioningContext(np.asarray(a_drv, dtype=np.float64), np.asarray(text, dtype=np.float64),
                               bg, ref, None if a_ref is None else np.asarray(a_ref, dtype=np.float64),
                               None if ref_boxes is None else np.asarray(ref_boxes, dtype=np.float64),
                               subject_mask, motion)


# ---------------------------------------------------------------- parameters

def _orthogonal(shape, g: np.random.Generator, gain: float = 1.0) -> np.ndarray:
    k, n = shape
    a = g.normal(size=(max(k, n), min(k, n)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if k < n:
        q = q.T
    return gain * q * max(1.0, np.sqrt(n / k))


def _block_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.d, cfg.d * cfg.ffn_mult
    return {
        "mod": (d, 6 * d), "mod_b": (6 * d,),
        "sa_q": (d, d), "sa_k": (d, d), "sa_v": (d, d), "sa_o": (d, d),
        "tx_q": (d, d), "tx_k": (d, d), "tx_v": (d, d), "tx_o": (d, d),
        "au_q": (d, d), "au_k": (d, d), "au_v": (d, d), "au_o": (d, d),
        "ff1": (d, f), "ff1_b": (f,), "ff2": (f, d), "ff2_b": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict:
    d = cfg.d
    shapes = {
        "patch_in": (cfg.patch_dim, d), "patch_in_b": (d,),
        "origin_emb": (4, d),
        "t_mlp1": (d, d), "t_mlp1_b": (d,), "t_mlp2": (d, d), "t_mlp2_b": (d,),
        "audio_in": (cfg.d_audio, d), "audio_in_b": (d,),
        "text_in": (cfg.d_text, d), "text_in_b": (d,),
        "final_mod": (d, 2 * d), "final_mod_b": (2 * d,),
        "out": (d, cfg.patch_dim), "out_b": (cfg.patch_dim,),
    }
    for i in range(cfg.block_count):
        for k, s in _block_shapes(cfg).items():
            shapes[f"blocks.{i}.{k}"] = s
    return shapes


_ZERO_OUT = ("sa_o", "tx_o", "au_o", "ff2", "out")
_SMALL = ("mod", "final_mod", "origin_emb")


def init_params(cfg: ModelConfig, seed: int = 0, zero_init_outputs: bool = True, dtype=None) -> dict:
    """Seeded parameters; output projections start at zero unless disabled."""
    dtype = np.dtype(dtype or nx.default_dtype())
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        g = nx.rng(seed, "init", zlib.crc32(name.encode()))
        if len(shape) == 1:
            w = np.zeros(shape)
            if not zero_init_outputs:
                w = g.normal(0.0, 0.1, shape)
        elif leaf in _ZERO_OUT and zero_init_outputs:
            w = np.zeros(shape)
        else:
            w = _orthogonal(shape, g, 0.1 if leaf in _SMALL else 1.0)
        params[name] = Tensor(w, requires_grad=True, dtype=dtype)
    return params


def block_params(params: dict, i: int) -> dict:
    pre = f"blocks.{i}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


# ---------------------------------------------------------------- sublayers

def timestep_embedding(t: float, params: dict, d: int) -> Tensor:
    half = d // 2
    freq = 10000.0 ** (-np.arange(half) / half)
    ang = 1000.0 * float(t) * freq
    base = Tensor(np.concatenate([np.sin(ang), np.cos(ang)]), dtype=params["t_mlp1"].dtype)
    h = nx.silu(nx.linear(base, params["t_mlp1"], params["t_mlp1_b"]))
    return nx.linear(h, params["t_mlp2"], params["t_mlp2_b"])


def reference_self_attention(state: LatentState, w: dict, head_count: int) -> LatentState:
    """Step 1: [motion, target, bg] queries over every token. Step 2: reference
    tokens attend among themselves with the same projections."""
    if not np.any(state.origin == TARGET):
        raise ValueError("state has no target tokens")
    x = state.tokens
    n_main = state.n_main
    q = nx.matmul(x, w["sa_q"])
    k = nx.matmul(x, w["sa_k"])
    v = nx.matmul(x, w["sa_v"])
    if n_main == len(state.origin):
        out = nx.attention_core(q, k, v, head_count)
    else:
        main = nx.attention_core(q[:n_main], k, v, head_count)
        ref = nx.attention_core(q[n_main:], k[n_main:], v[n_main:], head_count)
        out = nx.concat([main, ref], axis=0)
    return state.with_tokens(nx.matmul(out, w["sa_o"]))


def text_cross_attention(state: LatentState, text_emb: Tensor, w: dict, head_count: int) -> LatentState:
    """Non-reference tokens attend to the single text token; reference rows get zero."""
    x = state.tokens
    n_main = state.n_main
    kv = nx.reshape(text_emb, (1, -1))
    q = nx.matmul(x[:n_main] if n_main < len(state.origin) else x, w["tx_q"])
    out = nx.matmul(nx.attention_core(q, nx.matmul(kv, w["tx_k"]), nx.matmul(kv, w["tx_v"]), head_count), w["tx_o"])
    n_ref = len(state.origin) - n_main
    if n_ref:
        out = nx.concat([out, Tensor(np.zeros((n_ref, out.shape[1]), dtype=out.dtype))], axis=0)
    return state.with_tokens(out)


def _framewise_attention(q: Tensor, k_frames: Tensor, v_frames: Tensor, frame_idx: np.ndarray,
                         head_count: int) -> Tensor:
    """Each query row attends only to the audio tokens of its own frame.

    Rows are gathered per token, so frames may hold unequal token counts.
    """
    n, d = q.shape
    L = k_frames.shape[1]
    dh = d // head_count
    kg = nx.transpose(nx.reshape(nx.take(k_frames, frame_idx, axis=0), (n, L, head_count, dh)), (0, 2, 3, 1))
    vg = nx.transpose(nx.reshape(nx.take(v_frames, frame_idx, axis=0), (n, L, head_count, dh)), (0, 2, 1, 3))
    qh = nx.reshape(q, (n, head_count, 1, dh))
    p = nx.softmax_rows(nx.mul(nx.matmul(qh, kg), 1.0 / np.sqrt(dh)))
    return nx.reshape(nx.matmul(p, vg), (n, d))


def audio_cross_attention(state: LatentState, a_drv: Tensor, a_ref: Optional[Tensor], w: dict,
                          head_count: int, use_ref_audio: bool) -> LatentState:
    """Frame-wise audio attention for target tokens (and reference tokens when
    reference audio is enabled). Motion and background rows get zero.

    ``a_drv``/``a_ref`` are projected audio features of shape (frames, L, d).
    """
    x = state.tokens
    N, d = x.shape
    t0, t1 = state.range(TARGET)
    pieces = []
    if t0:
        pieces.append(Tensor(np.zeros((t0, d), dtype=x.dtype)))
    T = a_drv.shape[0]
    tgt_frames = state.coords[t0:t1, 0]
    if tgt_frames.min() < 0 or tgt_frames.max() >= T:
        raise ValueError("target frames exceed driving audio frames")
    r0, r1 = state.range(REFERENCE)
    with_ref = use_ref_audio and a_ref is not None and r1 > r0
    if with_ref:
        ref_frames = state.coords[r0:r1, 0] - REF_TIME_OFFSET
        if ref_frames.max() >= a_ref.shape[0]:
            raise ValueError("reference frames exceed reference audio frames")
        frames = nx.concat([a_drv, a_ref], axis=0)
        rows = nx.concat([x[t0:t1], x[r0:r1]], axis=0)
        idx = np.concatenate([tgt_frames, T + ref_frames])
    else:
        frames, rows, idx = a_drv, x[t0:t1], tgt_frames
    F, L = frames.shape[0], frames.shape[1]
    flat = nx.reshape(frames, (F * L, d))
    kf = nx.reshape(nx.matmul(flat, w["au_k"]), (F, L, d))
    vf = nx.reshape(nx.matmul(flat, w["au_v"]), (F, L, d))
    att = nx.matmul(_framewise_attention(nx.matmul(rows, w["au_q"]), kf, vf, idx, head_count), w["au_o"])
    n_t = t1 - t0
    pieces.append(att[:n_t] if with_ref else att)
    mid = r0 - t1
    if mid:
        pieces.append(Tensor(np.zeros((mid, d), dtype=x.dtype)))
    if r1 > r0:
        pieces.append(att[n_t:] if with_ref else Tensor(np.zeros((r1 - r0, d), dtype=x.dtype)))
    return state.with_tokens(nx.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0])


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return nx.add(nx.mul(nx.layer_norm(x), nx.add(scale, 1.0)), shift)


def dit_block(state: LatentState, feats: dict, t_emb: Tensor, w: dict, cfg: ModelConfig) -> LatentState:
    """One block: modulated two-step self-attention, text and audio
    cross-attention, then a modulated, gated feed-forward; all residual."""
    d = cfg.d
    mod = nx.linear(nx.silu(t_emb), w["mod"], w["mod_b"])
    shift1, scale1, gate1 = mod[0:d], mod[d:2 * d], mod[2 * d:3 * d]
    shift2, scale2, gate2 = mod[3 * d:4 * d], mod[4 * d:5 * d], mod[5 * d:6 * d]
    h = state.tokens
    sa = reference_self_attention(state.with_tokens(_modulate(h, shift1, scale1)), w, cfg.head_count)
    h = nx.add(h, nx.mul(sa.tokens, nx.add(gate1, 1.0)))
    tx = text_cross_attention(state.with_tokens(nx.layer_norm(h)), feats["text"], w, cfg.head_count)
    h = nx.add(h, tx.tokens)
    au = audio_cross_attention(state.with_tokens(nx.layer_norm(h)), feats["a_drv"], feats.get("a_ref"),
                               w, cfg.head_count, cfg.use_ref_audio)
    h = nx.add(h, au.tokens)
    x = _modulate(h, shift2, scale2)
    ff = nx.linear(nx.gelu(nx.linear(x, w["ff1"], w["ff1_b"])), w["ff2"], w["ff2_b"])
    return state.with_tokens(nx.add(h, nx.mul(ff, nx.add(gate2, 1.0))))


# ---------------------------------------------------------------- full model

def assemble_grid(ctx: ConditioningContext, z_t: np.ndarray, cfg: ModelConfig) -> TokenGrid:
    """Raw patch tokens in ``[motion, target, background, reference]`` order,
    with selection applied per the config flags."""
    geo = cfg.geometry
    grids = []
    if ctx.motion is not None:
        grids.append(ctx.motion)
    grids.append(patchify(z_t, geo, TARGET))
    if ctx.background is not None:
        bg = ctx.background
        if cfg.use_token_selection and ctx.subject_mask is not None:
            bg = mask_background_tokens(bg, ctx.subject_mask, geo)
        grids.append(bg)
    if ctx.reference is not None and len(ctx.reference):
        ref = ctx.reference
        if cfg.use_token_selection and ctx.ref_boxes is not None:
            ref = select_reference_tokens(ref, ctx.ref_boxes, geo)
        grids.append(ref)
    return concat_grids(grids)


def model_forward(params: dict, cfg: ModelConfig, ctx: ConditioningContext, z_t, t: float) -> Tensor:
    """Predict the velocity field for the target latent ``z_t`` at time ``t``."""
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    z_t = np.asarray(z_t)
    geo = cfg.geometry
    if z_t.ndim != 4 or z_t.shape[-1] != cfg.c_lat or z_t.shape[1] % geo.p or z_t.shape[2] % geo.p:
        raise ValueError(f"latent shape {z_t.shape} does not match the model geometry")
    ctx.validate(z_t.shape[0])
    dtype = params["patch_in"].dtype
    grid = assemble_grid(ctx, z_t, cfg)
    raw = Tensor(np.asarray(grid.tokens), dtype=dtype)
    h = nx.linear(raw, params["patch_in"], params["patch_in_b"])
    h = nx.add(h, nx.take(params["origin_emb"], grid.origin, axis=0))
    h = nx.add(h, Tensor(positional_codes(grid.coords, cfg.d), dtype=dtype))
    state = LatentState(h, grid.coords, grid.origin)
    t_emb = timestep_embedding(t, params, cfg.d)
    feats = {
        "text": nx.linear(Tensor(ctx.text, dtype=dtype), params["text_in"], params["text_in_b"]),
        "a_drv": nx.linear(Tensor(ctx.a_drv, dtype=dtype), params["audio_in"], params["audio_in_b"]),
    }
    if ctx.a_ref is not None:
        feats["a_ref"] = nx.linear(Tensor(ctx.a_ref, dtype=dtype), params["audio_in"], params["audio_in_b"])
    for i in range(cfg.block_count):
        state = dit_block(state, feats, t_emb, block_params(params, i), cfg)
    t0, t1 = state.range(TARGET)
    mod = nx.linear(nx.silu(t_emb), params["final_mod"], params["final_mod_b"])
    x = _modulate(state.tokens[t0:t1], mod[:cfg.d], mod[cfg.d:])
    out = nx.linear(x, params["out"], params["out_b"])
    T, h_lat, w_lat, C = z_t.shape
    p = geo.p
    out = nx.reshape(out, (T, h_lat // p, w_lat // p, p, p, C))
    return nx.reshape(nx.transpose(out, (0, 1, 3, 2, 4, 5)), z_t.shape)


class DiT:
    """Parameters plus config, with a convenience call."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, zero_init_outputs: bool = True, params=None):
        self.cfg = cfg
        self.seed = seed
        self.params = params if params is not None else init_params(cfg, seed, zero_init_outputs)

    def __call__(self, ctx: ConditioningContext, z_t, t: float) -> Tensor:
        return model_forward(self.params, self.cfg, ctx, z_t, t)

    def velocity(self, ctx: ConditioningContext, z_t, t: float) -> np.ndarray:
        return self(ctx, z_t, t).data

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))
