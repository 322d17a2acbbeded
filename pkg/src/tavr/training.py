"""Flow-matching pretraining, cross-scene fine-tuning and masked-DPO
preference tuning."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import numerics as nx
from . import toyworld as tw
from .model import ConditioningContext, DiT, ModelConfig, make_context
from .numerics import Tensor
from .tokenizer import boxes_to_latent


# ---------------------------------------------------------------- data

@dataclass
class Example:
    """Encoded training/evaluation example."""

    z0: np.ndarray                 # (T, h, w, C) clean target latent
    ctx: ConditioningContext
    fg_mask: np.ndarray            # (T, h, w, C) 1 on foreground tokens
    sample: Optional[tw.Sample] = None

    def without_motion(self) -> "Example":
        return replace(self, ctx=replace(self.ctx, motion=None))


def token_foreground_mask(subject_mask: np.ndarray, latent_shape: tuple, cell: int, p: int) -> np.ndarray:
    """Latent-element mask: 1 on every token whose pixel cell touches the subject."""
    m = np.asarray(subject_mask, dtype=bool)
    H, W = m.shape
    tok = m.reshape(H // cell, cell, W // cell, cell).any(axis=(1, 3))
    lat = np.repeat(np.repeat(tok, p, axis=0), p, axis=1).astype(np.float64)
    return np.broadcast_to(lat[None, :, :, None], latent_shape).copy()


def encode_sample(sample: tw.Sample, cfg: ModelConfig, codec: tw.ToyCodec, with_motion: bool = True,
                  dtype=None) -> Example:
    dtype = dtype or nx.default_dtype()
    geo = cfg.geometry
    enc = lambda v: codec.encode(v).astype(dtype)
    z0 = enc(sample.target.frames)
    ctx = make_context(sample.drv_audio.features, sample.text,
                       z_bg=enc(sample.background[None]), z_ref=enc(sample.reference.frames),
                       a_ref=sample.ref_audio.features, ref_boxes=boxes_to_latent(sample.reference.boxes, geo),
                       subject_mask=sample.subject_mask,
                       z_motion=enc(sample.motion.frames) if with_motion else None, geometry=geo)
    mask = token_foreground_mask(sample.subject_mask, z0.shape, geo.cell, geo.p)
    return Example(z0, ctx, mask, sample)


class ExampleStream:
    """Indexable, deterministic stream of encoded examples.

    With ``pool`` set, index i maps onto one of ``pool`` distinct samples
    (i mod pool), which are rendered once and memoized without their pixels.
    """

    def __init__(self, mode: str, seed: int, model_cfg: ModelConfig, world: tw.WorldConfig = tw.WorldConfig(),
                 codec: Optional[tw.ToyCodec] = None, offset: int = 0, pool: Optional[int] = None,
                 dtype=None):
        self.mode, self.seed, self.model_cfg, self.world = mode, seed, model_cfg, world
        self.codec = codec or tw.ToyCodec(model_cfg.geometry.c_s)
        self.offset, self.pool, self.dtype = offset, pool, dtype
        self._cache: dict = {}

    def __getitem__(self, i: int) -> Example:
        if self.pool is None:
            return self._build(i, keep_sample=True)
        j = i % self.pool
        if j not in self._cache:
            self._cache[j] = self._build(j, keep_sample=False)
        return self._cache[j]

    def _build(self, i: int, keep_sample: bool) -> Example:
        s = tw.make_sample(self.offset + i, self.mode, self.seed, self.world)
        ex = encode_sample(s, self.model_cfg, self.codec, dtype=self.dtype)
        return ex if keep_sample else replace(ex, sample=None)


# ---------------------------------------------------------------- flow matching

@dataclass
class FlowSample:
    z0: np.ndarray
    eps: np.ndarray
    t: float
    z_t: np.ndarray
    y: np.ndarray


def draw_t(g: np.random.Generator, dist: str = "uniform") -> float:
    if dist == "uniform":
        return float(g.uniform(0.0, 1.0))
    if dist == "logit_normal":
        return float(1.0 / (1.0 + np.exp(-g.normal())))
    raise ValueError(f"unknown timestep distribution {dist!r}")


def make_flow_sample(z0: np.ndarray, g: np.random.Generator, t: Optional[float] = None,
                     dist: str = "uniform", eps: Optional[np.ndarray] = None) -> FlowSample:
    z0 = np.asarray(z0)
    if eps is None:
        eps = g.standard_normal(z0.shape).astype(z0.dtype)
    if t is None:
        t = draw_t(g, dist)
    z_t = (1.0 - t) * z0 + t * eps
    return FlowSample(z0, eps, float(t), z_t.astype(z0.dtype), (eps - z0).astype(z0.dtype))


def loss_mse(pred, y) -> Tensor:
    """Mean squared error over every element."""
    return nx.mean(nx.square(nx.sub(pred, y)))


def _masked_mse(pred, y, m: np.ndarray, denom: float):
    return nx.div(nx.sum(nx.mul(nx.square(nx.sub(pred, y)), m)), denom)


def dpo_delta(pred_policy, pred_frozen, y, m=None) -> Tensor:
    """Masked-mean squared error of the policy minus that of the frozen model.

    ``m`` of None means every element counts; an all-zero mask gives 0.
    """
    pred_policy = nx.as_tensor(pred_policy)
    frozen = np.asarray(pred_frozen.data if isinstance(pred_frozen, Tensor) else pred_frozen)
    y = np.asarray(y)
    if m is None:
        return nx.sub(loss_mse(pred_policy, y), float(np.mean((frozen - y) ** 2)))
    m = np.asarray(m, dtype=pred_policy.dtype)
    denom = float(m.sum())
    if denom == 0.0:
        return nx.mul(nx.sum(pred_policy), 0.0)
    frozen_err = float(((frozen - y) ** 2 * m).sum() / denom)
    return nx.sub(_masked_mse(pred_policy, y, m, denom), frozen_err)


def loss_dpo(delta_w, delta_l, beta: float) -> Tensor:
    """Mean of softplus((beta/2)(delta_w - delta_l)) over pairs."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    dw = delta_w if isinstance(delta_w, (list, tuple)) else [delta_w]
    dl = delta_l if isinstance(delta_l, (list, tuple)) else [delta_l]
    if len(dw) != len(dl) or not dw:
        raise ValueError("need matching, nonempty winner/loser deltas")
    terms = [nx.softplus(nx.mul(nx.sub(a, b), beta / 2.0)) for a, b in zip(dw, dl)]
    total = terms[0]
    for t in terms[1:]:
        total = nx.add(total, t)
    return nx.div(total, float(len(terms)))


def loss_rl(mse, dpo, lam_mse: float = 1.0, lam_dpo: float = 2.0) -> Tensor:
    if lam_mse < 0 or lam_dpo < 0:
        raise ValueError("loss weights must be nonnegative")
    return nx.add(nx.mul(mse, lam_mse), nx.mul(dpo, lam_dpo))


# ---------------------------------------------------------------- preference pairs

@dataclass
class PreferencePair:
    example: Example
    z_w: np.ndarray
    z_l: np.ndarray
    mask: np.ndarray
    score_w: float
    score_l: float


def build_preference_pairs(examples: Sequence[Example], generate: Callable, score: Callable,
                           margin: float = 0.20, n_gen: int = 2, variant: str = "masked") -> list:
    """Rank generations per context by identity score; keep (best, worst) if
    the gap reaches ``margin``.

    ``generate(example, k)`` returns the k-th latent sample for a context and
    ``score(example, latent)`` its identity similarity to the ground truth.
    With ``variant="masked_real"`` the ground-truth latent is the winner and
    the first generation the loser.
    """
    if n_gen < 2 and variant != "masked_real":
        raise ValueError("need at least two generations per context")
    if n_gen < 1:
        raise ValueError("need at least one generation per context")
    pairs = []
    for ex in examples:
        m = ex.fg_mask if variant != "unmasked" else np.ones_like(ex.fg_mask)
        if m.sum() == 0:
            raise ValueError("preference mask has zero area")
        if variant == "masked_real":
            z_l = generate(ex, 0)
            s_w, s_l = float(score(ex, ex.z0)), float(score(ex, z_l))
            if s_w - s_l >= margin:
                pairs.append(PreferencePair(ex, ex.z0, z_l, m, s_w, s_l))
            continue
        lats = [generate(ex, k) for k in range(n_gen)]
        scores = [float(score(ex, z)) for z in lats]
        hi, lo = int(np.argmax(scores)), int(np.argmin(scores))
        if scores[hi] - scores[lo] >= margin:
            pairs.append(PreferencePair(ex, lats[hi], lats[lo], m, scores[hi], scores[lo]))
    return pairs


# ---------------------------------------------------------------- optimization

@dataclass
class TrainConfig:
    stage: int = 1
    lr: float = 5e-6
    warmup: int = 50
    steps: int = 2000
    batch_size: int = 8
    beta: float = 500.0
    lam_mse: float = 1.0
    lam_dpo: float = 2.0
    dpo_variant: str = "masked"
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    t_dist: str = "uniform"
    p_drop_text: float = 0.1
    p_drop_audio: float = 0.1
    p_motion: float = 0.5
    pairs_per_step: int = 2

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.lam_mse < 0 or self.lam_dpo < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.dpo_variant not in ("masked", "unmasked", "masked_real"):
            raise ValueError(f"unknown dpo variant {self.dpo_variant!r}")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, constant afterwards."""
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    return cfg.lr


class AdamW:
    """Adaptive moments with decoupled weight decay and global-norm clipping."""

    def __init__(self, params: dict, weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8,
                 grad_clip: Optional[float] = 1.0):
        self.params = params
        self.wd, self.b1, self.b2, self.eps, self.clip = weight_decay, betas[0], betas[1], eps, grad_clip
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        self.t += 1
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - lr * self.wd * p.data - lr * upd).astype(p.data.dtype)
        return norm

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}


def _grads_of(params: dict, gmap) -> dict:
    return {k: gmap[p] for k, p in params.items()}


def _conditioned(ex: Example, g: np.random.Generator, cfg: TrainConfig) -> Example:
    """Apply per-item conditioning dropout and motion inclusion."""
    ctx = ex.ctx
    if g.uniform() < cfg.p_drop_text:
        ctx = ctx.without_text()
    if g.uniform() < cfg.p_drop_audio:
        ctx = ctx.without_audio()
    if ctx.motion is not None and g.uniform() >= cfg.p_motion:
        ctx = replace(ctx, motion=None)
    return replace(ex, ctx=ctx)


def _mse_batch(model: DiT, stream, step: int, cfg: TrainConfig):
    """Flow-matching loss over one fresh batch, keyed by (seed, step)."""
    total = None
    for b in range(cfg.batch_size):
        g = nx.rng(cfg.seed, "flow", step * cfg.batch_size + b)
        ex = _conditioned(stream[step * cfg.batch_size + b], g, cfg)
        fs = make_flow_sample(ex.z0, g, dist=cfg.t_dist)
        loss = loss_mse(model(ex.ctx, fs.z_t, fs.t), fs.y)
        total = loss if total is None else nx.add(total, loss)
    return nx.div(total, float(cfg.batch_size))


def _dpo_batch(model: DiT, frozen: DiT, pairs: Sequence[PreferencePair], step: int, cfg: TrainConfig):
    dws, dls = [], []
    for b in range(cfg.pairs_per_step):
        k = step * cfg.pairs_per_step + b
        pair = pairs[k % len(pairs)]
        g = nx.rng(cfg.seed, "dpo", k)
        # winner and loser share one (t, eps)
        eps = g.standard_normal(pair.z_w.shape).astype(pair.z_w.dtype)
        t = draw_t(g, cfg.t_dist)
        ctx = pair.example.ctx
        for z, out in ((pair.z_w, dws), (pair.z_l, dls)):
            fs = make_flow_sample(z, g, t=t, eps=eps)
            pol = model(ctx, fs.z_t, fs.t)
            ref = frozen.velocity(ctx, fs.z_t, fs.t)
            out.append(dpo_delta(pol, ref, fs.y, pair.mask))
    return loss_dpo(dws, dls, cfg.beta)


@dataclass
class TrainResult:
    model: DiT
    log: list = field(default_factory=list)


def frozen_copy(model: DiT) -> DiT:
    params = {k: Tensor(p.data.copy(), requires_grad=False) for k, p in model.params.items()}
    return DiT(model.cfg, model.seed, params=params)


def train_stage(stage: int, model: DiT, stream, cfg: TrainConfig, pairs: Optional[Sequence] = None,
                frozen: Optional[DiT] = None, log_path: Optional[str] = None,
                progress: Optional[Callable] = None) -> TrainResult:
    """Run ``cfg.steps`` optimizer steps of the given stage in place on ``model``.

    Stages 1 and 2 regress the flow velocity on ``stream`` (same-scene and
    cross-scene examples respectively). Stage 3 adds the preference term on
    ``pairs`` against ``frozen`` (a frozen copy of the stage-2 model).
    """
    if stage != cfg.stage:
        cfg = replace(cfg, stage=stage)
    if stage == 1 and getattr(stream, "mode", "same_scene") != "same_scene":
        raise ValueError("stage 1 trains on same-scene examples")
    if stage == 2 and getattr(stream, "mode", "cross_scene") != "cross_scene":
        raise ValueError("stage 2 trains on cross-scene examples")
    if stage == 3:
        if frozen is None:
            raise ValueError("stage 3 needs the stage-2 checkpoint as frozen reference")
        if cfg.lam_dpo > 0 and not pairs:
            raise ValueError("stage 3 needs preference pairs")
    opt = AdamW(model.params, cfg.weight_decay, grad_clip=cfg.grad_clip)
    log = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(cfg.steps):
            lr = lr_at(step, cfg)
            with nx.GradTape() as tape:
                mse = _mse_batch(model, stream, step, cfg)
                if stage == 3 and cfg.lam_dpo > 0:
                    dpo = _dpo_batch(model, frozen, pairs, step, cfg)
                    loss = loss_rl(mse, dpo, cfg.lam_mse, cfg.lam_dpo)
                else:
                    dpo = None
                    loss = mse if cfg.lam_mse == 1.0 else nx.mul(mse, cfg.lam_mse)
            gnorm = opt.step(_grads_of(model.params, tape.backward(loss)), lr)
            rec = {"step": step, "stage": stage, "loss": float(loss.data), "mse": float(mse.data),
                   "dpo": None if dpo is None else float(dpo.data), "lr": lr, "grad_norm": gnorm,
                   "seed": cfg.seed}
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress:
                progress(rec)
    finally:
        if fh:
            fh.close()
    return TrainResult(model, log)
