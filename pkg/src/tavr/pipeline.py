"""Experiment orchestration shared by the command line and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import evalkit as ek
from . import io
from . import numerics as nx
from . import sampler as sp
from . import toyworld as tw
from . import training as tr
from .config import Config
from .model import DiT, ModelConfig
from .numerics import Tensor
from .tokenizer import LatentGeometry, count_tokens

# held-out data never shares a world seed with training streams
TRAIN_SEED_OFFSET = 0
PAIR_SEED_OFFSET = 50_000


@dataclass
class Setup:
    cfg: Config
    world: tw.WorldConfig
    codec: tw.ToyCodec
    model_cfg: ModelConfig

    @property
    def seed(self) -> int:
        return self.cfg["seed"]

    def train_config(self, stage: int, seed: Optional[int] = None, **overrides) -> tr.TrainConfig:
        c = self.cfg
        tc = tr.TrainConfig(
            stage=stage, lr=c[f"stage{stage}.lr"], warmup=c["train.warmup"], steps=c[f"stage{stage}.steps"],
            batch_size=c["train.batch_size"], beta=c["train.beta"], lam_mse=c["train.lam_mse"],
            lam_dpo=c["train.lam_dpo"], dpo_variant=c["train.dpo_variant"],
            seed=self.seed if seed is None else seed, weight_decay=c["train.weight_decay"],
            grad_clip=c["train.grad_clip"], t_dist=c["train.t_dist"], p_drop_text=c["train.p_drop_text"],
            p_drop_audio=c["train.p_drop_audio"], p_motion=c["train.p_motion"],
            pairs_per_step=c["train.pairs_per_step"])
        return replace(tc, **overrides)

    def sampler_config(self, **overrides) -> sp.SamplerConfig:
        c = self.cfg
        sc = sp.SamplerConfig(steps=c["sampler.steps"], s_text=c["sampler.s_text"], s_audio=c["sampler.s_audio"],
                              method=c["sampler.method"], seed=c["sampler.seed"])
        return replace(sc, **overrides)


def setup_from(cfg: Config) -> Setup:
    world = tw.WorldConfig(H=cfg["world.H"], W=cfg["world.W"], T=cfg["world.T"], L=cfg["world.L"],
                           d_audio=cfg["world.d_audio"], ref_min=cfg["world.ref_min"], ref_max=cfg["world.ref_max"])
    geo = LatentGeometry(c_s=cfg["geometry.c_s"], c_t=cfg["geometry.c_t"], p=cfg["geometry.p"])
    codec = tw.ToyCodec(geo.c_s, cfg["codec.pool"], cfg["codec.luma_band"], cfg["codec.chroma_band"],
                        cfg["codec.normalize"])
    mc = ModelConfig(d=cfg["model.d"], head_count=cfg["model.head_count"], block_count=cfg["model.block_count"],
                     L=world.L, d_audio=world.d_audio, geometry=geo, use_ref_audio=cfg["model.use_ref_audio"],
                     use_token_selection=cfg["model.use_token_selection"], c_lat=codec.channels,
                     ffn_mult=cfg["model.ffn_mult"])
    return Setup(cfg, world, codec, mc)


# ---------------------------------------------------------------- models and checkpoints

def new_model(setup: Setup, seed: Optional[int] = None) -> DiT:
    return DiT(setup.model_cfg, seed=setup.seed if seed is None else seed)


def save_model(model: DiT, setup: Setup, path, stage: int, extra: Optional[dict] = None) -> list:
    meta = {"stage": stage, "seed": model.seed, "geometry_hash": setup.cfg.geometry_hash(),
            "config": setup.cfg.as_dict(), **(extra or {})}
    return io.save_checkpoint(path, model.params, meta)


class GeometryMismatch(ValueError):
    pass


def load_model(setup: Setup, path) -> tuple:
    params, manifest = io.load_checkpoint(path)
    if manifest.get("geometry_hash") != setup.cfg.geometry_hash():
        raise GeometryMismatch(f"checkpoint {path} was trained with a different geometry")
    model = DiT(setup.model_cfg, seed=manifest.get("seed", 0),
                params={k: Tensor(v, requires_grad=True) for k, v in params.items()})
    return model, manifest


# ---------------------------------------------------------------- data

def stage_mode(stage: int) -> str:
    return "same_scene" if stage == 1 else "cross_scene"


def train_stream(setup: Setup, stage: int) -> tr.ExampleStream:
    return tr.ExampleStream(stage_mode(stage), setup.seed + TRAIN_SEED_OFFSET, setup.model_cfg, setup.world,
                            setup.codec, pool=setup.cfg["train.pool"] or None)


def held_out(setup: Setup, mode: str, n: int, seed: Optional[int] = None, ref_len: Optional[int] = None) -> list:
    """Evaluation samples from a world seed disjoint from training."""
    seed = setup.cfg["eval.seed"] if seed is None else seed
    return [tw.make_sample(i, mode, seed, setup.world, ref_len=ref_len) for i in range(n)]


def encode(setup: Setup, sample: tw.Sample, with_motion: bool = False) -> tr.Example:
    return tr.encode_sample(sample, setup.model_cfg, setup.codec, with_motion=with_motion)


# ---------------------------------------------------------------- generation and scoring

def generate(model: DiT, setup: Setup, ex: tr.Example, seed: int) -> tuple:
    """Decoded clip and latent for one context."""
    return sp.generate_clip(model, ex.ctx, setup.sampler_config(seed=seed), ex.z0.shape, setup.codec)


def video_embeddings(frames, boxes) -> ek.EmbeddingSequence:
    return ek.embed_video(frames, boxes)


def _target_embeddings(sample: tw.Sample) -> ek.EmbeddingSequence:
    return video_embeddings(sample.target.frames, sample.target.boxes)


def identity_score(setup: Setup, ex: tr.Example, latent) -> float:
    """Chamfer identity similarity of a latent's decoded clip to the true target."""
    video = np.clip(setup.codec.decode(latent), 0.0, 1.0)
    gen = video_embeddings(video, ex.sample.target.boxes)
    return ek.chamfer_similarity(gen, _target_embeddings(ex.sample))


def build_pairs(model: DiT, setup: Setup, n_contexts: int, seed: int = 0, variant: Optional[str] = None) -> list:
    c = setup.cfg
    samples = [tw.make_sample(i, "cross_scene", setup.seed + PAIR_SEED_OFFSET, setup.world)
               for i in range(n_contexts)]
    examples = [encode(setup, s) for s in samples]

    def gen(ex, k):
        return generate(model, setup, ex, seed=1000 * seed + 17 * ex.sample.index + k)[1]

    return tr.build_preference_pairs(examples, gen, lambda ex, z: identity_score(setup, ex, z),
                                     margin=c["pairs.margin"], n_gen=c["pairs.n_gen"],
                                     variant=variant or c["train.dpo_variant"])


def eval_case(model: DiT, setup: Setup, sample: tw.Sample, seed: int, reference: Optional[tw.RenderedVideo] = None):
    ex = encode(setup, sample)
    video, _ = generate(model, setup, ex, seed)
    ref = reference or sample.reference
    return ek.EvalCase(video, sample.target.boxes, sample.drv_audio.envelope[:len(video)],
                       video_embeddings(ref.frames, ref.boxes), _target_embeddings(sample))


def evaluate(model: DiT, setup: Setup, samples: Sequence[tw.Sample], seed: int = 0) -> tuple:
    cases = [eval_case(model, setup, s, seed + i) for i, s in enumerate(samples)]
    return ek.evaluate_cases(cases, token_summary(setup))


def mismatch_render(sample: tw.Sample) -> tw.RenderedVideo:
    """The target clip re-rendered with a clearly different identity."""
    T = len(sample.target)
    return tw.render_video(tw.mismatched_identity(sample.identity), sample.target_scene, sample.drv_audio, T,
                           sample.seeds["motion_t"], *sample.target.frames.shape[1:3])


def toy_pipeline_metrics(model: DiT, setup: Setup, samples: Sequence[tw.Sample], seed: int = 0) -> list:
    """Per-context mouth-audio correlation and identity margin over a mismatched identity."""
    rows = []
    for i, s in enumerate(samples):
        case = eval_case(model, setup, s, seed + i)
        gen = video_embeddings(case.generated, case.boxes)
        other = mismatch_render(s)
        margin = (ek.chamfer_similarity(gen, case.target)
                  - ek.chamfer_similarity(gen, video_embeddings(other.frames, other.boxes)))
        rows.append({"index": s.index, "mouth_corr": ek.mouth_audio_corr(case.generated, case.boxes, case.envelope),
                     "id_true": ek.chamfer_similarity(gen, case.target), "id_margin": margin})
    return rows


def reference_length_rows(model: DiT, setup: Setup, samples: Sequence[tw.Sample], lengths: Sequence[int],
                          seed: int = 0) -> list:
    """Per-context, per-length metrics; every length is scored against the longest reference clip."""
    longest = max(lengths)
    rows = []
    for i, s in enumerate(samples):
        full = tw.with_reference_length(s, longest, cfg=setup.world).reference
        for n in lengths:
            sn = tw.with_reference_length(s, n, cfg=setup.world)
            case = eval_case(model, setup, sn, seed + i, reference=full)
            rep, _ = ek.evaluate_cases([case])
            rows.append({"index": s.index, "length": n, "id_ref": rep.id_ref, "id_target": rep.id_target,
                         "mouth_corr": rep.mouth_corr})
    return rows


def sweep_table(rows: Sequence[dict], lengths: Sequence[int]) -> list:
    out = []
    for n in lengths:
        sel = [r for r in rows if r["length"] == n]
        rho = [r["mouth_corr"] for r in sel if np.isfinite(r["mouth_corr"])]
        out.append({"length": n, "id_ref": float(np.mean([r["id_ref"] for r in sel])),
                    "id_target": float(np.mean([r["id_target"] for r in sel])),
                    "mouth_corr": float(np.mean(rho)) if rho else float("nan")})
    return out


def token_summary(setup: Setup, ref_frames: Optional[int] = None) -> dict:
    c, geo = setup.cfg, setup.model_cfg.geometry
    from .tokenizer import flops_ref_self_attn
    b = count_tokens(c["world.T"], c["world.H"], c["world.W"], geo,
                     T_ref=c["flops.ref_frames"] if ref_frames is None else ref_frames,
                     ref_keep_fraction=c["flops.ref_keep"], bg_keep_fraction=c["flops.bg_keep"])
    return {**b.as_dict(), "tflops": flops_ref_self_attn(b, c["model.d"]) / 1e12}


# ---------------------------------------------------------------- training

def run_stage(setup: Setup, stage: int, model: DiT, frozen: Optional[DiT] = None, pairs=None,
              log_path=None, seed: Optional[int] = None, progress: Optional[Callable] = None,
              **overrides) -> tr.TrainResult:
    cfg = setup.train_config(stage, seed=seed, **overrides)
    return tr.train_stage(stage, model, train_stream(setup, stage), cfg, pairs=pairs, frozen=frozen,
                          log_path=log_path, progress=progress)


def copy_model(model: DiT) -> DiT:
    return DiT(model.cfg, model.seed, params={k: Tensor(p.data.copy(), requires_grad=True)
                                              for k, p in model.params.items()})
