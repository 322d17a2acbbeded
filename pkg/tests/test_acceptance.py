"""End-to-end acceptance suite: one recorded PASS/FAIL line per criterion.

The toy-model criteria (7-9) share session-scoped checkpoints, so their
expensive training runs happen once per pytest session.
"""
import itertools
import math
import time

import numpy as np
import pytest

from tavr import cli
from tavr import model as M
from tavr import numerics as nx
from tavr import pipeline as pl
from tavr import sampler as sp
from tavr import toyworld as tw
from tavr import training as tr
from tavr import evalkit as ek
from tavr import tokenizer as tk
from tavr.config import preset_config
from tavr.numerics import Tensor, rng
from tavr.tokenizer import LatentGeometry, cost_report, count_tokens, TokenBudget

from _common import toy_context
from test_evalkit import _chamfer_loops, _identity, _psnr_loops
from test_model import _feats, _state
from test_numerics import _primitive_cases

FULL_GEO = LatentGeometry(c_s=8, c_t=4, p=2)


def _full_budget(**kw):
    return count_tokens(81, 480, 896, FULL_GEO, T_ref=20, **kw)


def test_c01_full_scale_token_budget(acceptance):
    b = _full_budget()
    got = (b.n_target, b.n_bg, b.n_ref, b.n_total)
    acceptance(1, "paper_scale preset token budget is exact", got == (35280, 1680, 8400, 45360),
               "target/bg/ref/total = " + "/".join(map(str, got)))


def test_c02_flops_model(acceptance):
    tfl = cost_report(_full_budget(), 5120).tflops
    # reported only: a split reaching 37,715 selected tokens with the background kept whole
    sel = TokenBudget(35280, 1680, 755, 0)
    sel_tfl = cost_report(sel, 5120).tflops
    ok = abs(tfl - 45.30) / 45.30 < 0.01
    acceptance(2, "45.30 TFLOPs within 1% at d=5120", ok,
               f"{tfl:.4f} TFLOPs ({100 * (tfl - 45.30) / 45.30:+.3f}%); selected split "
               f"n_total={sel.n_total} gives {sel_tfl:.2f} vs 36.56 ({100 * (sel_tfl - 36.56) / 36.56:+.2f}%, not gated)")


def test_c03_gradient_checks(acceptance):
    worst = {}
    with nx.precision(np.float64):
        for name, (f, x) in _primitive_cases().items():
            worst[name] = nx.grad_check(f, Tensor(np.array(x, dtype=np.float64), requires_grad=True), step=1e-6)
        cfg = M.ModelConfig(d=8, head_count=2, block_count=1, c_lat=3, L=2, d_audio=3, ffn_mult=2)
        params = M.init_params(cfg, seed=5, zero_init_outputs=False, dtype=np.float64)
        ctx, z = toy_context(cfg, T=2, T_ref=2)
        y = rng(12, "y").normal(size=z.shape)

        def loss(_):
            return nx.mean(nx.square(nx.sub(M.model_forward(params, cfg, ctx, z, 0.35), y)))
        worst["model_1_block"] = nx.grad_check(loss, list(params.values()), step=1e-3, points=4)
    name, err = max(worst.items(), key=lambda kv: kv[1])
    acceptance(3, "central-difference gradient checks < 1e-5 (float64)", err < 1e-5,
               f"{len(worst)} checks, worst {name} = {err:.2e}")


def test_c04_structural_invariants(acceptance):
    cfg = M.ModelConfig(d=16, head_count=2, block_count=1, c_lat=3)
    g = rng(11, "acc4")
    # (a) reference purity through a full block
    params = M.init_params(cfg, seed=4, zero_init_outputs=False)
    st, feats = _state(2, 3, 3, 3, 3, 16), _feats(16, 3, 3)
    t_emb = M.timestep_embedding(0.7, params, 16)
    w = M.block_params(params, 0)
    base = M.dit_block(st, feats, t_emb, w, cfg).tokens.data
    r0, r1 = st.range(tk.REFERENCE)
    pure = True
    for _ in range(5):
        x = st.tokens.data.copy()
        x[:r0] += g.normal(size=x[:r0].shape)
        out = M.dit_block(st.with_tokens(Tensor(x)), feats, t_emb, w, cfg).tokens.data
        pure &= bool(np.array_equal(out[r0:r1], base[r0:r1]))
    # (b) frame-wise audio locality
    d = 8
    st8 = _state(2, 4, 3, 3, 3, d)
    wa = {k: Tensor(g.normal(0, 1 / np.sqrt(d), (d, d))) for k in ("au_q", "au_k", "au_v", "au_o")}
    a_drv, a_ref = g.normal(size=(4, 3, d)), g.normal(size=(3, 3, d))
    ref_out = M.audio_cross_attention(st8, Tensor(a_drv), Tensor(a_ref), wa, 2, True).tokens.data
    local = True
    for j in range(4):
        pert = a_drv.copy()
        pert[j] += g.normal(size=pert[j].shape)
        out = M.audio_cross_attention(st8, Tensor(pert), Tensor(a_ref), wa, 2, True).tokens.data
        expect = (st8.origin == tk.TARGET) & (st8.coords[:, 0] == j)
        local &= bool(np.array_equal(np.any(out != ref_out, axis=1), expect))
    # (c) zero output projections make every block the identity
    zparams = M.init_params(cfg, seed=0)
    zt = M.timestep_embedding(0.3, zparams, 16)
    sz = _state(2, 3, 2, 2, 3, 16)
    ident = bool(np.array_equal(M.dit_block(sz, _feats(16, 3, 2), zt, M.block_params(zparams, 0), cfg).tokens.data,
                                sz.tokens.data))
    acceptance(4, "reference purity, audio locality, zero-output identity", pure and local and ident,
               f"purity={pure} locality={local} identity={ident}")


def test_c05_flow_matching_sanity(acceptance):
    g = rng(4, "acc5")
    z0 = g.normal(size=(2, 4, 4, 3))
    eps = g.normal(size=z0.shape)
    s0 = tr.make_flow_sample(z0, g, t=0.0, eps=eps)
    s1 = tr.make_flow_sample(z0, g, t=1.0, eps=eps)
    bounds = (np.array_equal(s0.z_t, z0) and np.array_equal(s1.z_t, eps)
              and np.array_equal(s0.y, eps - z0))
    euler = float(np.abs(sp.integrate(lambda z, t: eps - z0, eps, 1, "euler") - z0).max())
    cfg = M.ModelConfig(d=16, head_count=2, block_count=1, c_lat=3, L=2, d_audio=3)
    net = M.DiT(cfg, seed=3, zero_init_outputs=False)
    ctx, z = toy_context(cfg)
    ref = sp.flow_sample(net, ctx, sp.SamplerConfig(steps=256), z.shape)
    errs = [float(np.abs(sp.flow_sample(net, ctx, sp.SamplerConfig(steps=n), z.shape) - ref).mean())
            for n in (4, 8, 16, 32)]
    mono = all(a > b for a, b in zip(errs, errs[1:]))
    acceptance(5, "flow boundaries, oracle Euler step, monotone self-convergence",
               bounds and euler < 1e-6 and mono,
               f"boundaries={bounds} euler_err={euler:.1e} errs={['%.2e' % e for e in errs]}")


def test_c06_dpo_objective(acceptance):
    with nx.precision(np.float64):
        equal = float(tr.loss_dpo(0.37, 0.37, 500.0).data)
        case = float(tr.loss_dpo(0.0, 0.004, 500.0).data)
        g = rng(3, "acc6")
        shape = (2, 4, 4, 3)
        y_w, y_l, pf_w, pf_l = (g.normal(size=shape) for _ in range(4))
        m = np.zeros(shape)
        m[:, 1:3, :2] = 1.0

        def loss_and_grads(pw, pl_):
            pw, pl_ = Tensor(pw, requires_grad=True), Tensor(pl_, requires_grad=True)
            with nx.GradTape() as tape:
                tape.watch(pw)
                tape.watch(pl_)
                loss = tr.loss_dpo(tr.dpo_delta(pw, pf_w, y_w, m), tr.dpo_delta(pl_, pf_l, y_l, m), 2.0)
            gr = tape.backward(loss)
            return float(loss.data), gr[pw], gr[pl_]

        pw, pl_ = g.normal(size=shape), g.normal(size=shape)
        v0, gw0, gl0 = loss_and_grads(pw, pl_)
        noise = g.normal(size=shape) * (1 - m)
        v1, gw1, gl1 = loss_and_grads(pw + noise, pl_ - 2 * noise)
        invariant = v0 == v1 and np.array_equal(gw0, gw1) and np.array_equal(gl0, gl1)
    # a policy that equals its frozen copy starts Stage 3 at log 2
    toy = pl.setup_from(preset_config("toy", model__d=16, model__head_count=2, model__block_count=1,
                                      train__pool=4, train__batch_size=2, pairs__margin=0.0))
    model = pl.new_model(toy)
    frozen = tr.frozen_copy(model)
    ex = pl.encode(toy, pl.held_out(toy, "cross_scene", 1)[0])
    g2 = rng(0, "acc6-pair")
    pair = tr.PreferencePair(ex, ex.z0, ex.z0 + 0.1 * g2.normal(size=ex.z0.shape), ex.fg_mask, 1.0, 0.0)
    log = pl.run_stage(toy, 3, model, frozen=frozen, pairs=[pair], steps=1).log
    start = log[0]["dpo"]
    ok = (abs(equal - math.log(2)) < 1e-6 and abs(case - 0.313262) < 1e-6 and invariant
          and abs(start - math.log(2)) < 1e-6)
    acceptance(6, "DPO log 2 at equality, softplus(-1) case, masked invariance", ok,
               f"equal={equal:.8f} case={case:.6f} invariant={invariant} stage3_step0={start:.8f}")


# ---------------------------------------------------------------- toy pipeline

@pytest.fixture(scope="session")
def toy():
    return pl.setup_from(preset_config("toy"))


@pytest.fixture(scope="session")
def stage1(toy):
    model = pl.new_model(toy)
    t0 = time.time()
    pl.run_stage(toy, 1, model)
    return model, time.time() - t0


@pytest.fixture(scope="session")
def stage2(toy, stage1):
    model = pl.copy_model(stage1[0])
    pl.run_stage(toy, 2, model)
    return model


N_EVAL = 20


def test_c07_toy_pipeline(acceptance, toy, stage1):
    model, train_s = stage1
    t0 = time.time()
    rows = pl.toy_pipeline_metrics(model, toy, pl.held_out(toy, "same_scene", N_EVAL))
    total = train_s + time.time() - t0
    rho = float(np.mean([r["mouth_corr"] for r in rows]))
    margin = float(np.mean([r["id_margin"] for r in rows]))
    ok = rho >= 0.5 and margin >= 0.1 and total <= 1800
    acceptance(7, f"Stage-1 toy pipeline over {N_EVAL} held-out contexts", ok,
               f"rho={rho:.3f} (>=0.5) identity margin={margin:.3f} (>=0.1) runtime={total / 60:.1f} min (<=30)")


def test_c08_reference_length_trend(acceptance, toy, stage2):
    samples = pl.held_out(toy, "cross_scene", N_EVAL)
    rows = pl.reference_length_rows(stage2, toy, samples, [4, 16])
    by = {(r["index"], r["length"]): r["id_ref"] for r in rows}
    short = np.array([by[(s.index, 4)] for s in samples])
    long = np.array([by[(s.index, 16)] for s in samples])
    frac = float(np.mean(long > short))
    ok = long.mean() >= short.mean() and frac >= 0.6
    acceptance(8, "ID_ref at 16 reference frames >= at 4", ok,
               f"mean 4={short.mean():.4f} 16={long.mean():.4f}; strict improvement in {frac:.0%} of {N_EVAL} seeds")


def test_c09_stage3_effect(acceptance, toy, stage2):
    held = pl.held_out(toy, toy.cfg["eval.mode"], N_EVAL)
    base = pl.evaluate(stage2, toy, held)[0].id_ref
    frozen = tr.frozen_copy(stage2)
    pairs = pl.build_pairs(frozen, toy, toy.cfg["pairs.n_contexts"], seed=0)
    deltas = []
    for seed in range(5):
        m = pl.copy_model(stage2)
        pl.run_stage(toy, 3, m, frozen=frozen, pairs=pairs, seed=seed)
        deltas.append(pl.evaluate(m, toy, held)[0].id_ref - base)
    ok = bool(pairs) and min(deltas) >= -0.01 and float(np.mean(deltas)) > 0
    acceptance(9, "masked-DPO Stage 3 keeps ID_ref and improves it on average over 5 seeds", ok,
               f"Stage-2 ID_ref={base:.4f}, {len(pairs)} pairs, deltas={['%+.4f' % d for d in deltas]}")


def test_c10_metric_oracles(acceptance):
    g = rng(0, "acc10")
    cham = True
    for _ in range(100):
        d = int(g.integers(2, 9))
        a = ek.EmbeddingSequence.normalized(g.normal(size=(int(g.integers(1, 7)), d)))
        b = ek.EmbeddingSequence.normalized(g.normal(size=(int(g.integers(1, 7)), d)))
        cham &= abs(ek.chamfer_similarity(a, b) - _chamfer_loops(a.vectors.tolist(), b.vectors.tolist())) < 1e-12
    selfsim = ek.chamfer_similarity(a, a)
    x = np.zeros((2, 4, 4, 3))
    psnr = ek.masked_psnr(x, x + 0.1, np.zeros((4, 4), bool))
    audio = tw.synth_audio(2, 0)
    videos, truth = [], {}
    for k in range(12):
        for j in range(3):
            v = tw.render_video(_identity(k), tw.SceneSpec.random(rng(7, "scene", 3 * k + j)), audio, 2, 100 * k + j)
            vid = f"id{k:02d}_s{j}"
            videos.append(ek.BenchmarkVideo(vid, v.frames, ek.embed_video(v.frames, v.boxes), v.masks))
            truth[vid] = k
    by_id = {v.video_id: v for v in videos}
    expected = []
    for k in range(12):
        ids = sorted(v for v in truth if truth[v] == k)
        scored = []
        for a_id, b_id in itertools.combinations(ids, 2):
            m = by_id[a_id].subject_mask.any(axis=0) | by_id[b_id].subject_mask.any(axis=0)
            scored.append((_psnr_loops(by_id[a_id].frames, by_id[b_id].frames, np.broadcast_to(m, (2, 64, 64))),
                           a_id, b_id))
        expected.append(min(scored)[1:])
    got = sorted((p.reference_id, p.target_id) for p in ek.curate_pairs(videos))
    curate = got == sorted(expected)
    ok = cham and abs(selfsim - 1.0) < 1e-12 and abs(psnr - 20.0) < 1e-9 and curate
    acceptance(10, "Chamfer, masked PSNR and curation oracles", ok,
               f"chamfer_100={cham} self={selfsim:.12f} psnr={psnr:.12f} curation_12x3={curate}")


def _tree(root):
    # run manifests carry wall-clock timestamps and are compared separately
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and not p.name.endswith(".run.json")}


def test_c11_byte_identical_reruns(acceptance, tmp_path):
    short = ["--set", "stage1.steps=20", "--set", "eval.lengths=4,8", "--set", "sampler.steps=8"]
    trees = {}
    for run in ("a", "b"):
        root = tmp_path / run
        codes = [cli.run("gen-data", ["--out", str(root / "data"), "--n", "3", "--seed", "7"]),
                 cli.run("train", ["--out", str(root / "s1"), "--stage", "1", *short]),
                 cli.run("eval", ["--ckpt", str(root / "s1"), "--out", str(root / "eval"), "--n", "2", *short])]
        assert codes == [0, 0, 0]
        trees[run] = _tree(root)
    same = trees["a"] == trees["b"]
    n_files = len(trees["a"])
    acceptance(11, "reruns give byte-identical data, metrics and checkpoints", same,
               f"{n_files} files compared across gen-data, train and eval")
