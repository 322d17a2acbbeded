import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tavr import evalkit as ek
from tavr import toyworld as tw
from tavr.numerics import rng


def _unit_rows(g, n, d):
    v = g.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _chamfer_loops(a, b):
    def one_sided(x, y):
        total = 0.0
        for u in x:
            best = -math.inf
            for w in y:
                best = max(best, sum(p * q for p, q in zip(u, w)))
            total += best
        return total / len(x)
    return 0.5 * (one_sided(a, b) + one_sided(b, a))


def test_chamfer_matches_double_loop_on_100_cases():
    g = rng(0, "chamfer-cases")
    for _ in range(100):
        d = int(g.integers(2, 9))
        a, b = _unit_rows(g, int(g.integers(1, 7)), d), _unit_rows(g, int(g.integers(1, 7)), d)
        assert ek.chamfer_similarity(a, b) == pytest.approx(_chamfer_loops(a.tolist(), b.tolist()), abs=1e-12)


def test_chamfer_self_and_orthogonal():
    a = _unit_rows(rng(1, "x"), 5, 6)
    assert ek.chamfer_similarity(a, a) == pytest.approx(1.0, abs=1e-12)
    e = np.eye(4)
    assert ek.chamfer_similarity(e[:2], e[2:]) == pytest.approx(0.0, abs=1e-12)


def test_chamfer_directions():
    e = np.eye(3)
    a, b = e[:1], e[:2]
    assert ek.chamfer_similarity(a, b, "a_to_b") == pytest.approx(1.0)
    assert ek.chamfer_similarity(a, b, "b_to_a") == pytest.approx(0.5)
    assert ek.chamfer_similarity(a, b) == pytest.approx(0.75)
    with pytest.raises(ValueError):
        ek.chamfer_similarity(a, b, "sideways")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_chamfer_symmetric_and_permutation_invariant(seed, n, m):
    g = rng(seed, "prop")
    a, b = _unit_rows(g, n, 5), _unit_rows(g, m, 5)
    s = ek.chamfer_similarity(a, b)
    assert s == pytest.approx(ek.chamfer_similarity(b, a), abs=1e-12)
    assert s == pytest.approx(ek.chamfer_similarity(a[g.permutation(n)], b[g.permutation(m)]), abs=1e-12)
    assert -1.0 - 1e-12 <= s <= 1.0 + 1e-12


def test_embedding_sequence_validation():
    with pytest.raises(ValueError):
        ek.EmbeddingSequence(np.ones((2, 3)))
    with pytest.raises(ValueError):
        ek.EmbeddingSequence(np.zeros((0, 3)))
    seq = ek.EmbeddingSequence.normalized(np.ones((2, 3)))
    assert np.allclose(np.linalg.norm(seq.vectors, axis=1), 1.0)


def test_masked_psnr_known_case():
    a = np.zeros((2, 4, 4, 3))
    b = np.full_like(a, 0.1)          # MSE 0.01 everywhere
    mask = np.zeros((4, 4), bool)
    mask[1:3, 1:3] = True
    b[:, 1:3, 1:3] = 0.9              # inside the mask; must not matter
    assert ek.masked_psnr(a, b, mask) == pytest.approx(20.0, abs=1e-9)


def test_masked_psnr_identical_hits_cap_and_full_mask_errors():
    a = rng(2, "v").uniform(size=(2, 4, 4, 3))
    assert ek.masked_psnr(a, a, np.zeros((4, 4), bool)) == ek.PSNR_CAP
    with pytest.raises(ValueError):
        ek.masked_psnr(a, a, np.ones((4, 4), bool))
    with pytest.raises(ValueError):
        ek.masked_psnr(a, a[:1], np.zeros((4, 4), bool))


def _psnr_loops(a, b, mask):
    total, count = 0.0, 0
    T, H, W, C = a.shape
    for t in range(T):
        for y in range(H):
            for x in range(W):
                if mask[t, y, x]:
                    continue
                total += sum((a[t, y, x, c] - b[t, y, x, c]) ** 2 for c in range(C)) / C
                count += 1
    return 10.0 * math.log10(1.0 / (total / count))


@pytest.mark.parametrize("seed", range(5))
def test_masked_psnr_matches_pixel_loop(seed):
    g = rng(seed, "psnr")
    a, b = g.uniform(size=(2, 6, 5, 3)), g.uniform(size=(2, 6, 5, 3))
    mask = g.uniform(size=(2, 6, 5)) < 0.3
    assert ek.masked_psnr(a, b, mask) == pytest.approx(_psnr_loops(a, b, mask), abs=1e-9)


def _identity(k):
    # evenly spaced hues and alternating tones keep the 12 identities far apart
    return tw.IdentitySpec((k / 12, 0.2 + 0.6 * (k % 2), 0.5, 0.5, 0.5, 0.5, ((k * 5) % 12) / 12, 0.5))


@pytest.fixture(scope="module")
def benchmark_videos():
    videos, truth = [], {}
    audio = tw.synth_audio(2, 0)
    for k in range(12):
        for j in range(3):
            scene = tw.SceneSpec.random(rng(7, "scene", 3 * k + j))
            v = tw.render_video(_identity(k), scene, audio, 2, motion_seed=100 * k + j)
            vid = f"id{k:02d}_s{j}"
            videos.append(ek.BenchmarkVideo(vid, v.frames, ek.embed_video(v.frames, v.boxes), v.masks))
            truth[vid] = k
    return videos, truth


def test_curation_equals_brute_force_argmin(benchmark_videos):
    videos, truth = benchmark_videos
    groups = ek.identity_groups(videos)
    assert sorted(tuple(g) for g in groups) == sorted(
        tuple(sorted(v for v in truth if truth[v] == k)) for k in range(12))
    by_id = {v.video_id: v for v in videos}
    expected = {}
    for k in range(12):
        ids = sorted(v for v in truth if truth[v] == k)
        scored = []
        for a, b in itertools.combinations(ids, 2):
            m = by_id[a].subject_mask.any(axis=0) | by_id[b].subject_mask.any(axis=0)
            m3 = np.broadcast_to(m, by_id[a].frames.shape[:3])
            scored.append((_psnr_loops(by_id[a].frames, by_id[b].frames, m3), a, b))
        expected[k] = min(scored)
    got = ek.curate_pairs(videos)
    assert len(got) == 12
    for pair in got:
        k = truth[pair.reference_id]
        assert truth[pair.target_id] == k
        p, a, b = expected[k]
        assert (pair.reference_id, pair.target_id) == (a, b)
        assert pair.psnr == pytest.approx(p, abs=1e-9)


def test_curation_independent_of_input_order(benchmark_videos):
    videos, _ = benchmark_videos
    shuffled = [videos[i] for i in rng(3, "order").permutation(len(videos))]
    key = lambda ps: [(p.reference_id, p.target_id, p.psnr) for p in ps]
    assert key(ek.curate_pairs(shuffled)) == key(ek.curate_pairs(videos))


def test_curation_single_video_and_tie_rule():
    e = np.eye(2)[:1]
    frames = np.zeros((1, 2, 2, 3))
    mask = np.zeros((1, 2, 2), bool)
    one = ek.BenchmarkVideo("a", frames, ek.EmbeddingSequence(e), mask)
    assert ek.curate_pairs([one]) == []
    # three identical videos: every pair ties, so the smallest id pair wins
    vids = [ek.BenchmarkVideo(n, frames, ek.EmbeddingSequence(e), mask) for n in ("c", "a", "b")]
    (pair,) = ek.curate_pairs(vids)
    assert (pair.reference_id, pair.target_id) == ("a", "b")
    assert pair.psnr == ek.PSNR_CAP
    with pytest.raises(ValueError):
        ek.BenchmarkPair("a", "a", 0, 1.0, 1.0)


def test_identity_eval_cases():
    e = np.eye(3)
    assert ek.identity_eval(e[:1], e[:1], e[1:2]) == pytest.approx((1.0, 0.0))
    emb = lambda v: ek.EmbeddingSequence.normalized(v)
    ref, tgt = ek.identity_eval(np.ones((2, 3)), np.ones((1, 3)), -np.ones((1, 3)), embedder=emb)
    assert ref == pytest.approx(1.0) and tgt == pytest.approx(-1.0)


def test_oracle_embedding_separates_true_from_mismatched_identity():
    s = tw.make_sample(0, "cross_scene", 3)
    gen = ek.embed_video(s.target.frames, s.target.boxes)
    other = tw.render_video(tw.mismatched_identity(s.identity), s.target_scene, s.drv_audio, len(s.target),
                            s.seeds["motion_t"])
    ref = ek.embed_video(s.reference.frames, s.reference.boxes)
    assert ek.chamfer_similarity(gen, ref) > ek.chamfer_similarity(gen, ek.embed_video(other.frames, other.boxes)) + 0.1


def test_mouth_audio_corr_on_render():
    audio = tw.synth_audio(16, 5)
    v = tw.render_video(tw.IdentitySpec.random(rng(0, "i")), tw.SceneSpec.random(rng(0, "s")), audio, 16, 3)
    assert ek.mouth_audio_corr(v.frames, v.boxes, audio.envelope) > 0.95
    assert ek.mouth_audio_corr(v.frames, v.boxes, audio.envelope[::-1]) < ek.mouth_audio_corr(
        v.frames, v.boxes, audio.envelope)
    assert ek.mouth_audio_corr(v.frames, v.boxes, -audio.envelope) < -0.95
    with pytest.raises(ValueError):
        ek.mouth_audio_corr(v.frames, v.boxes, np.ones(16))
    with pytest.raises(ValueError):
        ek.mouth_audio_corr(v.frames, v.boxes, audio.envelope[:3])
    still = np.repeat(v.frames[:1], 16, axis=0)
    assert ek.mouth_audio_corr(still, np.repeat(v.boxes[:1], 16, axis=0), audio.envelope) == 0.0


def test_evaluate_cases_and_report():
    s = tw.make_sample(1, "same_scene", 2)
    emb = ek.embed_video(s.target.frames, s.target.boxes)
    case = ek.EvalCase(s.target.frames, s.target.boxes, s.drv_audio.envelope, emb, emb)
    report, rows = ek.evaluate_cases([case, case], tokens={"n_total": 7})
    assert report.n == 2 and report.tokens == {"n_total": 7}
    assert report.id_ref == pytest.approx(1.0) and report.id_target == pytest.approx(1.0)
    assert len(rows) == 2 and rows[0] == rows[1]
    flat = ek.EvalCase(s.target.frames, s.target.boxes, np.ones(len(s.target)), emb, emb)
    rep2, rows2 = ek.evaluate_cases([flat])
    assert math.isnan(rows2[0]["mouth_corr"]) and math.isnan(rep2.mouth_corr)
    with pytest.raises(ValueError):
        ek.evaluate_cases([])
    with pytest.raises(ValueError):
        ek.EvalReport(1.5, 0.0, 0.0)


def test_reference_length_sweep_rows_and_csv():
    s = tw.make_sample(0, "same_scene", 4)
    gen = ek.embed_video(s.target.frames, s.target.boxes)
    seen = []

    def run_case(ctx, n):
        seen.append((ctx, n))
        return ek.EvalCase(s.target.frames, s.target.boxes, s.drv_audio.envelope, gen, gen)

    rows = ek.reference_length_sweep(run_case, ["a", "b"], [16, 4, 8])
    assert [r["length"] for r in rows] == [16, 4, 8]
    assert seen == [("a", 16), ("b", 16), ("a", 4), ("b", 4), ("a", 8), ("b", 8)]
    lines = ek.table_csv(rows).splitlines()
    assert lines[0] == "length,id_ref,id_target,mouth_corr"
    assert len(lines) == 4 and lines[1].startswith("16,")
    assert float(lines[1].split(",")[1]) == pytest.approx(1.0)
