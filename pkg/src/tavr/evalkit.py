"""Identity, background and lip-sync metrics plus cross-scene pair curation."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import toyworld as tw

PSNR_CAP = 100.0
TAU_ID = 0.85


@dataclass(frozen=True)
class EmbeddingSequence:
    """Per-frame unit embeddings, shape (frames, dim)."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or len(v) == 0:
            raise ValueError("embedding sequence must be a nonempty (frames, dim) array")
        if np.abs(np.linalg.norm(v, axis=1) - 1.0).max() > 1e-6:
            raise ValueError("embedding rows must be unit vectors")
        object.__setattr__(self, "vectors", v)

    def __len__(self):
        return len(self.vectors)

    @classmethod
    def normalized(cls, rows) -> "EmbeddingSequence":
        v = np.asarray(rows, dtype=np.float64)
        return cls(v / np.linalg.norm(v, axis=1, keepdims=True))


def _as_seq(x) -> EmbeddingSequence:
    return x if isinstance(x, EmbeddingSequence) else EmbeddingSequence(x)


def chamfer_similarity(a, b, direction: str = "both") -> float:
    """Average best-match cosine similarity between two frame-embedding sets.

    ``direction`` is "both" (mean of the two one-sided scores), "a_to_b" or
    "b_to_a".
    """
    a, b = _as_seq(a), _as_seq(b)
    sim = a.vectors @ b.vectors.T
    ab = float(sim.max(axis=1).mean())
    ba = float(sim.max(axis=0).mean())
    if direction == "both":
        return 0.5 * (ab + ba)
    if direction == "a_to_b":
        return ab
    if direction == "b_to_a":
        return ba
    raise ValueError(f"unknown direction {direction!r}")


def masked_psnr(video_a, video_b, union_subject_mask) -> float:
    """PSNR over pixels outside the subject mask, for data in [0, 1].

    The mask is (H, W) or (T, H, W) and broadcasts over frames and channels.
    """
    a, b = np.asarray(video_a, dtype=np.float64), np.asarray(video_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    m = np.asarray(union_subject_mask, dtype=bool)
    spatial = a.shape[:-1] if a.ndim >= 3 and a.shape[-1] in (1, 3) else a.shape
    valid = ~np.broadcast_to(m, spatial)
    if not valid.any():
        raise ValueError("subject mask covers every pixel; no background to compare")
    diff = (a - b) ** 2
    if diff.ndim > valid.ndim:
        diff = diff.mean(axis=-1)
    mse = float(diff[valid].mean())
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@dataclass(frozen=True)
class BenchmarkPair:
    reference_id: str
    target_id: str
    identity: int
    psnr: float
    similarity: float

    def __post_init__(self):
        if self.reference_id == self.target_id:
            raise ValueError("reference and target must be different videos")


@dataclass
class BenchmarkVideo:
    """Curation input: one clip with its embeddings and subject masks."""

    video_id: str
    frames: np.ndarray
    embeddings: EmbeddingSequence
    subject_mask: np.ndarray     # (T, H, W) or (H, W)


def _union_mask(m) -> np.ndarray:
    m = np.asarray(m, dtype=bool)
    return m.any(axis=0) if m.ndim == 3 else m


def identity_groups(videos: Sequence[BenchmarkVideo], tau_id: float = TAU_ID) -> list:
    """Connected components of the graph linking videos with similarity >= tau_id.

    Groups are returned as sorted id lists, ordered by their first id.
    """
    ids = sorted(v.video_id for v in videos)
    if len(set(ids)) != len(ids):
        raise ValueError("video ids must be unique")
    by_id = {v.video_id: v for v in videos}
    parent = {i: i for i in ids}

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in itertools.combinations(ids, 2):
        if chamfer_similarity(by_id[a].embeddings, by_id[b].embeddings) >= tau_id:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict = {}
    for i in ids:
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def curate_pairs(videos: Sequence[BenchmarkVideo], tau_id: float = TAU_ID) -> list:
    """Per identity group, keep the pair with the lowest masked background PSNR.

    Ties go to the lexicographically smaller (id_a, id_b). The group index
    is used as the identity label.
    """
    by_id = {v.video_id: v for v in videos}
    out = []
    for label, group in enumerate(identity_groups(videos, tau_id)):
        best = None
        for a, b in itertools.combinations(group, 2):
            va, vb = by_id[a], by_id[b]
            mask = _union_mask(va.subject_mask) | _union_mask(vb.subject_mask)
            p = masked_psnr(va.frames, vb.frames, mask)
            if best is None or (p, a, b) < best[:3]:
                best = (p, a, b, chamfer_similarity(va.embeddings, vb.embeddings))
        if best is not None:
            out.append(BenchmarkPair(best[1], best[2], label, best[0], best[3]))
    return out


def embed_video(frames, boxes, embedder: Callable = tw.oracle_identity_embed) -> EmbeddingSequence:
    return EmbeddingSequence(np.stack([embedder(f, b) for f, b in zip(frames, boxes)]))


def identity_eval(generated, reference, target, embedder: Optional[Callable] = None) -> tuple:
    """(ID_ref, ID_target): Chamfer similarity of generated embeddings to each.

    Inputs that are not EmbeddingSequences are passed through ``embedder``
    (video -> EmbeddingSequence) first.
    """
    def emb(v):
        if isinstance(v, EmbeddingSequence):
            return v
        if embedder is None:
            return EmbeddingSequence(v)
        return embedder(v)
    g = emb(generated)
    return chamfer_similarity(g, emb(reference)), chamfer_similarity(g, emb(target))


def mouth_audio_corr(frames, boxes, envelope) -> float:
    """Pearson correlation of per-frame mouth aperture with the audio envelope."""
    env = np.asarray(envelope, dtype=np.float64)
    if len(env) != len(frames):
        raise ValueError("envelope length must match frame count")
    if np.ptp(env) == 0:
        raise ValueError("constant envelope; correlation undefined")
    ap = np.array([tw.mouth_aperture_readout(f, b) for f, b in zip(frames, boxes)])
    if np.ptp(ap) == 0:
        return 0.0
    return float(np.corrcoef(ap, env)[0, 1])


@dataclass
class EvalReport:
    id_ref: float
    id_target: float
    mouth_corr: float
    n: int = 0
    tokens: dict = field(default_factory=dict)

    def __post_init__(self):
        for v in (self.id_ref, self.id_target):
            if not -1.0 - 1e-9 <= v <= 1.0 + 1e-9:
                raise ValueError("similarities must lie in [-1, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalCase:
    """One generated clip with everything the metrics need."""

    generated: np.ndarray
    boxes: np.ndarray            # boxes used to read the generated frames
    envelope: np.ndarray
    reference: EmbeddingSequence
    target: EmbeddingSequence


def evaluate_cases(cases: Sequence[EvalCase], tokens: Optional[dict] = None) -> tuple:
    """Returns (EvalReport over all cases, list of per-case dicts)."""
    rows = []
    for c in cases:
        gen = embed_video(c.generated, c.boxes)
        id_ref, id_tgt = identity_eval(gen, c.reference, c.target)
        try:
            rho = mouth_audio_corr(c.generated, c.boxes, c.envelope)
        except ValueError:
            rho = float("nan")
        rows.append({"id_ref": id_ref, "id_target": id_tgt, "mouth_corr": rho})
    if not rows:
        raise ValueError("no cases to evaluate")
    rhos = [r["mouth_corr"] for r in rows if np.isfinite(r["mouth_corr"])]
    report = EvalReport(float(np.mean([r["id_ref"] for r in rows])), float(np.mean([r["id_target"] for r in rows])),
                        float(np.mean(rhos)) if rhos else float("nan"), len(rows), dict(tokens or {}))
    return report, rows


SWEEP_COLUMNS = ("length", "id_ref", "id_target", "mouth_corr")


def reference_length_sweep(run_case: Callable, contexts: Sequence, lengths: Sequence[int]) -> list:
    """Evaluate the same contexts at each reference length.

    ``run_case(context, length)`` must return an EvalCase for the context
    with its reference clip set to ``length`` frames. Rows come back in the
    order of ``lengths``.
    """
    table = []
    for n in lengths:
        report, _ = evaluate_cases([run_case(c, int(n)) for c in contexts])
        table.append({"length": int(n), "id_ref": report.id_ref, "id_target": report.id_target,
                      "mouth_corr": report.mouth_corr})
    return table


def table_csv(rows: Sequence[dict], columns: Sequence[str] = SWEEP_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return buf.getvalue()
