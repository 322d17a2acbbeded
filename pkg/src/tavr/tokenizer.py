"""Latent token grids, positional codes, box-based token selection and the
analytic attention cost model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numerics import Tensor

TARGET, BACKGROUND, REFERENCE, MOTION = 0, 1, 2, 3
ORIGIN_NAMES = {TARGET: "target", BACKGROUND: "background", REFERENCE: "reference", MOTION: "motion"}
# reference frames live on their own temporal stream, far from target indices
REF_TIME_OFFSET = 100
# backbone width used by the full-scale cost model
FULL_SCALE_WIDTH = 5120


@dataclass(frozen=True)
class LatentGeometry:
    c_s: int = 8
    c_t: int = 1
    p: int = 2
    target_temporal_convention: str = "first_frame_plus"

    def __post_init__(self):
        if min(self.c_s, self.c_t, self.p) < 1:
            raise ValueError("compression factors and patch size must be positive")
        if self.target_temporal_convention not in ("first_frame_plus", "plain"):
            raise ValueError(f"unknown temporal convention {self.target_temporal_convention!r}")

    @property
    def cell(self) -> int:
        """Pixel side length covered by one token."""
        return self.c_s * self.p

    def latent_frames(self, T: int, convention: str) -> int:
        if T == 0:
            return 0
        if convention == "first_frame_plus":
            if (T - 1) % self.c_t:
                raise ValueError(f"{T} frames is not 1 + k*{self.c_t}")
            return 1 + (T - 1) // self.c_t
        if convention == "plain":
            if T % self.c_t:
                raise ValueError(f"{T} frames is not a multiple of {self.c_t}")
            return T // self.c_t
        raise ValueError(f"unknown temporal convention {convention!r}")

    def tokens_per_frame(self, H: int, W: int) -> int:
        if H % self.cell or W % self.cell:
            raise ValueError(f"frame {H}x{W} not divisible into {self.cell}-pixel tokens")
        return (H // self.cell) * (W // self.cell)


@dataclass
class TokenGrid:
    tokens: object            # (N, d) ndarray or Tensor
    coords: np.ndarray        # (N, 3) int (t, row, col)
    origin: np.ndarray        # (N,) int tags

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.origin = np.asarray(self.origin, dtype=np.int64).reshape(-1)
        n = self.tokens.shape[0]
        if self.coords.shape[0] != n or self.origin.shape[0] != n:
            raise ValueError("token, coord and origin counts disagree")

    def __len__(self):
        return self.coords.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def take(self, idx) -> "TokenGrid":
        idx = np.asarray(idx, dtype=np.int64)
        return TokenGrid(self.tokens[idx], self.coords[idx], self.origin[idx])

    def of(self, origin: int) -> "TokenGrid":
        return self.take(np.nonzero(self.origin == origin)[0])

    def with_tokens(self, tokens) -> "TokenGrid":
        return TokenGrid(tokens, self.coords, self.origin)

    def coords_unique(self) -> bool:
        for o in np.unique(self.origin):
            c = self.coords[self.origin == o]
            if len(np.unique(c, axis=0)) != len(c):
                return False
        return True


def concat_grids(grids: Sequence[TokenGrid]) -> TokenGrid:
    from . import numerics as nx
    grids = [g for g in grids if len(g)]
    if not grids:
        raise ValueError("nothing to concatenate")
    toks = [g.tokens for g in grids]
    if any(isinstance(t, Tensor) for t in toks):
        tokens = nx.concat([nx.as_tensor(t) for t in toks], axis=0)
    else:
        tokens = np.concatenate(toks, axis=0)
    return TokenGrid(tokens, np.concatenate([g.coords for g in grids]), np.concatenate([g.origin for g in grids]))


def patchify(latent, geometry: LatentGeometry, origin: int = TARGET, t_offset: int = 0,
             proj: Optional[np.ndarray] = None) -> TokenGrid:
    """Cut (T_lat, H_lat, W_lat, C) latents into p x p patches.

    Patch vectors are flattened (row, col, channel) and optionally mapped by
    ``proj`` of shape (p*p*C, d).
    """
    z = np.asarray(latent)
    if z.ndim != 4:
        raise ValueError("latent must be (T, H, W, C)")
    T, h, w, C = z.shape
    p = geometry.p
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide latent {h}x{w}")
    hp, wp = h // p, w // p
    tok = z.reshape(T, hp, p, wp, p, C).transpose(0, 1, 3, 2, 4, 5).reshape(T * hp * wp, p * p * C)
    tt, rr, cc = np.meshgrid(np.arange(T), np.arange(hp), np.arange(wp), indexing="ij")
    coords = np.stack([tt.ravel() + t_offset, rr.ravel(), cc.ravel()], axis=1)
    if proj is not None:
        tok = tok @ proj
    return TokenGrid(tok, coords, np.full(len(coords), origin))


def unpatchify(grid: TokenGrid, geometry: LatentGeometry, shape: tuple, t_offset: int = 0) -> np.ndarray:
    """Inverse of :func:`patchify` for raw (unprojected) tokens."""
    T, h, w, C = shape
    p = geometry.p
    tok = grid.tokens.data if isinstance(grid.tokens, Tensor) else np.asarray(grid.tokens)
    if tok.shape[1] != p * p * C:
        raise ValueError("tokens are not raw patches of the requested shape")
    out = np.zeros((T, h // p, w // p, p, p, C), dtype=tok.dtype)
    t = grid.coords[:, 0] - t_offset
    out[t, grid.coords[:, 1], grid.coords[:, 2]] = tok.reshape(-1, p, p, C)
    return out.transpose(0, 1, 3, 2, 4, 5).reshape(T, h, w, C)


def _axis_split(d: int) -> tuple:
    if d < 6 or d % 2:
        raise ValueError("positional width must be even and at least 6")
    a = 2 * (d // 6)
    return a, a, d - 2 * a


def _sincos(x: np.ndarray, width: int) -> np.ndarray:
    half = width // 2
    freq = 10000.0 ** (-np.arange(half) / max(half, 1))
    ang = x[:, None].astype(np.float64) * freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def positional_codes(coords: np.ndarray, d: int) -> np.ndarray:
    """Factorized sinusoidal code: [sin|cos](t), [sin|cos](row), [sin|cos](col).

    Coordinate (0, 0, 0) maps to zeros in every sine half and ones in every
    cosine half.
    """
    coords = np.asarray(coords).reshape(-1, 3)
    parts = _axis_split(d)
    return np.concatenate([_sincos(coords[:, i], parts[i]) for i in range(3)], axis=1)


def add_positional(grid: TokenGrid) -> TokenGrid:
    pe = positional_codes(grid.coords, grid.dim)
    tok = grid.tokens
    if isinstance(tok, Tensor):
        pe = pe.astype(tok.data.dtype)
        return grid.with_tokens(tok + Tensor(pe))
    return grid.with_tokens(np.asarray(tok) + pe.astype(np.asarray(tok).dtype))


def boxes_to_latent(boxes_px: np.ndarray, geometry: LatentGeometry, convention: str = "plain") -> np.ndarray:
    """Map per-pixel-frame boxes to per-latent-frame boxes in latent units.

    Frames folded into one latent frame contribute the union of their boxes.
    """
    b = np.asarray(boxes_px, dtype=np.float64).reshape(-1, 4)
    T = len(b)
    n_lat = geometry.latent_frames(T, convention)
    groups = []
    if convention == "first_frame_plus":
        groups.append([0])
        groups += [list(range(1 + k * geometry.c_t, 1 + (k + 1) * geometry.c_t)) for k in range(n_lat - 1)]
    else:
        groups = [list(range(k * geometry.c_t, (k + 1) * geometry.c_t)) for k in range(n_lat)]
    out = np.empty((n_lat, 4))
    for k, grp in enumerate(groups):
        g = b[grp]
        out[k] = (g[:, 0].min(), g[:, 1].min(), g[:, 2].max(), g[:, 3].max())
    return out / geometry.c_s


def select_reference_tokens(grid: TokenGrid, boxes: np.ndarray, geometry: LatentGeometry,
                            t_offset: int = REF_TIME_OFFSET) -> TokenGrid:
    """Keep reference tokens whose patch center lies inside its frame's box.

    ``boxes`` holds one (x0, y0, x1, y1) per latent frame, in latent units.
    Containment is closed on both ends.
    """
    if np.any(grid.origin != REFERENCE):
        raise ValueError("reference selection applies to reference tokens only")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    t = grid.coords[:, 0] - t_offset
    if len(t) and (t.min() < 0 or t.max() >= len(boxes)):
        raise ValueError("a reference frame has no face box")
    p = geometry.p
    cx = (grid.coords[:, 2] + 0.5) * p
    cy = (grid.coords[:, 1] + 0.5) * p
    b = boxes[t]
    keep = (cx >= b[:, 0]) & (cx <= b[:, 2]) & (cy >= b[:, 1]) & (cy <= b[:, 3])
    if len(grid) and not keep.any():
        raise ValueError("face boxes select no reference tokens")
    return grid.take(np.nonzero(keep)[0])


def mask_background_tokens(grid: TokenGrid, subject_mask: np.ndarray, geometry: LatentGeometry) -> TokenGrid:
    """Drop background tokens whose whole pixel cell is covered by the subject mask."""
    m = np.asarray(subject_mask, dtype=bool)
    cell = geometry.cell
    H, W = m.shape
    if H % cell or W % cell:
        raise ValueError("mask size not divisible into token cells")
    full = m.reshape(H // cell, cell, W // cell, cell).all(axis=(1, 3))
    keep = ~full[grid.coords[:, 1], grid.coords[:, 2]]
    return grid.take(np.nonzero(keep)[0])


@dataclass(frozen=True)
class TokenBudget:
    n_target: int
    n_bg: int
    n_ref: int
    n_motion: int = 0

    def __post_init__(self):
        for k in ("n_target", "n_bg", "n_ref", "n_motion"):
            v = getattr(self, k)
            if int(v) != v or v < 0:
                raise ValueError(f"{k} must be a nonnegative integer")

    @property
    def n_total(self) -> int:
        return self.n_target + self.n_bg + self.n_ref + self.n_motion

    @property
    def n_queries_step1(self) -> int:
        return self.n_target + self.n_motion + self.n_bg

    def as_dict(self) -> dict:
        return {"n_target": self.n_target, "n_bg": self.n_bg, "n_ref": self.n_ref,
                "n_motion": self.n_motion, "n_total": self.n_total}


def count_tokens(T: int, H: int, W: int, geometry: LatentGeometry, T_ref: int = 0,
                 motion_latent_frames: int = 0, background: bool = True,
                 ref_keep_fraction: float = 1.0, bg_keep_fraction: float = 1.0) -> TokenBudget:
    """Exact token accounting for one generation call.

    Keep fractions model box selection; counts are rounded to integers.
    """
    per = geometry.tokens_per_frame(H, W)
    n_target = geometry.latent_frames(T, geometry.target_temporal_convention) * per
    n_ref = geometry.latent_frames(T_ref, "plain") * per
    n_bg = per if background else 0
    if not (0.0 <= ref_keep_fraction <= 1.0 and 0.0 <= bg_keep_fraction <= 1.0):
        raise ValueError("keep fractions must lie in [0, 1]")
    return TokenBudget(n_target, int(round(n_bg * bg_keep_fraction)), int(round(n_ref * ref_keep_fraction)),
                       motion_latent_frames * per)


@dataclass(frozen=True)
class CostReport:
    budget: TokenBudget
    d: int
    projections: float
    step1: float
    step2: float

    @property
    def flops(self) -> float:
        return self.projections + self.step1 + self.step2

    @property
    def tflops(self) -> float:
        return self.flops / 1e12

    def as_dict(self) -> dict:
        return {**self.budget.as_dict(), "d": self.d, "flops_projections": self.projections,
                "flops_step1": self.step1, "flops_step2": self.step2,
                "flops": self.flops, "tflops": self.tflops}


def cost_report(budget: TokenBudget, d: int) -> CostReport:
    n = budget.n_total
    return CostReport(budget, d, 8.0 * n * d * d, 4.0 * budget.n_queries_step1 * n * d,
                      4.0 * budget.n_ref ** 2 * d)


def flops_ref_self_attn(budget: TokenBudget, d: int) -> float:
    """Multiply-add FLOPs (counted as 2) of one two-step reference self-attention."""
    return cost_report(budget, d).flops
