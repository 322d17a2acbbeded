"""Procedural talking-avatar videos with analytic oracles.

Everything here is a pure function of its specs and seeds. Faces are
ellipses whose mouth opening follows an audio envelope; identity lives in
eight scalars, scenes in a background texture plus a lighting level.

The oracle embedder and mouth readout stand in for pretrained perception
models, and :class:`ToyCodec` is a fixed linear latent codec.
"""
from __future__ import annotations

import colorsys
import functools
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .numerics import rng

MOUTH_RGB = np.array([0.30, 0.02, 0.06])
EYE_RGB = np.array([0.05, 0.05, 0.08])
EMBED_DIM = 15
N_MOTION = 2
# mouth area at full opening, as a fraction of pi * face_a * face_b
MOUTH_AREA_FRAC = 0.09
MOUTH_MIN_OPEN = 0.1
MOUTH_Y = 0.3
MAX_ENVELOPE_STEP = 0.35


@dataclass(frozen=True)
class WorldConfig:
    H: int = 64
    W: int = 64
    T: int = 8
    L: int = 4
    d_audio: int = 8
    ref_min: int = 12
    ref_max: int = 20
    audio_seed: int = 1234

    def __post_init__(self):
        if self.H % 16 or self.W % 16:
            raise ValueError("frame height and width must be multiples of 16")


@dataclass(frozen=True)
class IdentitySpec:
    """face hue, skin tone, face width, face height, eye spacing, mouth width, hair tone, outline."""

    id_vector: tuple

    def __post_init__(self):
        v = tuple(float(x) for x in self.id_vector)
        if len(v) != 8 or min(v) < 0.0 or max(v) > 1.0:
            raise ValueError("identity vector needs 8 components in [0, 1]")
        object.__setattr__(self, "id_vector", v)

    @classmethod
    def random(cls, g: np.random.Generator) -> "IdentitySpec":
        return cls(tuple(g.uniform(0.0, 1.0, 8)))

    face_hue = property(lambda s: s.id_vector[0])
    skin_tone = property(lambda s: s.id_vector[1])
    face_width = property(lambda s: s.id_vector[2])
    face_height = property(lambda s: s.id_vector[3])
    eye_spacing = property(lambda s: s.id_vector[4])
    mouth_width = property(lambda s: s.id_vector[5])
    hair_tone = property(lambda s: s.id_vector[6])
    outline = property(lambda s: s.id_vector[7])


@dataclass(frozen=True)
class SceneSpec:
    texture: tuple
    lighting: float

    def __post_init__(self):
        tex = tuple(float(x) for x in self.texture)
        if len(tex) != 3:
            raise ValueError("scene texture needs 3 parameters")
        if not 0.3 <= self.lighting <= 1.0:
            raise ValueError("lighting must lie in [0.3, 1.0]")
        object.__setattr__(self, "texture", tex)

    @classmethod
    def random(cls, g: np.random.Generator) -> "SceneSpec":
        tex = tuple(g.uniform(0.0, 1.0, 3))
        return cls(tex, float(g.uniform(0.3, 1.0)))

    def descriptor(self) -> np.ndarray:
        """Low-dimensional text-prompt stand-in."""
        return np.array([*self.texture, self.lighting], dtype=np.float64)


@dataclass
class AudioTrack:
    envelope: np.ndarray  # (T,)
    features: np.ndarray  # (T, L, d_audio)

    def __len__(self):
        return len(self.envelope)

    def slice(self, start: int, stop: int) -> "AudioTrack":
        return AudioTrack(self.envelope[start:stop], self.features[start:stop])


@dataclass
class RenderedVideo:
    frames: np.ndarray  # (T, H, W, 3) in [0, 1]
    boxes: np.ndarray   # (T, 4) float x0, y0, x1, y1
    masks: np.ndarray   # (T, H, W) bool subject pixels

    def __len__(self):
        return len(self.frames)

    def slice(self, start: int, stop: int) -> "RenderedVideo":
        return RenderedVideo(self.frames[start:stop], self.boxes[start:stop], self.masks[start:stop])


# ---------------------------------------------------------------- audio

@functools.lru_cache(maxsize=8)
def _audio_projection(L: int, d_audio: int, seed: int):
    g = rng(seed, "audio-projection")
    P = g.normal(0.0, 1.0 / np.sqrt(5.0), size=(L, d_audio, 5))
    b = g.normal(0.0, 0.2, size=(L, d_audio))
    return P, b


def audio_features(envelope: np.ndarray, L: int = 4, d_audio: int = 8, seed: int = 1234) -> np.ndarray:
    """Project 5-frame envelope windows through a fixed seeded matrix."""
    e = np.asarray(envelope, dtype=np.float64)
    padded = np.pad(e, 2, mode="edge")
    win = np.stack([padded[i:i + len(e)] for i in range(5)], axis=-1)  # (T, 5)
    P, b = _audio_projection(L, d_audio, seed)
    return np.einsum("tw,ldw->tld", win, P) + b


def synth_audio(T: int, seed: int, L: int = 4, d_audio: int = 8, proj_seed: int = 1234) -> AudioTrack:
    """Band-limited syllabic envelope in [0, 1] plus its feature blocks."""
    if T < 1:
        raise ValueError("T must be >= 1")
    g = rng(seed, "audio")
    f = g.uniform(0.07, 0.2, 2)
    ph = g.uniform(0.0, 2 * np.pi, 2)
    amp = g.uniform(0.25, 0.45, 2)
    noise = g.uniform(-0.15, 0.15, T)
    t = np.arange(T)
    raw = 0.5 + amp[0] * np.sin(2 * np.pi * f[0] * t + ph[0]) + amp[1] * np.sin(2 * np.pi * f[1] * t + ph[1]) + noise
    raw = np.clip(raw, 0.0, 1.0)
    env = np.empty(T)
    env[0] = raw[0]
    for i in range(1, T):
        step = np.clip(raw[i] - env[i - 1], -MAX_ENVELOPE_STEP, MAX_ENVELOPE_STEP)
        env[i] = np.clip(env[i - 1] + step, 0.0, 1.0)
    return AudioTrack(env, audio_features(env, L, d_audio, proj_seed))


def constant_audio(T: int, value: float, L: int = 4, d_audio: int = 8, proj_seed: int = 1234) -> AudioTrack:
    env = np.full(T, float(value))
    return AudioTrack(env, audio_features(env, L, d_audio, proj_seed))


# ---------------------------------------------------------------- rendering

def _hsv(h, s, v) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def identity_colors(ident: IdentitySpec) -> dict:
    face = _hsv(ident.face_hue, 0.25 + 0.4 * ident.skin_tone, 0.9 - 0.3 * ident.skin_tone)
    hair = _hsv(ident.face_hue + 0.35 + 0.3 * ident.hair_tone, 0.65, 0.2 + 0.55 * ident.hair_tone)
    torso = _hsv(ident.face_hue + 0.6 + 0.2 * ident.skin_tone, 0.55, 0.35 + 0.4 * (1 - ident.hair_tone))
    return {"face": face, "hair": hair, "torso": torso, "outline": face * 0.45}


def face_geometry(ident: IdentitySpec, H: int, W: int) -> dict:
    fa = (0.15 + 0.06 * ident.face_width) * W
    fb = (0.19 + 0.06 * ident.face_height) * H
    am = (0.25 + 0.17 * ident.mouth_width) * fa
    bm_max = MOUTH_AREA_FRAC * fa * fb / am
    return {
        "fa": fa, "fb": fb, "am": am, "bm_max": bm_max,
        "eye_dx": (0.28 + 0.22 * ident.eye_spacing) * fa,
        "eye_dy": -0.3 * fb,
        "eye_r": 0.11 * fb,
        "outline": 0.5 + 2.0 * ident.outline,
    }


def head_track(T: int, motion_seed: int, H: int, W: int) -> np.ndarray:
    """Smooth seeded head-center drift, shape (T, 2) as (x, y)."""
    g = rng(motion_seed, "head")
    f = g.uniform(0.03, 0.12, 4)
    ph = g.uniform(0.0, 2 * np.pi, 4)
    t = np.arange(T)[:, None]
    dx = 1.6 * np.sin(2 * np.pi * f[0] * t + ph[0]) + 0.8 * np.sin(2 * np.pi * f[1] * t + ph[1])
    dy = 1.0 * np.sin(2 * np.pi * f[2] * t + ph[2]) + 0.5 * np.sin(2 * np.pi * f[3] * t + ph[3])
    base = g.uniform(-2.0, 2.0, 2)
    cx = W / 2 + base[0] + dx[:, 0]
    cy = 0.44 * H + base[1] + dy[:, 0]
    return np.stack([cx, cy], axis=1)


def _ellipse_sd(xx, yy, cx, cy, a, b):
    """First-order signed distance (pixels) to an axis-aligned ellipse."""
    dx, dy = xx - cx, yy - cy
    f = (dx / a) ** 2 + (dy / b) ** 2 - 1.0
    grad = 2.0 * np.sqrt((dx / a ** 2) ** 2 + (dy / b ** 2) ** 2) + 1e-9
    return f / grad


def _cov(sd):
    return np.clip(0.5 - sd, 0.0, 1.0)


def _supersampled_ellipse(cx, cy, a, b, H, W, ss=4, pad=2):
    """Area-coverage of an ellipse, exact up to the supersampling grid."""
    x0 = max(int(np.floor(cx - a)) - pad, 0)
    x1 = min(int(np.ceil(cx + a)) + pad, W)
    y0 = max(int(np.floor(cy - b)) - pad, 0)
    y1 = min(int(np.ceil(cy + b)) + pad, H)
    cov = np.zeros((H, W))
    if x1 <= x0 or y1 <= y0:
        return cov
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(x0, x1)[:, None] + offs[None, :]).reshape(-1)
    ys = (np.arange(y0, y1)[:, None] + offs[None, :]).reshape(-1)
    inside = ((xs[None, :] - cx) / a) ** 2 + ((ys[:, None] - cy) / b) ** 2 <= 1.0
    inside = inside.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    cov[y0:y1, x0:x1] = inside
    return cov


def background_image(scene: SceneSpec, H: int, W: int) -> np.ndarray:
    hue, freq, orient = scene.texture
    yy, xx = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    base = _hsv(hue, 0.45, 0.75)
    alt = _hsv(hue + 0.12, 0.35, 0.55)
    theta = np.pi * orient
    cycles = 0.5 + 1.5 * freq
    phase = 2 * np.pi * cycles * (xx * np.cos(theta) + yy * np.sin(theta)) / W
    w = 0.5 + 0.5 * np.sin(phase)
    img = base * (1 - w[..., None]) + alt * w[..., None]
    return np.clip(img * scene.lighting, 0.0, 1.0)


def render_video(ident: IdentitySpec, scene: SceneSpec, audio: AudioTrack, T: int, motion_seed: int,
                 H: int = 64, W: int = 64, start: int = 0) -> RenderedVideo:
    """Render ``T`` frames; frame ``i`` uses envelope ``audio.envelope[start + i]``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if H % 16 or W % 16:
        raise ValueError("H and W must be multiples of 16")
    if start + T > len(audio):
        raise ValueError("audio track shorter than requested frames")
    geo = face_geometry(ident, H, W)
    col = identity_colors(ident)
    light = 0.85 + 0.15 * scene.lighting
    face_c, hair_c, torso_c, out_c = (col[k] * light for k in ("face", "hair", "torso", "outline"))
    bg = background_image(scene, H, W)
    centers = head_track(start + T, motion_seed, H, W)[start:]
    yy, xx = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    fa, fb = geo["fa"], geo["fb"]
    cx, cy = centers[:, 0, None, None], centers[:, 1, None, None]
    c_torso = _cov(_ellipse_sd(xx, yy, cx, cy + fb + 0.75 * H * 0.35, 1.9 * fa, 0.35 * H))
    c_hair = _cov(_ellipse_sd(xx, yy, cx, cy - 0.25 * fb, 1.1 * fa, 1.0 * fb))
    sd_face = _ellipse_sd(xx, yy, cx, cy, fa, fb)
    c_face = _cov(sd_face)
    c_line = c_face * np.clip(sd_face + geo["outline"] + 0.5, 0.0, 1.0)
    er = geo["eye_r"]
    c_eyes = (_cov(_ellipse_sd(xx, yy, cx - geo["eye_dx"], cy + geo["eye_dy"], er, er))
              + _cov(_ellipse_sd(xx, yy, cx + geo["eye_dx"], cy + geo["eye_dy"], er, er)))
    env = np.asarray(audio.envelope[start:start + T], dtype=np.float64)
    bm = geo["bm_max"] * (MOUTH_MIN_OPEN + (1 - MOUTH_MIN_OPEN) * env)
    c_mouth = np.stack([_supersampled_ellipse(centers[i, 0], centers[i, 1] + MOUTH_Y * fb, geo["am"], bm[i], H, W)
                        for i in range(T)])
    frames = np.broadcast_to(bg, (T, H, W, 3))
    for cov, c in ((c_torso, torso_c), (c_hair, hair_c), (c_face, face_c), (c_line, out_c),
                   (np.minimum(c_eyes, 1.0), EYE_RGB), (c_mouth, MOUTH_RGB)):
        frames = frames * (1 - cov[..., None]) + c * cov[..., None]
    masks = (c_torso + c_hair + c_face) > 0
    boxes = np.stack([np.maximum(centers[:, 0] - fa, 0.0), np.maximum(centers[:, 1] - fb, 0.0),
                      np.minimum(centers[:, 0] + fa, W), np.minimum(centers[:, 1] + fb, H)], axis=1)
    return RenderedVideo(np.clip(frames, 0.0, 1.0), boxes, masks)


# ---------------------------------------------------------------- oracles

def _box_geom(face_box):
    x0, y0, x1, y1 = (float(v) for v in face_box)
    if x1 <= x0 or y1 <= y0:
        raise ValueError("empty face box")
    return (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2


def _region(frame, cx, cy, fa, fb, xr, yr):
    """Pixels whose centers fall in cx + xr*fa, cy + yr*fb (relative ranges)."""
    H, W = frame.shape[:2]
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    mx = (xs >= cx + xr[0] * fa) & (xs <= cx + xr[1] * fa)
    my = (ys >= cy + yr[0] * fb) & (ys <= cy + yr[1] * fb)
    px = frame[np.ix_(my, mx)]
    if px.size == 0:
        # degenerate tiny box: fall back to the nearest pixel
        ix = int(np.clip(cx + 0.5 * (xr[0] + xr[1]) * fa, 0, W - 1))
        iy = int(np.clip(cy + 0.5 * (yr[0] + yr[1]) * fb, 0, H - 1))
        px = frame[iy:iy + 1, ix:ix + 1]
    return px.reshape(-1, frame.shape[-1])


def _luma(c):
    return c @ np.array([0.299, 0.587, 0.114])


def face_color(frame, face_box) -> np.ndarray:
    cx, cy, fa, fb = _box_geom(face_box)
    px = np.concatenate([
        _region(frame, cx, cy, fa, fb, (-0.72, -0.5), (-0.05, 0.15)),
        _region(frame, cx, cy, fa, fb, (0.5, 0.72), (-0.05, 0.15)),
        _region(frame, cx, cy, fa, fb, (-0.2, 0.2), (-0.72, -0.5)),
    ])
    return np.median(px, axis=0)


def _chroma(c):
    return c / (c.sum() + 1e-3)


def identity_features(frame, face_box) -> np.ndarray:
    """Raw identity statistics read from the face region (15 values)."""
    frame = np.asarray(frame, dtype=np.float64)
    cx, cy, fa, fb = _box_geom(face_box)
    face = face_color(frame, face_box)
    hair = np.median(_region(frame, cx, cy, fa, fb, (-0.45, 0.45), (-1.2, -1.06)), axis=0)
    torso = np.median(_region(frame, cx, cy, fa, fb, (-0.6, 0.6), (1.2, 1.45)), axis=0)
    edge = np.concatenate([_region(frame, cx, cy, fa, fb, (-1.0, -0.86), (-0.3, 0.3)),
                           _region(frame, cx, cy, fa, fb, (0.86, 1.0), (-0.3, 0.3))]).mean(axis=0)
    lf = _luma(face) + 1e-3
    # eye-row darkness centroid, per side
    H, W = frame.shape[:2]
    ys = np.arange(H) + 0.5
    xs = np.arange(W) + 0.5
    rows = (ys >= cy - 0.45 * fb) & (ys <= cy - 0.15 * fb)
    dark = np.clip(lf - _luma(frame[rows]), 0.0, None).sum(axis=0)  # (W,)
    spacing = []
    for sgn in (-1, 1):
        rel = sgn * (xs - cx) / fa
        sel = (rel >= 0.1) & (rel <= 0.75)
        w = dark[sel]
        spacing.append(float((w * rel[sel]).sum() / (w.sum() + 1e-6)) if w.sum() > 1e-6 else 0.4)
    sat = lambda c: (c.max() - c.min()) / (c.max() + 1e-3)
    return np.array([
        *_chroma(face), *_chroma(hair), *_chroma(torso),
        lf, _luma(hair) / lf, _luma(torso) / lf, _luma(edge) / lf,
        np.mean(spacing), sat(face),
    ])


# Weights emphasise scene-stable statistics. Hair and torso saturation are
# fixed by the renderer, so they would only amplify reconstruction noise.
_FEATURE_WEIGHTS = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.8, 0.8, 0.8,
                             0.4, 0.8, 0.6, 0.5, 0.5, 0.8])


@functools.lru_cache(maxsize=1)
def _feature_stats():
    g = rng(2024, "embed-stats")
    feats = []
    for i in range(160):
        ident = IdentitySpec.random(g)
        scene = SceneSpec.random(g)
        v = render_video(ident, scene, constant_audio(1, g.uniform()), 1, int(g.integers(0, 2**31)))
        feats.append(identity_features(v.frames[0], v.boxes[0]))
    feats = np.array(feats)
    return feats.mean(axis=0), feats.std(axis=0) + 1e-6


def oracle_identity_embed(frame, face_box) -> np.ndarray:
    """Unit 15-vector of standardized face-region statistics."""
    mu, sd = _feature_stats()
    z = (identity_features(frame, face_box) - mu) / sd * _FEATURE_WEIGHTS
    n = np.linalg.norm(z)
    if n < 1e-12:
        z = np.ones(EMBED_DIM)
        n = np.linalg.norm(z)
    return z / n


def mouth_aperture_readout(frame, face_box) -> float:
    """Mouth-pixel mass in the mouth window, normalized by its full-open value."""
    frame = np.asarray(frame, dtype=np.float64)
    cx, cy, fa, fb = _box_geom(face_box)
    f = face_color(frame, face_box)
    d = MOUTH_RGB - f
    den = float(d @ d)
    if den < 1e-6:
        return 0.0
    H, W = frame.shape[:2]
    xs = np.arange(W) + 0.5
    ys = np.arange(H) + 0.5
    # elliptical window enclosing every admissible mouth shape plus antialiasing
    inside = (((xs[None, :] - cx) / (0.5 * fa + 1.0)) ** 2
              + ((ys[:, None] - cy - MOUTH_Y * fb) / (0.38 * fb + 1.0)) ** 2) <= 1.0
    alpha = ((frame[inside] - f) @ d) / den
    area = float(alpha.sum())
    full = np.pi * MOUTH_AREA_FRAC * fa * fb
    return float(np.clip((area / full - MOUTH_MIN_OPEN) / (1 - MOUTH_MIN_OPEN), 0.0, 1.0))


# ---------------------------------------------------------------- codec

def _opponent_basis() -> np.ndarray:
    m = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, 0.0], [1.0, 1.0, -2.0]])
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    d = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n)) * np.sqrt(2.0 / n)
    d[0] /= np.sqrt(2.0)
    return d


@functools.lru_cache(maxsize=None)
def _calibration_gains(c_s: int, pool: int, luma_band: int, chroma_band: int) -> np.ndarray:
    raw = ToyCodec(c_s, pool, luma_band, chroma_band, normalize=False)
    g = rng(0, "codec-calibration")
    lat = []
    for _ in range(24):
        ident, scene = IdentitySpec.random(g), SceneSpec.random(g)
        audio = synth_audio(4, int(g.integers(0, 2**31)))
        lat.append(raw.encode(render_video(ident, scene, audio, 4, int(g.integers(0, 2**31))).frames))
    z = np.concatenate([x.reshape(-1, raw.channels) for x in lat])
    return 1.0 / np.sqrt(np.mean(z * z, axis=0))


class ToyCodec:
    """Fixed linear latent codec.

    Each ``c_s`` x ``c_s`` pixel cell is block-averaged by ``pool``, turned
    into one luma and two opponent chroma planes, and 2D-DCT transformed.
    The latent keeps luma coefficients with u+v <= ``luma_band`` and chroma
    coefficients with u+v <= ``chroma_band``. The kept basis is orthonormal.
    With ``normalize`` each channel is then scaled by a fixed gain giving it
    unit RMS over a seeded calibration set of renders, so every channel sits
    on the same scale as unit Gaussian noise. decode inverts the gains,
    applies the transposed basis and upsamples by repetition.
    """

    def __init__(self, c_s: int = 8, pool: int = 2, luma_band: int = 2, chroma_band: int = 0,
                 normalize: bool = False):
        if c_s % pool:
            raise ValueError("pool must divide c_s")
        self.c_s, self.pool = c_s, pool
        self.r = r = c_s // pool
        dct, col = _dct_matrix(r), _opponent_basis()
        cols, self.coefficients = [], []
        for c, band in ((0, luma_band), (1, chroma_band), (2, chroma_band)):
            for s in range(2 * r - 1):
                for u in range(r):
                    v = s - u
                    if 0 <= v < r and s <= band:
                        cols.append((np.outer(dct[u], dct[v])[..., None] * col[c]).reshape(-1))
                        self.coefficients.append((c, u, v))
        self.basis = np.stack(cols, axis=1)          # (r*r*3, channels)
        self.channels = self.basis.shape[1]
        self.gains = np.ones(self.channels)
        if normalize:
            self.gains = _calibration_gains(c_s, pool, luma_band, chroma_band)

    def latent_shape(self, T: int, H: int, W: int) -> tuple:
        return (T, H // self.c_s, W // self.c_s, self.channels)

    def encode(self, video: np.ndarray) -> np.ndarray:
        v = np.asarray(video, dtype=np.float64)
        T, H, W, C = v.shape
        if H % self.c_s or W % self.c_s or C != 3:
            raise ValueError("frame size must be divisible by c_s with 3 channels")
        p, r = self.pool, self.r
        pooled = v.reshape(T, H // p, p, W // p, p, 3).mean(axis=(2, 4))
        h, w = H // self.c_s, W // self.c_s
        cells = pooled.reshape(T, h, r, w, r, 3).transpose(0, 1, 3, 2, 4, 5).reshape(T, h, w, r * r * 3)
        return (cells @ self.basis) * self.gains

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent, dtype=np.float64)
        T, h, w, C = z.shape
        if C != self.channels:
            raise ValueError("latent channel count mismatch")
        p, r = self.pool, self.r
        cells = (z / self.gains) @ self.basis.T
        pooled = cells.reshape(T, h, w, r, r, 3).transpose(0, 1, 3, 2, 4, 5).reshape(T, h * r, w * r, 3)
        return np.repeat(np.repeat(pooled, p, axis=1), p, axis=2)


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return 100.0 if mse <= 1e-10 else min(100.0, 10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------- datasets

@dataclass
class Sample:
    """One training/evaluation example in pixel space."""

    index: int
    mode: str
    identity: IdentitySpec
    target_scene: SceneSpec
    ref_scene: SceneSpec
    target: RenderedVideo
    motion: RenderedVideo
    reference: RenderedVideo
    drv_audio: AudioTrack
    ref_audio: AudioTrack
    background: np.ndarray   # (H, W, 3) with subject region zeroed
    subject_mask: np.ndarray  # (H, W) union of target subject masks
    text: np.ndarray
    seeds: dict = field(default_factory=dict)
    ref_source_start: Optional[int] = None
    world_seed: int = 0

    @property
    def ref_len(self) -> int:
        return len(self.reference)


def _sample_rng_params(index: int, seed: int, cfg: WorldConfig):
    g = rng(seed, "sample", index)
    ident = IdentitySpec.random(g)
    scene_t = SceneSpec.random(g)
    scene_r = SceneSpec.random(g)
    ref_len = int(g.integers(cfg.ref_min, cfg.ref_max + 1))
    seeds = {k: int(g.integers(0, 2**31 - 1)) for k in ("audio_t", "motion_t", "audio_r", "motion_r")}
    return ident, scene_t, scene_r, ref_len, seeds


def make_sample(index: int, mode: str, seed: int, cfg: WorldConfig = WorldConfig(),
                ref_len: Optional[int] = None, identity: Optional[IdentitySpec] = None) -> Sample:
    """Build sample ``index`` of the stream keyed by ``seed``.

    ``same_scene``: reference frames come from the target's own source video.
    ``cross_scene``: reference is a separate video of the same identity in a
    different scene.
    """
    if mode not in ("same_scene", "cross_scene"):
        raise ValueError(f"unknown dataset mode {mode!r}")
    ident, scene_t, scene_r, n_ref, seeds = _sample_rng_params(index, seed, cfg)
    if identity is not None:
        ident = identity
    if ref_len is not None:
        n_ref = int(ref_len)
    if n_ref < 1:
        raise ValueError("reference length must be >= 1")
    H, W, T = cfg.H, cfg.W, cfg.T
    kw = dict(L=cfg.L, d_audio=cfg.d_audio, proj_seed=cfg.audio_seed)
    n_tgt = N_MOTION + T
    ref_start = None
    if mode == "same_scene":
        scene_r = scene_t
        audio = synth_audio(n_tgt + n_ref, seeds["audio_t"], **kw)
        src = render_video(ident, scene_t, audio, n_tgt + n_ref, seeds["motion_t"], H, W)
        motion, target, reference = src.slice(0, N_MOTION), src.slice(N_MOTION, n_tgt), src.slice(n_tgt, n_tgt + n_ref)
        drv, ref_audio = audio.slice(N_MOTION, n_tgt), audio.slice(n_tgt, n_tgt + n_ref)
        ref_start = n_tgt
    else:
        # the reference scene must differ from the target's
        if scene_r == scene_t:
            scene_r = SceneSpec(tuple((x + 0.5) % 1.0 for x in scene_t.texture), scene_t.lighting)
        audio = synth_audio(n_tgt, seeds["audio_t"], **kw)
        src = render_video(ident, scene_t, audio, n_tgt, seeds["motion_t"], H, W)
        motion, target = src.slice(0, N_MOTION), src.slice(N_MOTION, n_tgt)
        drv = audio.slice(N_MOTION, n_tgt)
        ref_audio = synth_audio(n_ref, seeds["audio_r"], **kw)
        reference = render_video(ident, scene_r, ref_audio, n_ref, seeds["motion_r"], H, W)
    subject = target.masks.any(axis=0)
    background = target.frames[0] * (~subject)[..., None]
    return Sample(index, mode, ident, scene_t, scene_r, target, motion, reference, drv, ref_audio,
                  background, subject, scene_t.descriptor(), seeds, ref_start, seed)


def make_dataset(n: int, mode: str, seed: int, cfg: WorldConfig = WorldConfig(), start: int = 0) -> list:
    return [make_sample(start + i, mode, seed, cfg) for i in range(n)]


def with_reference_length(sample: Sample, n_ref: int, seed: Optional[int] = None,
                          cfg: WorldConfig = WorldConfig()) -> Sample:
    """Re-render ``sample`` with a reference clip of ``n_ref`` frames.

    Shorter lengths are prefixes of longer ones; target content is unchanged.
    ``seed`` defaults to the world seed the sample was drawn from.
    """
    seed = sample.world_seed if seed is None else seed
    return make_sample(sample.index, sample.mode, seed, cfg, ref_len=n_ref, identity=sample.identity)


def mismatched_identity(ident: IdentitySpec) -> IdentitySpec:
    """A deterministic, clearly different identity (hue-rotated)."""
    v = list(ident.id_vector)
    v[0] = (v[0] + 0.5) % 1.0
    v[6] = (v[6] + 0.5) % 1.0
    v[1] = 1.0 - v[1]
    return replace(ident, id_vector=tuple(v))


_DEFAULT_CODEC = ToyCodec()


def toy_vae_encode(video) -> np.ndarray:
    return _DEFAULT_CODEC.encode(video)


def toy_vae_decode(latent) -> np.ndarray:
    return _DEFAULT_CODEC.decode(latent)
