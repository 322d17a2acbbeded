"""Line-based ``key = value`` run configuration with typed presets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    """Unknown key, bad value or missing required key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class Field:
    kind: str                         # int | float | bool | str | ints
    choices: Optional[tuple] = None


INT, FLOAT, BOOL, STR, INTS = Field("int"), Field("float"), Field("bool"), Field("str"), Field("ints")


def _choice(*options) -> Field:
    return Field("str", tuple(options))


SCHEMA = {
    "preset": _choice("toy", "paper_scale"),
    "seed": INT,
    "world.H": INT, "world.W": INT, "world.T": INT, "world.L": INT, "world.d_audio": INT,
    "world.ref_min": INT, "world.ref_max": INT,
    "geometry.c_s": INT, "geometry.c_t": INT, "geometry.p": INT,
    "codec.pool": INT, "codec.luma_band": INT, "codec.chroma_band": INT, "codec.normalize": BOOL,
    "model.d": INT, "model.head_count": INT, "model.block_count": INT, "model.ffn_mult": INT,
    "model.use_ref_audio": BOOL, "model.use_token_selection": BOOL,
    "train.stage": _choice("1", "2", "3"),
    "train.warmup": INT, "train.batch_size": INT, "train.beta": FLOAT, "train.lam_mse": FLOAT,
    "train.lam_dpo": FLOAT, "train.dpo_variant": _choice("masked", "unmasked", "masked_real"),
    "train.weight_decay": FLOAT, "train.grad_clip": FLOAT, "train.t_dist": _choice("uniform", "logit_normal"),
    "train.p_drop_text": FLOAT, "train.p_drop_audio": FLOAT, "train.p_motion": FLOAT,
    "train.pairs_per_step": INT, "train.pool": INT,
    "stage1.steps": INT, "stage1.lr": FLOAT,
    "stage2.steps": INT, "stage2.lr": FLOAT,
    "stage3.steps": INT, "stage3.lr": FLOAT,
    "pairs.n_contexts": INT, "pairs.n_gen": INT, "pairs.margin": FLOAT,
    "sampler.steps": INT, "sampler.s_text": FLOAT, "sampler.s_audio": FLOAT,
    "sampler.method": _choice("euler", "heun"), "sampler.seed": INT,
    "eval.n_contexts": INT, "eval.mode": _choice("same_scene", "cross_scene"), "eval.lengths": INTS,
    "eval.seed": INT,
    "flops.ref_frames": INT, "flops.ref_keep": FLOAT, "flops.bg_keep": FLOAT,
}

TOY = {
    "seed": 0,
    "world.H": 64, "world.W": 64, "world.T": 8, "world.L": 4, "world.d_audio": 8,
    "world.ref_min": 12, "world.ref_max": 20,
    "geometry.c_s": 8, "geometry.c_t": 1, "geometry.p": 2,
    "codec.pool": 2, "codec.luma_band": 2, "codec.chroma_band": 0, "codec.normalize": False,
    "model.d": 64, "model.head_count": 4, "model.block_count": 2, "model.ffn_mult": 4,
    "model.use_ref_audio": True, "model.use_token_selection": True,
    "train.stage": "1",
    "train.warmup": 50, "train.batch_size": 8, "train.beta": 500.0, "train.lam_mse": 1.0, "train.lam_dpo": 2.0,
    "train.dpo_variant": "masked", "train.weight_decay": 0.01, "train.grad_clip": 1.0, "train.t_dist": "uniform",
    "train.p_drop_text": 0.1, "train.p_drop_audio": 0.1, "train.p_motion": 0.5, "train.pairs_per_step": 2,
    "train.pool": 512,
    "stage1.steps": 2000, "stage1.lr": 3e-3,
    "stage2.steps": 1500, "stage2.lr": 1e-3,
    "stage3.steps": 200, "stage3.lr": 2e-4,
    "pairs.n_contexts": 40, "pairs.n_gen": 4, "pairs.margin": 0.02,
    "sampler.steps": 24, "sampler.s_text": 5.0, "sampler.s_audio": 1.8, "sampler.method": "euler",
    "sampler.seed": 0,
    "eval.n_contexts": 20, "eval.mode": "cross_scene", "eval.lengths": (4, 8, 12, 16, 20), "eval.seed": 999,
    "flops.ref_frames": 4, "flops.ref_keep": 1.0, "flops.bg_keep": 1.0,
}

# Documentation-scale constants; only the token and FLOPs accounting is
# meant to be exercised at this size.
PAPER_SCALE = {
    **TOY,
    "world.H": 480, "world.W": 896, "world.T": 81, "world.ref_min": 20, "world.ref_max": 20,
    "geometry.c_t": 4,
    "model.d": 5120, "model.head_count": 40, "model.block_count": 40,
    "stage1.steps": 18000, "stage1.lr": 5e-6,
    "stage2.steps": 15000, "stage2.lr": 5e-6,
    "stage3.steps": 400, "stage3.lr": 5e-6,
    "pairs.n_contexts": 800, "pairs.n_gen": 2, "pairs.margin": 0.20,
    "flops.ref_frames": 20,
}

PRESETS = {"toy": TOY, "paper_scale": PAPER_SCALE}

# keys that fix the shape of model parameters and latents
GEOMETRY_KEYS = ("world.H", "world.W", "world.T", "world.L", "world.d_audio", "geometry.c_s", "geometry.c_t",
                 "geometry.p", "codec.pool", "codec.luma_band", "codec.chroma_band", "codec.normalize",
                 "model.d", "model.head_count", "model.block_count", "model.ffn_mult")


def parse_value(key: str, text: str):
    if key not in SCHEMA:
        raise ConfigError(key, "unknown key")
    f = SCHEMA[key]
    t = text.strip()
    try:
        if f.kind == "int":
            return int(t)
        if f.kind == "float":
            return float(t)
        if f.kind == "ints":
            return tuple(int(x) for x in t.split(",") if x.strip())
    except ValueError:
        raise ConfigError(key, f"expected {f.kind}, got {t!r}") from None
    if f.kind == "bool":
        if t.lower() in ("true", "yes", "1", "on"):
            return True
        if t.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(key, f"expected bool, got {t!r}")
    if f.choices and t not in f.choices:
        raise ConfigError(key, f"expected one of {', '.join(f.choices)}, got {t!r}")
    return t


class Config:
    """Fully-populated, typed run configuration."""

    def __init__(self, values: dict):
        missing = [k for k in SCHEMA if k not in values]
        if missing:
            raise ConfigError(missing[0], "missing required key")
        self.values = dict(values)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def replace(self, **updates) -> "Config":
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in SCHEMA:
                raise ConfigError(key, "unknown key")
            vals[key] = v
        return Config(vals)

    def with_overrides(self, pairs: dict) -> "Config":
        vals = dict(self.values)
        for k, v in pairs.items():
            vals[k] = parse_value(k, v) if isinstance(v, str) else v
        return Config(vals)

    def as_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(self.values.items())}

    def to_text(self) -> str:
        def fmt(v):
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, tuple):
                return ",".join(str(x) for x in v)
            return repr(v) if isinstance(v, float) else str(v)
        return "".join(f"{k} = {fmt(v)}\n" for k, v in sorted(self.values.items()))

    def content_hash(self, keys=None) -> str:
        d = self.as_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def geometry_hash(self) -> str:
        return self.content_hash(GEOMETRY_KEYS)


def parse_text(text: str, preset: Optional[str] = None) -> Config:
    entries = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        entries[key] = parse_value(key, val)
    name = entries.get("preset", preset)
    if name is None:
        raise ConfigError("preset", "missing required key")
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}")
    return Config({**PRESETS[name], **entries, "preset": name})


def parse_config(path, preset: Optional[str] = None) -> Config:
    """Read a UTF-8 ``key = value`` file layered over its preset."""
    return parse_text(Path(path).read_text(encoding="utf-8"), preset)


def preset_config(name: str = "toy", **updates) -> Config:
    return parse_text("", name).replace(**updates)
