"""Command-line entry point: gen-data, train, sample, eval, flops, ablate."""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evalkit as ek
from . import io
from . import pipeline as pl
from . import toyworld as tw
from . import training as tr
from .config import ConfigError, parse_config, parse_text
from .tokenizer import LatentGeometry, cost_report, count_tokens

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
COMMANDS = ("gen-data", "train", "sample", "eval", "flops", "ablate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def worker_count() -> int:
    """Thread cap from TAVR_THREADS, defaulting to the logical core count."""
    raw = os.environ.get("TAVR_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise UsageError(f"TAVR_THREADS must be an integer, got {raw!r}") from None
        if n < 1:
            raise UsageError("TAVR_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


def _pmap(fn, items):
    items = list(items)
    n = min(worker_count(), max(1, len(items)))
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


def build_parser() -> _Parser:
    p = _Parser(prog="tavr", description="Reference-conditioned talking-avatar toolkit at desk scale.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--preset", choices=("toy", "paper_scale"), help="preset when the file names none")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--seed", type=int, help="global seed override")
        return sp

    g = common(sub.add_parser("gen-data", help="render a synthetic dataset"))
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--mode", choices=("same_scene", "cross_scene"), default="same_scene")

    t = common(sub.add_parser("train", help="run one training stage"))
    t.add_argument("--out", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2, 3))
    t.add_argument("--init", help="checkpoint to start from (required for stages 2 and 3)")
    t.add_argument("--steps", type=int)

    s = common(sub.add_parser("sample", help="generate clips from a checkpoint"))
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--contexts", help="directory written by gen-data")
    s.add_argument("--n", type=int, default=4)
    s.add_argument("--mode", choices=("same_scene", "cross_scene"), default="cross_scene")
    s.add_argument("--clips", type=int, default=1, help="chain this many clips per context")
    s.add_argument("--steps", type=int)
    s.add_argument("--s-text", type=float)
    s.add_argument("--s-audio", type=float)

    e = common(sub.add_parser("eval", help="identity and lip-sync metrics for a checkpoint"))
    e.add_argument("--ckpt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--n", type=int)
    e.add_argument("--mode", choices=("same_scene", "cross_scene"))
    e.add_argument("--no-sweep", action="store_true", help="skip the reference-length sweep")

    f = common(sub.add_parser("flops", help="token budget and attention cost table"))
    f.add_argument("--out", help="also write the table as CSV")

    a = common(sub.add_parser("ablate", help="ref-audio / token-selection / preference-variant sweeps"))
    a.add_argument("--out", required=True)
    a.add_argument("--axes", default="ref_audio,token_selection,dpo_variant")
    a.add_argument("--n", type=int, help="evaluation contexts per variant")
    return p


def _load_config(args):
    if args.config:
        cfg = parse_config(args.config, args.preset)
    else:
        cfg = parse_text("", args.preset or "toy")
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    cfg = cfg.with_overrides(overrides)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _manifest(argv, cfg) -> io.RunManifest:
    return io.RunManifest(command=["tavr", *argv], config_hash=cfg.content_hash(), seed=cfg["seed"])


def _sibling(out) -> Path:
    out = Path(out)
    return out.parent / f"{out.name}.run.json"


# ---------------------------------------------------------------- commands

SAMPLE_TENSORS = ("target", "motion", "reference", "background", "subject_mask", "drv_audio", "ref_audio",
                  "envelope", "target_boxes", "reference_boxes", "text")


def _sample_arrays(s: tw.Sample) -> dict:
    return {"target": s.target.frames, "motion": s.motion.frames, "reference": s.reference.frames,
            "background": s.background, "subject_mask": s.subject_mask.astype(np.float32),
            "drv_audio": s.drv_audio.features, "ref_audio": s.ref_audio.features,
            "envelope": s.drv_audio.envelope, "target_boxes": s.target.boxes,
            "reference_boxes": s.reference.boxes, "text": s.text}


def cmd_gen_data(args, cfg, out: Path) -> list:
    setup = pl.setup_from(cfg)
    seed = cfg["seed"]
    samples = _pmap(lambda i: tw.make_sample(i, args.mode, seed, setup.world), range(args.n))
    files = []
    for s in samples:
        d = out / f"sample_{s.index:04d}"
        for name, arr in _sample_arrays(s).items():
            io.write_tensor(d / f"{name}.tavr", arr)
            files.append(str(d / f"{name}.tavr"))
        meta = {"index": s.index, "mode": s.mode, "world_seed": s.world_seed, "ref_len": s.ref_len,
                "identity": list(s.identity.id_vector), "seeds": s.seeds}
        io.write_json(d / "meta.json", meta)
        files.append(str(d / "meta.json"))
    io.write_text(out / "config.txt", cfg.to_text())
    files.append(str(out / "config.txt"))
    print(f"wrote {len(samples)} {args.mode} samples to {out}")
    return files


def cmd_train(args, cfg, out: Path) -> list:
    stage = args.stage or int(cfg["train.stage"])
    setup = pl.setup_from(cfg)
    if stage > 1 and not args.init:
        raise UsageError(f"stage {stage} needs --init with the previous stage's checkpoint")
    if args.init:
        model, manifest = pl.load_model(setup, _checkpoint_dir(args.init))
        if stage == 3 and manifest.get("stage") != 2:
            raise UsageError("stage 3 must start from a stage-2 checkpoint")
    else:
        model = pl.new_model(setup)
    overrides = {"steps": args.steps} if args.steps is not None else {}
    frozen = pairs = None
    if stage == 3:
        frozen = tr.frozen_copy(model)
        if cfg["train.lam_dpo"] > 0:
            pairs = pl.build_pairs(frozen, setup, cfg["pairs.n_contexts"], seed=cfg["seed"])
            if not pairs:
                raise RuntimeError("no preference pair met the margin; lower pairs.margin or add contexts")
            print(f"built {len(pairs)} preference pairs")
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    res = pl.run_stage(setup, stage, model, frozen=frozen, pairs=pairs, log_path=str(log_path), **overrides)
    files = pl.save_model(res.model, setup, out / "checkpoint", stage)
    io.write_text(out / "config.txt", cfg.to_text())
    last = res.log[-1] if res.log else {}
    print(f"stage {stage}: {len(res.log)} steps, final loss {last.get('loss', float('nan')):.6f}")
    return [*files, str(log_path), str(out / "config.txt")]


def _checkpoint_dir(path) -> Path:
    """Accepts a checkpoint directory or a train output directory holding one."""
    p = Path(path)
    for cand in (p, p / "checkpoint"):
        if (cand / "manifest.json").exists():
            return cand
    raise UsageError(f"no checkpoint under {p}")


def _contexts(args, cfg, setup, default_mode) -> list:
    if getattr(args, "contexts", None):
        metas = sorted(Path(args.contexts).glob("sample_*/meta.json"))
        if not metas:
            raise UsageError(f"no gen-data samples under {args.contexts}")
        out = []
        for m in metas:
            meta = json.loads(m.read_text(encoding="utf-8"))
            out.append(tw.make_sample(meta["index"], meta["mode"], meta["world_seed"], setup.world,
                                      ref_len=meta["ref_len"]))
        return out
    n = args.n if args.n is not None else cfg["eval.n_contexts"]
    return pl.held_out(setup, args.mode or default_mode, n)


def cmd_sample(args, cfg, out: Path) -> list:
    upd = {k: v for k, v in (("sampler.steps", args.steps), ("sampler.s_text", args.s_text),
                             ("sampler.s_audio", args.s_audio)) if v is not None}
    cfg = cfg.with_overrides(upd)
    setup = pl.setup_from(cfg)
    model, _ = pl.load_model(setup, _checkpoint_dir(args.ckpt))
    from . import sampler as sp
    files = []
    for s in _contexts(args, cfg, setup, "cross_scene"):
        ex = pl.encode(setup, s)
        scfg = setup.sampler_config(seed=cfg["sampler.seed"] + s.index)
        if args.clips > 1:
            video = sp.generate_long(model, [ex.ctx] * args.clips, args.clips, scfg, ex.z0.shape, setup.codec,
                                     setup.model_cfg.geometry, n_motion=tw.N_MOTION)
        else:
            video, lat = sp.generate_clip(model, ex.ctx, scfg, ex.z0.shape, setup.codec)
            io.write_tensor(out / f"latent_{s.index:04d}.tavr", lat)
            files.append(str(out / f"latent_{s.index:04d}.tavr"))
        io.write_tensor(out / f"video_{s.index:04d}.tavr", video)
        files.append(str(out / f"video_{s.index:04d}.tavr"))
    print(f"wrote {len(files)} tensors to {out}")
    return files


def cmd_eval(args, cfg, out: Path) -> list:
    setup = pl.setup_from(cfg)
    model, _ = pl.load_model(setup, _checkpoint_dir(args.ckpt))
    samples = _contexts(args, cfg, setup, cfg["eval.mode"])
    report, rows = pl.evaluate(model, setup, samples, seed=cfg["sampler.seed"])
    for r, s in zip(rows, samples):
        r["index"] = s.index
    files = [out / "samples.jsonl", out / "report.json"]
    io.write_jsonl(files[0], rows)
    io.write_json(files[1], report.as_dict())
    print(f"ID_ref {report.id_ref:.4f}  ID_target {report.id_target:.4f}  mouth-audio rho {report.mouth_corr:.4f}"
          f"  over {report.n} contexts")
    if not args.no_sweep:
        lengths = list(cfg["eval.lengths"])
        per = pl.reference_length_rows(model, setup, samples, lengths, seed=cfg["sampler.seed"])
        io.write_jsonl(out / "sweep_samples.jsonl", per)
        io.write_text(out / "reference_sweep.csv", ek.table_csv(pl.sweep_table(per, lengths)))
        files += [out / "sweep_samples.jsonl", out / "reference_sweep.csv"]
    return [str(f) for f in files]


FLOPS_COLUMNS = ("case", "n_target", "n_bg", "n_ref", "n_motion", "n_total", "d", "flops_projections",
                 "flops_step1", "flops_step2", "tflops")


def flops_rows(cfg) -> list:
    geo = LatentGeometry(cfg["geometry.c_s"], cfg["geometry.c_t"], cfg["geometry.p"])
    shape = (cfg["world.T"], cfg["world.H"], cfg["world.W"], geo)
    cases = [("no_selection", 1.0, 1.0)]
    if (cfg["flops.ref_keep"], cfg["flops.bg_keep"]) != (1.0, 1.0):
        cases.append(("selection", cfg["flops.ref_keep"], cfg["flops.bg_keep"]))
    rows = []
    for name, rk, bk in cases:
        b = count_tokens(*shape, T_ref=cfg["flops.ref_frames"], ref_keep_fraction=rk, bg_keep_fraction=bk)
        rows.append({"case": name, **cost_report(b, cfg["model.d"]).as_dict()})
    return rows


def cmd_flops(args, cfg, out: Optional[Path]) -> list:
    rows = flops_rows(cfg)
    print(f"{'case':<14}{'target':>9}{'bg':>7}{'ref':>8}{'motion':>8}{'total':>9}{'d':>6}{'TFLOPs':>9}")
    for r in rows:
        print(f"{r['case']:<14}{r['n_target']:>9,}{r['n_bg']:>7,}{r['n_ref']:>8,}{r['n_motion']:>8,}"
              f"{r['n_total']:>9,}{r['d']:>6}{r['tflops']:>9.2f}")
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    if out is None:
        return []
    io.write_text(out, ek.table_csv(rows, FLOPS_COLUMNS))
    return [str(out)]


ABLATE_COLUMNS = ("axis", "variant", "id_ref", "id_target", "mouth_corr", "n_total", "tflops")


def cmd_ablate(args, cfg, out: Path) -> list:
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    unknown = set(axes) - {"ref_audio", "token_selection", "dpo_variant"}
    if unknown:
        raise UsageError(f"unknown ablation axes: {', '.join(sorted(unknown))}")
    n = args.n if args.n is not None else cfg["eval.n_contexts"]
    rows = []

    def score(axis, variant, c, model):
        setup = pl.setup_from(c)
        rep, _ = pl.evaluate(model, setup, pl.held_out(setup, cfg["eval.mode"], n), seed=cfg["sampler.seed"])
        budget = pl.token_summary(setup, ref_frames=c["world.ref_max"])
        rows.append({"axis": axis, "variant": variant, "id_ref": rep.id_ref, "id_target": rep.id_target,
                     "mouth_corr": rep.mouth_corr, "n_total": budget["n_total"], "tflops": budget["tflops"]})
        print(f"{axis:<16}{variant:<12} ID_ref {rep.id_ref:.4f}  ID_target {rep.id_target:.4f}"
              f"  rho {rep.mouth_corr:.4f}")

    def stage1(c):
        setup = pl.setup_from(c)
        m = pl.new_model(setup)
        pl.run_stage(setup, 1, m)
        return m

    for axis, key in (("ref_audio", "model.use_ref_audio"), ("token_selection", "model.use_token_selection")):
        if axis in axes:
            for flag in (True, False):
                c = cfg.replace(**{key.replace(".", "__"): flag})
                score(axis, "on" if flag else "off", c, stage1(c))
    if "dpo_variant" in axes:
        setup = pl.setup_from(cfg)
        base = stage1(cfg)
        pl.run_stage(setup, 2, base)
        for variant in ("masked", "unmasked", "masked_real"):
            c = cfg.replace(train__dpo_variant=variant)
            s = pl.setup_from(c)
            model, frozen = pl.copy_model(base), tr.frozen_copy(base)
            pairs = pl.build_pairs(frozen, s, c["pairs.n_contexts"], seed=c["seed"])
            if pairs:
                pl.run_stage(s, 3, model, frozen=frozen, pairs=pairs)
            score("dpo_variant", variant, c, model)
    path = out / "ablation.csv"
    io.write_text(path, ek.table_csv(rows, ABLATE_COLUMNS))
    return [str(path)]


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "flops": cmd_flops, "ablate": cmd_ablate}


def run(command: str, args: Sequence[str] = ()) -> int:
    """Run one subcommand; returns 0 on success, 1 on invalid input, 2 on runtime failure."""
    argv = [command, *args]
    parser = build_parser()
    try:
        if command not in COMMANDS:
            raise UsageError(f"unknown command {command!r}\n\n{parser.format_usage()}")
        ns = parser.parse_args(argv)
        cfg = _load_config(ns)
        worker_count()
        out = Path(ns.out) if getattr(ns, "out", None) else None
        manifest = _manifest(argv, cfg)
        files = HANDLERS[command](ns, cfg, out)
        if out is not None:
            manifest.finish(_sibling(out), files)
        return EXIT_OK
    except (UsageError, ConfigError, pl.GeometryMismatch, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - the exit code is the contract
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        build_parser().print_help()
        return EXIT_OK if argv else EXIT_INVALID
    return run(argv[0], argv[1:])


if __name__ == "__main__":
    sys.exit(main())
