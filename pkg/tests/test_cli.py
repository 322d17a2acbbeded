import json
from pathlib import Path

import pytest

from tavr import cli, io

TINY = ["--set", "model.d=16", "--set", "model.head_count=2", "--set", "model.block_count=1",
        "--set", "stage1.steps=3", "--set", "stage2.steps=2", "--set", "stage3.steps=2",
        "--set", "train.batch_size=2", "--set", "train.pool=4", "--set", "train.warmup=1",
        "--set", "sampler.steps=2", "--set", "eval.lengths=2,4", "--set", "pairs.n_contexts=2",
        "--set", "pairs.margin=0.0"]


def tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_unknown_subcommand_exits_1_with_usage(capsys):
    assert cli.run("bogus") == 1
    assert "usage:" in capsys.readouterr().err
    assert cli.main([]) == 1


def test_bad_flag_and_bad_value_exit_1(capsys):
    assert cli.run("flops", ["--no-such-flag"]) == 1
    assert cli.run("flops", ["--set", "sampler.steps=pony"]) == 1
    assert "sampler.steps" in capsys.readouterr().err


def test_flops_full_scale(capsys, tmp_path):
    assert cli.run("flops", ["--preset", "paper_scale", "--out", str(tmp_path / "f.csv")]) == 0
    out = capsys.readouterr().out
    assert "45,360" in out
    row = json.loads(next(l for l in out.splitlines() if l.startswith("{")))
    assert row["n_total"] == 45360
    assert row["tflops"] == pytest.approx(45.30, rel=0.01)
    assert (tmp_path / "f.csv").read_text().startswith("case,n_target")
    assert (tmp_path / "f.csv.run.json").exists()


def test_flops_selection_row(capsys):
    assert cli.run("flops", ["--set", "flops.ref_keep=0.5"]) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines() if l.startswith("{")]
    assert [r["case"] for r in rows] == ["no_selection", "selection"]
    assert rows[1]["n_ref"] < rows[0]["n_ref"]


def test_gen_data_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.run("gen-data", ["--out", str(a), "--n", "4", "--seed", "7"]) == 0
    assert cli.run("gen-data", ["--out", str(b), "--n", "4", "--seed", "7"]) == 0
    ta = tree(a)
    assert ta == tree(b)
    assert len([k for k in ta if k.endswith("meta.json")]) == 4
    manifest = json.loads((tmp_path / "a.run.json").read_text())
    assert manifest["seed"] == 7 and len(manifest["outputs"]) == len(ta)
    assert io.read_tensor(a / "sample_0000" / "target.tavr").shape == (8, 64, 64, 3)


def test_thread_cap(tmp_path, monkeypatch):
    assert cli.run("gen-data", ["--out", str(tmp_path / "a"), "--n", "2"]) == 0
    monkeypatch.setenv("TAVR_THREADS", "1")
    assert cli.worker_count() == 1
    assert cli.run("gen-data", ["--out", str(tmp_path / "b"), "--n", "2"]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    monkeypatch.setenv("TAVR_THREADS", "zero")
    assert cli.run("flops", []) == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.run("train", ["--out", str(root / "s1"), "--stage", "1", *TINY]) == 0
    return root


def test_train_writes_checkpoint_metrics_and_manifest(trained):
    s1 = trained / "s1"
    assert (s1 / "checkpoint" / "manifest.json").exists()
    lines = (s1 / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3 and "loss" in json.loads(lines[0])
    assert (trained / "s1.run.json").exists()


def test_train_rerun_is_byte_identical(trained):
    again = trained / "s1_again"
    assert cli.run("train", ["--out", str(again), "--stage", "1", *TINY]) == 0
    assert tree(again) == tree(trained / "s1")


def test_later_stages_need_init(trained, tmp_path):
    assert cli.run("train", ["--out", str(tmp_path / "x"), "--stage", "2", *TINY]) == 1
    assert cli.run("train", ["--out", str(tmp_path / "x"), "--stage", "3",
                             "--init", str(trained / "s1"), *TINY]) == 1


def test_stage_chain(trained):
    s2, s3 = trained / "s2", trained / "s3"
    assert cli.run("train", ["--out", str(s2), "--stage", "2", "--init", str(trained / "s1" / "checkpoint"),
                             *TINY]) == 0
    assert cli.run("train", ["--out", str(s3), "--stage", "3", "--init", str(s2 / "checkpoint"), *TINY]) == 0
    rec = json.loads((s3 / "metrics.jsonl").read_text().splitlines()[0])
    assert "dpo" in rec


def test_eval_outputs_and_rerun(trained):
    args = ["--ckpt", str(trained / "s1"), "--n", "2", *TINY]
    assert cli.run("eval", ["--out", str(trained / "e1"), *args]) == 0
    assert cli.run("eval", ["--out", str(trained / "e2"), *args]) == 0
    t1 = tree(trained / "e1")
    assert t1 == tree(trained / "e2")
    report = json.loads(t1["report.json"])
    assert report["n"] == 2 and -1 <= report["id_ref"] <= 1
    csv = t1["reference_sweep.csv"].decode().splitlines()
    assert csv[0] == "length,id_ref,id_target,mouth_corr" and len(csv) == 3
    assert len(t1["samples.jsonl"].decode().splitlines()) == 2


def test_eval_refuses_geometry_mismatch(trained, capsys):
    args = ["--ckpt", str(trained / "s1"), "--out", str(trained / "bad"), "--n", "1", *TINY,
            "--set", "model.d=32"]
    assert cli.run("eval", args) == 1
    assert "geometry" in capsys.readouterr().err


def test_corrupt_checkpoint_is_runtime_failure(trained, tmp_path):
    import shutil
    ck = tmp_path / "ck"
    shutil.copytree(trained / "s1" / "checkpoint", ck)
    victim = next(p for p in ck.glob("*.tavr"))
    victim.write_bytes(victim.read_bytes()[:-4])
    assert cli.run("eval", ["--ckpt", str(ck), "--out", str(tmp_path / "e"), "--n", "1", *TINY]) == 2


def test_sample_from_gen_data_contexts(trained, tmp_path):
    assert cli.run("gen-data", ["--out", str(tmp_path / "d"), "--n", "2", "--mode", "cross_scene"]) == 0
    out = tmp_path / "s"
    assert cli.run("sample", ["--ckpt", str(trained / "s1"), "--contexts", str(tmp_path / "d"),
                              "--out", str(out), *TINY]) == 0
    v = io.read_tensor(out / "video_0001.tavr")
    assert v.shape == (8, 64, 64, 3) and 0.0 <= v.min() and v.max() <= 1.0
    assert cli.run("sample", ["--ckpt", str(trained / "s1"), "--n", "1", "--clips", "2",
                              "--out", str(tmp_path / "long"), *TINY]) == 0
    assert io.read_tensor(tmp_path / "long" / "video_0000.tavr").shape[0] == 16


def test_ablate_table(tmp_path, capsys):
    out = tmp_path / "ab"
    assert cli.run("ablate", ["--out", str(out), "--axes", "ref_audio,dpo_variant", "--n", "1", *TINY]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("axis,variant,id_ref")
    assert [l.split(",")[:2] for l in lines[1:]] == [["ref_audio", "on"], ["ref_audio", "off"],
                                                     ["dpo_variant", "masked"], ["dpo_variant", "unmasked"],
                                                     ["dpo_variant", "masked_real"]]
    assert cli.run("ablate", ["--out", str(out), "--axes", "colour"]) == 1
