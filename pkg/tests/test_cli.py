import json

import numpy as np
import pytest

from sslkd import checkpoint
from sslkd.cli import build_parser, main
from sslkd.encoder import count_params, table1_config

SUBCOMMANDS = ["gen-data", "kmeans-labels", "train-teacher", "distill", "count-params", "cca", "bench-frontend",
               "replay"]

SMALL_CONFIG = """\
[dataset]
n_utterances = 4
min_duration = 0.6
max_duration = 0.8
n_states = 4

[teacher]
n_layers = 2
d_model = 16
d_ffn = 32
n_heads = 2
conv_pos_kernel = 4
conv_pos_groups = 2
vocab = 4
frontend_channels = 8
steps = 2
batch_size = 2
crop_frames = 12
d_emb = 8

[student]
structure = dnt
d_model = 8
d_ffn = 8

[distill]
lambda_reg = 1.0
lambda_disc = 1.0
total_steps = 3
batch_size = 2
crop_frames = 12
eval_batches = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(SMALL_CONFIG)
    assert main(["gen-data", "--spec", str(root / "small.ini"), "--out", str(root / "data"), "--seed", "1"]) == 0
    assert main(["train-teacher", "--data", str(root / "data"), "--config", str(root / "small.ini"),
                 "--out", str(root / "teacher")]) == 0
    return root


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_documents_every_flag(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    text = capsys.readouterr().out
    sub = build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for opt in action.option_strings:
            assert opt in text
        assert action.help


def test_inline_json_spec(tmp_path, capsys):
    spec = '{"n_utterances": 2, "min_duration": 0.5, "max_duration": 0.6}'
    assert main(["gen-data", "--spec", spec, "--out", str(tmp_path / "d")]) == 0
    assert "wrote 2 utterances" in capsys.readouterr().out
    assert main(["gen-data", "--spec", "{oops", "--out", str(tmp_path / "e")]) == 2


def test_usage_errors(tmp_path, capsys):
    assert main(["gen-data", "--spec", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == 2
    assert "spec file not found" in capsys.readouterr().err
    assert main(["no-such-command"]) == 2
    assert main(["count-params", "--structure", "wide"]) == 2


def test_count_params(capsys):
    assert main(["count-params", "--structure", "dnt", "--frontend", "waveform"]) == 0
    out = capsys.readouterr().out
    assert "reference: 23.08M" in out
    assert f"{count_params(table1_config('dnt')):,d}" in out
    assert main(["count-params", "--table1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 4
    for ref in ("23.64M", "19.81M", "23.08M", "19.25M"):
        assert any(f"reference: {ref}" in line and "deviation" in line for line in lines)


def test_gen_data_deterministic_and_guarded(workspace, tmp_path):
    ini = workspace / "small.ini"
    assert main(["gen-data", "--spec", str(ini), "--out", str(tmp_path / "again"), "--seed", "1"]) == 0
    for wav in sorted((workspace / "data").glob("*.wav")):
        assert wav.read_bytes() == (tmp_path / "again" / wav.name).read_bytes()
    assert main(["gen-data", "--spec", str(ini), "--out", str(tmp_path / "again"), "--seed", "1"]) == 2
    assert main(["gen-data", "--spec", str(ini), "--out", str(tmp_path / "again"), "--seed", "1", "--force"]) == 0


def test_manifest_and_resolved_config(workspace):
    manifest = json.loads((workspace / "teacher" / "manifest.json").read_text())
    names = {e["path"] for e in manifest["files"]}
    assert {"teacher.ckpt", "loss.csv", "config.resolved"} <= names
    resolved = (workspace / "teacher" / "config.resolved").read_text()
    assert "[run]" in resolved and "[teacher]" in resolved and "command = train-teacher" in resolved


def test_replay_reproduces_teacher(workspace, tmp_path):
    assert main(["replay", str(workspace / "teacher" / "config.resolved"), "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "teacher.ckpt").read_bytes() == (workspace / "teacher" / "teacher.ckpt").read_bytes()


def test_kmeans_labels(workspace, tmp_path):
    assert main(["kmeans-labels", "--data", str(workspace / "data"), "--clusters", "4",
                 "--out", str(tmp_path / "k")]) == 0
    report = json.loads((tmp_path / "k" / "kmeans.json").read_text())
    assert 0.0 < report["purity"] <= 1.0
    assert checkpoint.load(tmp_path / "k" / "kmeans.ckpt")["kmeans.centroids"].shape == (4, 39)


def test_distill_and_resume(workspace, tmp_path):
    common = ["--teacher", str(workspace / "teacher" / "teacher.ckpt"), "--data", str(workspace / "data"),
              "--config", str(workspace / "small.ini")]
    assert main(["distill", *common, "--out", str(tmp_path / "full")]) == 0
    header, *rows = (tmp_path / "full" / "loss.csv").read_text().splitlines()
    assert header == "step,phase,loss,λ_reg_term,λ_disc_term"
    assert len(rows) == 3
    assert all(len(r.split(",")) == 5 and all(r.split(",")) for r in rows)
    student = checkpoint.load(tmp_path / "full" / "student.ckpt")
    assert not any(k.startswith("distill.") for k in student)
    assert main(["distill", *common, "--stop-after", "1", "--out", str(tmp_path / "part")]) == 0
    assert main(["distill", *common, "--resume", str(tmp_path / "part" / "state.ckpt"),
                 "--out", str(tmp_path / "rest")]) == 0
    assert (tmp_path / "rest" / "student.ckpt").read_bytes() == (tmp_path / "full" / "student.ckpt").read_bytes()
    assert main(["replay", str(tmp_path / "full" / "config.resolved"), "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "student.ckpt").read_bytes() == (tmp_path / "full" / "student.ckpt").read_bytes()


def test_distill_bad_config_exit_code(workspace, tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[distill]\nlambda_reg = 0\nlambda_disc = 0\n")
    rc = main(["distill", "--teacher", str(workspace / "teacher" / "teacher.ckpt"), "--data",
               str(workspace / "data"), "--config", str(bad), "--out", str(tmp_path / "o")])
    assert rc == 2


def test_numeric_failure_exit_code(workspace, tmp_path):
    t = checkpoint.load(workspace / "teacher" / "teacher.ckpt")
    t["model.encoder.proj.weight"] = t["model.encoder.proj.weight"] * 1e300
    checkpoint.save(tmp_path / "broken.ckpt", t)
    rc = main(["distill", "--teacher", str(tmp_path / "broken.ckpt"), "--data", str(workspace / "data"),
               "--config", str(workspace / "small.ini"), "--out", str(tmp_path / "o")])
    assert rc == 4


def test_data_error_exit_code(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["kmeans-labels", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 3


def test_cca_self_is_one(workspace, tmp_path, capsys):
    ckpt = str(workspace / "teacher" / "teacher.ckpt")
    assert main(["cca", "--a", ckpt, "--b", ckpt, "--data", str(workspace / "data"), "--dump",
                 "--out", str(tmp_path / "c")]) == 0
    rows = (tmp_path / "c" / "cca.tsv").read_text().splitlines()
    assert len(rows) == 3
    assert all(abs(float(r.split("\t")[1]) - 1.0) < 1e-9 for r in rows)
    assert (tmp_path / "c" / "dump_a" / "layer00.feat").exists()


def test_bench_frontend_cli(workspace, tmp_path):
    ckpt = checkpoint.load(workspace / "teacher" / "teacher.ckpt")
    from sslkd.encoder import Model
    wf = Model.from_tensors(ckpt)
    fb = Model.random(wf.config.replace(frontend_kind="fbank"), 0)
    checkpoint.save(tmp_path / "fb.ckpt", fb.to_tensors())
    assert main(["bench-frontend", "--data", str(workspace / "data"), "--waveform",
                 str(workspace / "teacher" / "teacher.ckpt"), "--fbank", str(tmp_path / "fb.ckpt"),
                 "--bench-threads", "1,2", "--repeats", "1", "--out", str(tmp_path / "b")]) == 0
    lines = (tmp_path / "b" / "bench.csv").read_text().splitlines()
    assert lines[0] == "threads,model,stage,seconds"
    assert {ln.split(",")[0] for ln in lines[1:]} == {"1", "2"}
