"""Command-line surface: every subcommand in-process, success and failure."""

import os

import numpy as np
import pytest

from gamreid.backbone import Backbone, preset
from gamreid.cli import main
from gamreid.diagnostics import BatteryResult
from gamreid.imageops import read_pnm

SPEC_TEXT = """\
synth.num_identities = 4
synth.views_per_identity = 8
synth.num_cameras = 2
synth.height = 16
synth.width = 8
synth.split_mode = shared
train.batch_size = 16
train.stages = 2
train.epochs_per_stage = 1
train.lr_init = 0.05
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "run.cfg"
    spec.write_text(SPEC_TEXT)
    data = root / "data"
    out = root / "run"
    assert main(["synth-data", "--spec", str(spec), "--out", str(data)]) == 0
    assert main(["train", "--spec", str(spec), "--data", str(data),
                 "--out", str(out)]) == 0
    return root, str(spec), str(data), str(out)


def test_synth_data_reports_split_counts(workspace, tmp_path, capsys):
    root, spec, _, _ = workspace
    out = tmp_path / "fresh"
    assert main(["synth-data", "--spec", spec, "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "wrote 32 images" in stdout
    assert "train=16 query=8 gallery=8" in stdout
    assert (out / "index.tsv").is_file()


def test_synth_data_refuses_existing_output(workspace, capsys):
    _, spec, data, _ = workspace
    assert main(["synth-data", "--spec", spec, "--out", data]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:usage:")


def test_train_writes_run_artifacts(workspace, capsys):
    _, _, _, out = workspace
    for name in ("train_log.tsv", "final.ckpt", "assignments.tsv",
                 "resolved_config.txt", "metrics.txt"):
        assert os.path.isfile(os.path.join(out, name)), name
    log = open(os.path.join(out, "train_log.tsv")).read()
    assert len(log.strip().splitlines()) == 2  # stages * epochs_per_stage
    resolved = open(os.path.join(out, "resolved_config.txt")).read()
    assert "train.batch_size = 16" in resolved
    assert "train.tau = 0.1" in resolved  # defaults echoed explicitly


def test_eval_reproduces_training_metrics(workspace, tmp_path, capsys):
    _, spec, data, out = workspace
    code = main(["eval", "--spec", spec,
                 "--checkpoint", os.path.join(out, "final.ckpt"),
                 "--data", data, "--out", str(tmp_path)])
    assert code == 0
    stdout = capsys.readouterr().out
    assert stdout == open(os.path.join(out, "metrics.txt")).read()
    assert (tmp_path / "metrics.txt").read_text() == stdout
    assert "rank1" in stdout and "mAP" in stdout


def test_eval_missing_checkpoint_is_usage_error(workspace, capsys):
    _, spec, data, _ = workspace
    code = main(["eval", "--spec", spec, "--checkpoint", "/nonexistent.ckpt",
                 "--data", data])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:usage:")


def test_count_params_prints_breakdown(capsys):
    assert main(["count-params", "--preset", "tiny"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    got = dict(l.split(" = ") for l in lines)
    assert set(got) == {"conv", "bn", "linear", "attention", "total"}
    assert int(got["total"]) == 13960
    assert main(["count-params", "--preset", "resnet50-baseline"]) == 0
    total = dict(l.split(" = ") for l in
                 capsys.readouterr().out.strip().splitlines())["total"]
    assert int(total) == 24557120


def test_count_params_rejects_unknown_preset(capsys):
    assert main(["count-params", "--preset", "vgg16"]) == 1
    assert capsys.readouterr().err.startswith("error:config:")


def test_cluster_merges_and_logs_pairs(workspace, tmp_path, capsys):
    _, _, _, out = workspace
    dest = tmp_path / "clusters"
    code = main(["cluster", "--checkpoint", os.path.join(out, "final.ckpt"),
                 "--merges", "2", "--out", str(dest)])
    assert code == 0
    assert "merged 2 pairs" in capsys.readouterr().out
    pairs = [l.split("\t") for l in
             (dest / "merges.tsv").read_text().strip().splitlines()]
    assert len(pairs) == 2 and all(len(p) == 2 for p in pairs)
    assignments = (dest / "assignments.tsv").read_text().strip().splitlines()
    assert len(assignments) == 16  # one row per training instance


def test_cluster_rejects_too_many_merges(workspace, tmp_path, capsys):
    _, _, _, out = workspace
    code = main(["cluster", "--checkpoint", os.path.join(out, "final.ckpt"),
                 "--merges", "99", "--out", str(tmp_path / "x")])
    assert code == 1
    assert capsys.readouterr().err.startswith("error:usage:")


def test_export_attention_map(workspace, tmp_path, capsys):
    _, spec, data, out = workspace
    image = os.path.join(data, "query")
    image = os.path.join(image, sorted(os.listdir(image))[0])
    layer = Backbone(preset("tiny"), seed=0).block_names()[0]
    dest = tmp_path / "attn.pgm"
    code = main(["export-attn", "--spec", spec,
                 "--checkpoint", os.path.join(out, "final.ckpt"),
                 "--image", image, "--layer", layer, "--out", str(dest)])
    assert code == 0
    assert "wrote attention map" in capsys.readouterr().out
    gray = read_pnm(str(dest))
    assert gray.shape[0] == 1 and gray.min() >= 0.0 and gray.max() <= 1.0


def test_export_attention_unknown_layer(workspace, tmp_path, capsys):
    _, spec, data, out = workspace
    image = os.path.join(data, "query")
    image = os.path.join(image, sorted(os.listdir(image))[0])
    code = main(["export-attn", "--spec", spec,
                 "--checkpoint", os.path.join(out, "final.ckpt"),
                 "--image", image, "--layer", "stage9.block9",
                 "--out", str(tmp_path / "x.pgm")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:usage:") and "stage0.block0" in err


def test_unknown_config_key_fails_with_location(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("definitely.not.a.key = 1\n")
    code = main(["synth-data", "--spec", str(bad), "--out", str(tmp_path / "d")])
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("error:config:") and f"{bad}:1" in err


def test_grad_check_reports_and_gates(monkeypatch, capsys):
    fake = [BatteryResult(name="op_a", cases=3, max_err=2e-5),
            BatteryResult(name="op_b", cases=2, max_err=5e-6)]
    monkeypatch.setattr("gamreid.cli.run_battery", lambda seed, eps: fake)
    assert main(["grad-check"]) == 0
    stdout = capsys.readouterr().out
    assert "op_a: cases=3" in stdout
    assert "total cases = 5" in stdout
    assert main(["grad-check", "--tol", "1e-6"]) == 1
    assert capsys.readouterr().err.startswith("error:numeric:")
