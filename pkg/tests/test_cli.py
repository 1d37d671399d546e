import contextlib
import csv
import io
from pathlib import Path

import pytest

from codecsep import cli

GOLDEN = Path(__file__).parent / "golden"


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.run([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@pytest.mark.parametrize("command", ["main", *cli.COMMANDS])
def test_help_matches_golden(command):
    code, out, _ = run(([] if command == "main" else [command]) + ["--help"])
    assert code == 0
    assert out == (GOLDEN / f"help_{command}.txt").read_text()


def test_every_optional_flag_documents_its_default():
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        for action in p._actions:
            if action.option_strings and action.dest != "help" and not action.required:
                assert "default" in action.help or "toy:" in action.help, (name, action.dest)


def test_usage_errors_exit_1():
    assert run([])[0] == 1
    assert run(["synth"])[0] == 1                        # missing --out
    assert run(["synth", "--out", "x", "--bogus"])[0] == 1
    assert run(["profile", "--model", "gpu"])[0] == 1


def test_missing_files_exit_2(tmp_path):
    code, _, err = run(["info", "--ckpt", tmp_path / "none.ntar"])
    assert code == 2 and "error" in err
    bad = tmp_path / "bad.ntar"
    bad.write_bytes(b"garbage")
    assert run(["info", "--ckpt", bad])[0] == 2


def test_synth_is_reproducible(tmp_path):
    for d in ("a", "b"):
        code, out, _ = run(["synth", "--out", tmp_path / d, "--num", 2, "--duration", 0.1, "--seed", 4])
        assert code == 0 and "resolved config" in out
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 7
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_profile_paper_preset(tmp_path):
    code, out, _ = run(["profile", "--preset", "paper", "--csv", tmp_path / "p.csv"])
    assert code == 0
    assert "1,418,854,400" in out and "total" in out
    assert (tmp_path / "p.csv").read_text().startswith("layer,kind")


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["synth", "--out", root / "train", "--num", 4, "--duration", 0.25, "--seed", 1])[0] == 0
    assert run(["synth", "--out", root / "valid", "--num", 2, "--duration", 0.25, "--seed", 2])[0] == 0
    (root / "codec.cfg").write_text("strides = 2,4\nchannels = 4,8\nembedding_dim = 8\nnum_codebooks = 2\n"
                                    "codebook_size = 16\nkernel_size = 3\nbatch_size = 4\n")
    code, out, _ = run(["train-codec", "--data", root / "train/manifest.tsv", "--out", root / "codec.ntar",
                        "--epochs", 1, "--config", root / "codec.cfg"])
    assert code == 0 and "embedding_dim = 8" in out
    (root / "sep.cfg").write_text("segment_s = 0.25\n")
    code, out, _ = run(["train-sep", "--codec", root / "codec.ntar", "--data", root / "train/manifest.tsv",
                        "--valid", root / "valid/manifest.tsv", "--out", root / "sep.ntar", "--epochs", 1,
                        "--config", root / "sep.cfg", "--lr", 1e-3])
    assert code == 0, out
    return root


def test_pipeline_writes_checkpoints_and_log(pipeline):
    lines = (pipeline / "sep.ntar.log.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,train_loss") and len(lines) == 2
    code, out, _ = run(["info", "--ckpt", pipeline / "sep.ntar"])
    assert code == 0 and "kind: separator" in out and "param_count" in out
    code, out, _ = run(["info", "--ckpt", pipeline / "codec.ntar"])
    assert code == 0 and "hop: 8" in out


@pytest.mark.parametrize("scenario", ["oracle", "local", "cloud", "codecspace"])
def test_eval_scenarios(pipeline, scenario):
    report = pipeline / f"{scenario}.csv"
    code, out, _ = run(["eval", "--codec", pipeline / "codec.ntar", "--sep", pipeline / "sep.ntar",
                        "--data", pipeline / "valid/manifest.tsv", "--scenario", scenario, "--report", report])
    assert code == 0, out
    rows = list(csv.DictReader(report.open()))
    assert [r["id"] for r in rows] == ["ex00000", "ex00001", "mean"]


def test_eval_identity_oracle_gives_zero_improvement(pipeline):
    report = pipeline / "identity.csv"
    code, _, _ = run(["eval", "--codec", pipeline / "codec.ntar", "--sep", "identity", "--data",
                      pipeline / "valid/manifest.tsv", "--scenario", "oracle", "--comparison", "ground-truth",
                      "--report", report])
    assert code == 0
    mean = list(csv.DictReader(report.open()))[-1]
    assert float(mean["si_sdri"]) == 0.0 and float(mean["sdri"]) == 0.0


def test_eval_wrong_checkpoint_kind(pipeline):
    code, _, err = run(["eval", "--codec", pipeline / "sep.ntar", "--sep", "identity",
                        "--data", pipeline / "valid/manifest.tsv"])
    assert code == 2 and "not a codec" in err
