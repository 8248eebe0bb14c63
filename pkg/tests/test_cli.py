import dataclasses
import re
import subprocess
import sys

import pytest

from bftrans import cli
from bftrans.config import SECTIONS
from bftrans.data import load_sequence
from bftrans.model import ModelConfig, init_params
from bftrans.train import TrainingDiverged

TINY = """\
[backbone]
d = 4
stage_channels = 2 3 4 4
strides = 1 1 2 2
template_size = 8
search_size = 16
[train]
epochs = 1
pairs_per_epoch = 8
batch_size = 4
[synth]
frames = 12
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def assert_error(code, err, kind, expected_code=2):
    assert code == expected_code
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"error: {kind}: "), err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.ini").write_text(TINY)
    assert cli.main(["synth", "--config", str(root / "tiny.ini"), "--out", str(root / "suite"), "--suite"]) == 0
    return root


def test_help_documents_every_key(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["train", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    for name, cls in SECTIONS.items():
        assert f"[{name}]" in out
        for f in dataclasses.fields(cls):
            assert f.name in out, f.name
    for flag in ("--config", "--data", "--out", "--log", "--variant", "--epochs", "--seed"):
        assert flag in out


def test_synth_suite_layout_and_determinism(capsys, workspace, tmp_path):
    code, out, _ = run(capsys, "synth", "--config", workspace / "tiny.ini", "--out", tmp_path / "again", "--suite")
    assert code == 0 and len(out.splitlines()) == 12
    for name in ("fm_0", "occ_1"):
        a, b = load_sequence(workspace / "suite" / name), load_sequence(tmp_path / "again" / name)
        assert a.tags == b.tags and len(a) == 12
        assert all(p.read_bytes() == q.read_bytes() for p, q in zip(a.frames, b.frames))
        assert (workspace / "suite" / name / "groundtruth.csv").read_bytes() == (tmp_path / "again" / name / "groundtruth.csv").read_bytes()


def test_synth_single_sequence(capsys, tmp_path):
    code, _, _ = run(capsys, "synth", "--out", tmp_path / "one", "--seed", 3)
    assert code == 0
    assert len(load_sequence(tmp_path / "one")) == 100


def test_train_is_bit_deterministic(capsys, workspace, tmp_path):
    for k in ("a", "b"):
        code, out, _ = run(capsys, "train", "--config", workspace / "tiny.ini", "--data", workspace / "suite", "--out", tmp_path / f"{k}.bft", "--seed", 5)
        assert code == 0 and "iterations=2" in out
    assert (tmp_path / "a.bft").read_bytes() == (tmp_path / "b.bft").read_bytes()
    assert (tmp_path / "a.loss.csv").read_bytes() == (tmp_path / "b.loss.csv").read_bytes()
    assert (tmp_path / "a.loss.csv").read_text().startswith("iter,loss,l_focal,l_l1,l_giou\n")


def test_train_divergence_exit_code(capsys, workspace, tmp_path, monkeypatch):
    def diverge(*a, **kw):
        raise TrainingDiverged(7, tmp_path / "m.bft")

    monkeypatch.setattr(cli, "train", diverge)
    code, _, err = run(capsys, "train", "--config", workspace / "tiny.ini", "--data", workspace / "suite", "--out", tmp_path / "m.bft")
    assert_error(code, err, "diverged", 3)
    assert "iteration 7" in err


def test_untrained_model_track_then_eval(capsys, workspace, tmp_path):
    """A zero-initialised desk model runs end to end and scores sensibly."""
    init_params(ModelConfig(), 0).save(tmp_path / "zero.bft")
    seq = workspace / "suite" / "sv_0"
    code, _, _ = run(capsys, "track", "--model", tmp_path / "zero.bft", "--seq", seq, "--out", tmp_path / "r.csv", "--variant", "bidir")
    assert code == 0
    assert len((tmp_path / "r.csv").read_text().splitlines()) == 12
    code, out, _ = run(capsys, "eval", "--results", tmp_path / "r.csv", "--gt", seq, "--plot", tmp_path / "p.svg", "--curves", tmp_path / "c.csv")
    assert code == 0
    rows = out.splitlines()
    assert rows[0] == "sequence,success_auc,precision_p20,tags"
    auc = float(rows[2].split(",")[1])
    assert rows[2].startswith("ALL,") and 0.0 <= auc <= 1.0
    assert rows[3].startswith("attr:SV,")
    assert (tmp_path / "p.svg").read_text().lstrip().startswith("<?xml")
    assert len((tmp_path / "c.csv").read_text().splitlines()) == 1 + 21 + 51


def test_suite_track_eval_with_attribute_filter(capsys, workspace, tmp_path):
    init_params(ModelConfig(), 0).save(tmp_path / "zero.bft")
    code, out, _ = run(capsys, "track", "--model", tmp_path / "zero.bft", "--seq", workspace / "suite", "--out", tmp_path / "res")
    assert code == 0 and len(out.splitlines()) == 12
    code, out, _ = run(capsys, "eval", "--results", tmp_path / "res", "--gt", workspace / "suite", "--attr", "fm,OCC", "--out", tmp_path / "rep.csv")
    assert code == 0
    assert [r.split(",")[0] for r in out.splitlines()[-2:]] == ["attr:FM", "attr:OCC"]
    assert (tmp_path / "rep.csv").read_text() == out


def test_ablate_table_shape_and_determinism(capsys, workspace, tmp_path):
    tables = []
    for k in ("a", "b"):
        code, out, _ = run(
            capsys, "ablate", "--config", workspace / "tiny.ini", "--data", workspace / "suite", "--heldout", workspace / "suite",
            "--out", tmp_path / f"{k}.csv", "--seed", 1, "--plot", tmp_path / f"{k}.svg",
        )
        assert code == 0
        tables.append((tmp_path / f"{k}.csv").read_bytes())
    assert tables[0] == tables[1]
    rows = tables[0].decode().splitlines()
    assert rows[0] == "#,variant,FFM,BFM,TAPE,Succ,Prec"
    assert [r.split(",")[1] for r in rows[1:]] == ["baseline", "ffm", "bfm", "bidir", "full"]
    assert [r.split(",")[2:5] for r in rows[1:]] == [["0", "0", "0"], ["1", "0", "0"], ["0", "1", "0"], ["1", "1", "0"], ["1", "1", "1"]]
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_gradcheck_pass_line(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "tape")
    assert code == 0
    m = re.match(r"PASS max_rel_err=(\S+) ", out)
    assert m and float(m.group(1)) <= 1e-4


def test_gradcheck_failure_exits_nonzero(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "heads", "--seeds", "1", "--tol", "1e-15")
    assert code == 1 and out.startswith("FAIL max_rel_err=") and "scope=heads" in out


def test_selftest(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0
    assert out.splitlines()[-1] == "PASS selftest failed=0"


@pytest.mark.parametrize(
    "argv, kind",
    [
        (["frobnicate"], "usage"),
        (["train", "--data", "/nonexistent/dir", "--out", "m.bft"], "input"),
        (["gradcheck", "--scope", "everything"], "usage"),
        (["eval", "--results", "/nonexistent.csv", "--gt", "/nonexistent.csv"], "input"),
        (["track", "--model", "/nonexistent.bft", "--seq", "/tmp", "--out", "r.csv"], "io"),
    ],
)
def test_error_paths_are_single_line(capsys, argv, kind):
    code, _, err = run(capsys, *argv)
    assert_error(code, err, kind)


def test_bad_inputs(capsys, workspace, tmp_path):
    (tmp_path / "bad.ini").write_text("[train]\nepoch = 1\n")
    code, _, err = run(capsys, "synth", "--config", tmp_path / "bad.ini", "--out", tmp_path / "x")
    assert_error(code, err, "config")

    (tmp_path / "junk.bft").write_bytes(b"not a checkpoint")
    code, _, err = run(capsys, "track", "--model", tmp_path / "junk.bft", "--seq", workspace / "suite" / "fm_0", "--out", tmp_path / "r.csv")
    assert_error(code, err, "checkpoint")

    init_params(ModelConfig(), 0).save(tmp_path / "desk.bft")
    code, _, err = run(capsys, "track", "--config", workspace / "tiny.ini", "--model", tmp_path / "desk.bft", "--seq", workspace / "suite" / "fm_0", "--out", tmp_path / "r.csv")
    assert_error(code, err, "checkpoint")

    (tmp_path / "short.csv").write_text("1,2,3,4\n")
    code, _, err = run(capsys, "eval", "--results", tmp_path / "short.csv", "--gt", workspace / "suite" / "fm_0")
    assert_error(code, err, "input")

    code, _, err = run(capsys, "eval", "--results", tmp_path / "short.csv", "--gt", workspace / "suite" / "fm_0", "--attr", "XYZ")
    assert_error(code, err, "usage")


def test_bft_threads_validation(monkeypatch):
    monkeypatch.setenv("BFT_THREADS", "3")
    assert cli.threads() == 3
    monkeypatch.setenv("BFT_THREADS", "lots")
    with pytest.raises(cli.CliError):
        cli.threads()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "bftrans", "selftest", "--bogus"], capture_output=True, text=True)
    assert res.returncode == 2
    assert res.stderr.startswith("error: usage: ") and res.stderr.count("\n") == 1
